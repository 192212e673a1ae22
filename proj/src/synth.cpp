#include "lesionlab/synth.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include <omp.h>

#include "lesionlab/error.hpp"
#include "lesionlab/image_io.hpp"
#include "lesionlab/rng.hpp"

namespace fs = std::filesystem;

namespace lesionlab {

namespace {

struct Rgb {
  uint8_t r, g, b;
};

Rgb hsv_to_rgb(double hue_deg, double sat, double val) {
  hue_deg = std::fmod(std::fmod(hue_deg, 360.0) + 360.0, 360.0);
  const double c = val * sat;
  const double hp = hue_deg / 60.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = val - c;
  auto to8 = [&](double v) { return static_cast<uint8_t>(std::clamp((v + m) * 255.0, 0.0, 255.0)); };
  return {to8(r), to8(g), to8(b)};
}

// Per-class visual signal: hue band, border irregularity range and internal
// texture frequency all separate the 7 classes.
struct ClassStyle {
  double hue_center;
  double irregularity_lo;
  double irregularity_hi;
  double texture_freq;
};

ClassStyle style_for(int label) {
  const double hue = 51.4 * label;                  // 7 evenly spaced bands
  const double irr_lo = 0.04 + 0.035 * label;
  return {hue, irr_lo, irr_lo + 0.08, 2.0 + label};
}

constexpr int kHarmonics = 5;

struct BlobShape {
  double center_row, center_col;
  double base_radius;
  double amp[kHarmonics];
  double phase[kHarmonics];

  double radius_at(double theta) const {
    double m = 1.0;
    for (int k = 0; k < kHarmonics; ++k) m += amp[k] * std::cos((k + 2) * theta + phase[k]);
    return base_radius * std::max(0.35, m);
  }
};

// Coarse value-noise grid, bilinearly interpolated.
struct NoiseField {
  int cells;
  std::vector<double> values;

  static NoiseField make(Rng& rng, int cells, double amplitude) {
    NoiseField field;
    field.cells = cells;
    field.values.resize(static_cast<size_t>(cells + 1) * (cells + 1));
    for (auto& v : field.values) v = rng.uniform(-amplitude, amplitude);
    return field;
  }

  double at(double u, double v) const {
    const double x = std::clamp(u, 0.0, 1.0) * cells;
    const double y = std::clamp(v, 0.0, 1.0) * cells;
    const int x0 = std::min(static_cast<int>(x), cells - 1);
    const int y0 = std::min(static_cast<int>(y), cells - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    auto g = [&](int i, int j) { return values[static_cast<size_t>(j) * (cells + 1) + i]; };
    return g(x0, y0) * (1 - fx) * (1 - fy) + g(x0 + 1, y0) * fx * (1 - fy) +
           g(x0, y0 + 1) * (1 - fx) * fy + g(x0 + 1, y0 + 1) * fx * fy;
  }
};

Mask rasterize(const BlobShape& shape, int height, int width) {
  Mask mask(height, width);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const double dr = r - shape.center_row;
      const double dc = c - shape.center_col;
      const double dist = std::hypot(dr, dc);
      if (dist <= shape.radius_at(std::atan2(dr, dc))) mask.at(r, c) = 1;
    }
  }
  return mask;
}

void draw_hairs(Image& image, const Mask& lesion, Rng& rng) {
  const int strokes = static_cast<int>(rng.uniform_int(3, 6));
  for (int s = 0; s < strokes; ++s) {
    // quadratic bezier across the frame
    const double x0 = rng.uniform(0, image.width - 1), y0 = rng.uniform(0, image.height - 1);
    const double x1 = rng.uniform(0, image.width - 1), y1 = rng.uniform(0, image.height - 1);
    const double cx = rng.uniform(0, image.width - 1), cy = rng.uniform(0, image.height - 1);
    const uint8_t shade = static_cast<uint8_t>(rng.uniform_int(25, 70));
    const int steps = 3 * std::max(image.width, image.height);
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      const double mt = 1.0 - t;
      const int col = static_cast<int>(std::lround(mt * mt * x0 + 2 * mt * t * cx + t * t * x1));
      const int row = static_cast<int>(std::lround(mt * mt * y0 + 2 * mt * t * cy + t * t * y1));
      if (row < 0 || row >= image.height || col < 0 || col >= image.width) continue;
      if (lesion.at(row, col)) continue;  // strokes stay on background pixels
      image.at(row, col, 0) = shade;
      image.at(row, col, 1) = static_cast<uint8_t>(shade * 3 / 4);
      image.at(row, col, 2) = static_cast<uint8_t>(shade / 2);
    }
  }
}

RenderedLesion render_attempt(int label, Rng& rng, int height, int width, Difficulty difficulty,
                              double radius_scale) {
  const ClassStyle style = style_for(label);
  const double noisy = difficulty == Difficulty::noisy ? 1.0 : 0.0;

  BlobShape shape;
  shape.center_row = height * rng.uniform(0.38, 0.62);
  shape.center_col = width * rng.uniform(0.38, 0.62);
  shape.base_radius = radius_scale * std::min(height, width) * rng.uniform(0.15, 0.30);
  const double irregularity = rng.uniform(style.irregularity_lo, style.irregularity_hi);
  double amp_total = 0.0;
  for (int k = 0; k < kHarmonics; ++k) {
    shape.amp[k] = rng.uniform(0.2, 1.0);
    shape.phase[k] = rng.uniform(0.0, 2.0 * M_PI);
    amp_total += shape.amp[k];
  }
  for (int k = 0; k < kHarmonics; ++k) shape.amp[k] *= irregularity / amp_total;

  Mask mask = rasterize(shape, height, width);

  // lesion palette
  const double hue = style.hue_center + rng.uniform(-10.0, 10.0) * (1.0 + noisy);
  const double sat = rng.uniform(0.55, 0.75);
  const double val = rng.uniform(0.45, 0.65);
  const double tex_angle = rng.uniform(0.0, M_PI);
  const double tex_freq = style.texture_freq * rng.uniform(0.9, 1.1);

  // background palette
  const double skin_r = rng.uniform(205, 235);
  const double skin_g = rng.uniform(160, 185);
  const double skin_b = rng.uniform(135, 160);
  NoiseField coarse = NoiseField::make(rng, 6, 10.0 + 8.0 * noisy);
  Rng pixel_noise = rng.fork(0xBACF00DULL);

  Image image(height, width, 3);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      if (mask.at(r, c)) {
        const double axis = (c * std::cos(tex_angle) + r * std::sin(tex_angle)) /
                            std::max(1, std::min(height, width));
        const double tex = 0.05 * std::sin(2.0 * M_PI * tex_freq * axis);
        const Rgb rgb = hsv_to_rgb(hue, sat, std::clamp(val + tex, 0.05, 0.95));
        image.at(r, c, 0) = rgb.r;
        image.at(r, c, 1) = rgb.g;
        image.at(r, c, 2) = rgb.b;
      } else {
        const double n = coarse.at(static_cast<double>(c) / width, static_cast<double>(r) / height) +
                         pixel_noise.uniform(-3.0, 3.0) * (1.0 + noisy);
        auto to8 = [&](double base) {
          return static_cast<uint8_t>(std::clamp(base + n, 0.0, 255.0));
        };
        image.at(r, c, 0) = to8(skin_r);
        image.at(r, c, 1) = to8(skin_g);
        image.at(r, c, 2) = to8(skin_b);
      }
    }
  }
  if (difficulty == Difficulty::noisy) {
    Rng hair_rng = rng.fork(0x4A41525ULL);
    draw_hairs(image, mask, hair_rng);
  }
  return {std::move(image), std::move(mask)};
}

}  // namespace

RenderedLesion render_lesion(int label, uint64_t seed, int height, int width, Difficulty difficulty) {
  require(is_valid_label(label), Err::LabelOutOfRange, "label " + std::to_string(label));
  // Resize the blob and re-render if the foreground area falls outside
  // [2%, 60%] of the frame; the retry chain is part of the deterministic seed.
  double radius_scale = 1.0;
  for (int attempt = 0;; ++attempt) {
    Rng rng(hash_combine(seed, static_cast<uint64_t>(attempt)));
    RenderedLesion out = render_attempt(label, rng, height, width, difficulty, radius_scale);
    const double frac = static_cast<double>(out.mask.area()) / (static_cast<double>(height) * width);
    if (frac >= 0.02 && frac <= 0.60) return out;
    if (attempt >= 16) return out;  // unreachable for sane sizes; avoids spinning
    radius_scale *= frac < 0.02 ? 1.3 : 0.75;
  }
}

void validate_spec(const SynthSpec& spec) {
  require(spec.height >= 64 && spec.width >= 64, Err::InvalidConfig,
          "synthetic images must be at least 64x64");
  int populated = 0;
  for (const auto& [label, count] : spec.class_counts) {
    require(is_valid_label(label), Err::LabelOutOfRange, "class id " + std::to_string(label));
    require(count >= 0, Err::InvalidConfig, "negative class count");
    if (count > 0) ++populated;
  }
  require(populated >= 2, Err::InvalidConfig, "need at least 2 classes with samples");
}

DatasetManifest generate_synthetic_corpus(const SynthSpec& spec, const fs::path& out_root) {
  validate_spec(spec);
  std::error_code ec;
  fs::create_directories(out_root / "images", ec);
  fs::create_directories(out_root / "masks", ec);
  require(fs::exists(out_root / "images") && fs::exists(out_root / "masks"), Err::IoFailure,
          "cannot create corpus directories under " + out_root.string());

  struct Item {
    std::string sample_id;
    int label;
    uint64_t seed;
  };
  std::vector<Item> items;
  uint64_t index = 0;
  for (const auto& [label, count] : spec.class_counts) {
    std::string code(code_from_label(label));
    std::transform(code.begin(), code.end(), code.begin(), ::tolower);
    for (int64_t i = 0; i < count; ++i) {
      char buf[24];
      std::snprintf(buf, sizeof(buf), "%04lld", static_cast<long long>(i));
      items.push_back({"syn_" + code + "_" + buf, label, hash_combine(spec.seed, index)});
      ++index;
    }
  }

  // Per-sample seeds make parallel rendering order-independent.
  std::vector<RenderedLesion> rendered(items.size());
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < static_cast<int64_t>(items.size()); ++i) {
    rendered[static_cast<size_t>(i)] = render_lesion(items[static_cast<size_t>(i)].label,
                                                     items[static_cast<size_t>(i)].seed,
                                                     spec.height, spec.width, spec.difficulty);
  }

  for (size_t i = 0; i < items.size(); ++i) {
    write_image(out_root / "images" / (items[i].sample_id + ".png"), rendered[i].image);
    write_mask(out_root / "masks" / (items[i].sample_id + "_segmentation.png"), rendered[i].mask);
  }

  std::ofstream labels(out_root / "labels.csv", std::ios::binary);
  require(labels.good(), Err::IoFailure, "cannot write labels.csv");
  labels << "image";
  for (const auto& entry : class_table()) labels << ',' << entry.code;
  labels << '\n';
  std::vector<const Item*> sorted;
  for (const auto& item : items) sorted.push_back(&item);
  std::sort(sorted.begin(), sorted.end(),
            [](const Item* a, const Item* b) { return a->sample_id < b->sample_id; });
  for (const Item* item : sorted) {
    labels << item->sample_id;
    for (int c = 0; c < kNumClasses; ++c) labels << (c == item->label ? ",1.0" : ",0.0");
    labels << '\n';
  }
  require(labels.good(), Err::IoFailure, "write failed for labels.csv");
  labels.close();

  return ingest_manifest(out_root, out_root / "labels.csv", out_root / "masks");
}

}  // namespace lesionlab

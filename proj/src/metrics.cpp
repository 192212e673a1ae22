#include "lesionlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "lesionlab/error.hpp"
#include "lesionlab/image_io.hpp"

namespace lesionlab {

using nlohmann::json;

double jaccard(const Mask& pred, const Mask& truth) {
  require(pred.height == truth.height && pred.width == truth.width, Err::DimensionMismatch,
          "mask dimensions differ: " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
              " vs " + std::to_string(truth.height) + "x" + std::to_string(truth.width));
  int64_t intersection = 0;
  int64_t uni = 0;
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0;
    const bool t = truth.data[i] != 0;
    intersection += (p && t);
    uni += (p || t);
  }
  if (uni == 0) return 1.0;  // both empty: correctly predicted "no lesion"
  return static_cast<double>(intersection) / static_cast<double>(uni);
}

JaccardSummary summarize_jaccard(const std::vector<double>& scores) {
  require(!scores.empty(), Err::EmptyInput, "no jaccard scores to aggregate");
  JaccardSummary out;
  out.per_pair = scores;
  double sum = 0.0;
  double sum_thresholded = 0.0;
  for (double s : scores) {
    sum += s;
    sum_thresholded += (s < 0.65) ? 0.0 : s;
  }
  out.mean = sum / static_cast<double>(scores.size());
  out.thresholded_0_65 = sum_thresholded / static_cast<double>(scores.size());
  return out;
}

JaccardSummary mean_jaccard(const std::vector<std::pair<Mask, Mask>>& pairs) {
  require(!pairs.empty(), Err::EmptyInput, "no mask pairs");
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (const auto& [pred, truth] : pairs) scores.push_back(jaccard(pred, truth));
  return summarize_jaccard(scores);
}

int64_t ConfusionMatrix::total() const {
  int64_t n = 0;
  for (const auto& row : counts)
    for (int64_t v : row) n += v;
  return n;
}

int64_t ConfusionMatrix::trace() const {
  int64_t n = 0;
  for (int i = 0; i < kNumClasses; ++i) n += counts[i][i];
  return n;
}

int64_t ConfusionMatrix::row_total(int label) const {
  int64_t n = 0;
  for (int64_t v : counts[static_cast<size_t>(label)]) n += v;
  return n;
}

ConfusionMatrix confusion_matrix(const std::vector<int>& true_labels,
                                 const std::vector<int>& pred_labels) {
  require(true_labels.size() == pred_labels.size(), Err::LengthMismatch,
          "label vectors differ in length");
  ConfusionMatrix cm;
  for (size_t i = 0; i < true_labels.size(); ++i) {
    require(is_valid_label(true_labels[i]) && is_valid_label(pred_labels[i]), Err::LabelOutOfRange,
            "labels must lie in [0,6]");
    cm.counts[static_cast<size_t>(true_labels[i])][static_cast<size_t>(pred_labels[i])] += 1;
  }
  return cm;
}

std::array<std::optional<double>, kNumClasses> per_class_recall(const ConfusionMatrix& cm) {
  std::array<std::optional<double>, kNumClasses> out{};
  for (int c = 0; c < kNumClasses; ++c) {
    const int64_t row = cm.row_total(c);
    if (row > 0) {
      out[static_cast<size_t>(c)] =
          static_cast<double>(cm.counts[static_cast<size_t>(c)][static_cast<size_t>(c)]) /
          static_cast<double>(row);
    }
  }
  return out;
}

double normalized_multiclass_accuracy(const ConfusionMatrix& cm) {
  const auto recalls = per_class_recall(cm);
  double sum = 0.0;
  int populated = 0;
  for (const auto& r : recalls) {
    if (r) {
      sum += *r;
      ++populated;
    }
  }
  require(populated > 0, Err::NoSamples, "confusion matrix has no true samples");
  return sum / static_cast<double>(populated);
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

struct Glyph {
  char ch;
  uint8_t rows[7];  // 5-bit wide rows, MSB on the left
};

constexpr Glyph kGlyphs[] = {
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
};

const uint8_t* glyph_rows(char ch) {
  for (const auto& glyph : kGlyphs) {
    if (glyph.ch == ch) return glyph.rows;
  }
  return nullptr;
}

void fill_rect(Image& image, int r0, int c0, int r1, int c1, uint8_t r, uint8_t g, uint8_t b) {
  for (int row = std::max(0, r0); row <= std::min(image.height - 1, r1); ++row) {
    for (int col = std::max(0, c0); col <= std::min(image.width - 1, c1); ++col) {
      image.at(row, col, 0) = r;
      image.at(row, col, 1) = g;
      image.at(row, col, 2) = b;
    }
  }
}

}  // namespace

void draw_text(Image& image, int row, int col, const std::string& text,
               uint8_t r, uint8_t g, uint8_t b, int scale) {
  int cursor = col;
  for (char raw : text) {
    const char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
    const uint8_t* rows = glyph_rows(ch);
    if (rows) {
      for (int gr = 0; gr < 7; ++gr) {
        for (int gc = 0; gc < 5; ++gc) {
          if ((rows[gr] >> (4 - gc)) & 1) {
            fill_rect(image, row + gr * scale, cursor + gc * scale,
                      row + (gr + 1) * scale - 1, cursor + (gc + 1) * scale - 1, r, g, b);
          }
        }
      }
    }
    cursor += 6 * scale;
  }
}

Image render_confusion_heatmap(const ConfusionMatrix& cm) {
  constexpr int kCell = 44;
  constexpr int kMargin = 52;
  Image image(kMargin + kNumClasses * kCell + 8, kMargin + kNumClasses * kCell + 8, 3);
  std::fill(image.data.begin(), image.data.end(), uint8_t{245});

  int64_t max_count = 1;
  for (const auto& row : cm.counts)
    for (int64_t v : row) max_count = std::max(max_count, v);

  for (int t = 0; t < kNumClasses; ++t) {
    for (int p = 0; p < kNumClasses; ++p) {
      const double frac =
          static_cast<double>(cm.counts[static_cast<size_t>(t)][static_cast<size_t>(p)]) /
          static_cast<double>(max_count);
      // dark blue -> yellow ramp
      const auto lerp = [&](double lo, double hi) {
        return static_cast<uint8_t>(std::lround(lo + (hi - lo) * frac));
      };
      const int r0 = kMargin + t * kCell;
      const int c0 = kMargin + p * kCell;
      fill_rect(image, r0, c0, r0 + kCell - 2, c0 + kCell - 2, lerp(40, 250), lerp(50, 220), lerp(90, 60));
      const std::string label = std::to_string(cm.counts[static_cast<size_t>(t)][static_cast<size_t>(p)]);
      const uint8_t ink = frac > 0.55 ? 20 : 235;
      draw_text(image, r0 + kCell / 2 - 4, c0 + 4, label, ink, ink, ink);
    }
  }
  for (int c = 0; c < kNumClasses; ++c) {
    const std::string code(code_from_label(c));
    draw_text(image, kMargin + c * kCell + kCell / 2 - 4, 2, code, 30, 30, 30);
    draw_text(image, kMargin - 12, kMargin + c * kCell + 2, code, 30, 30, 30);
  }
  return image;
}

Image render_jaccard_histogram(const std::vector<double>& scores) {
  constexpr int kBins = 20;
  constexpr int kBarWidth = 22;
  constexpr int kPlotHeight = 200;
  constexpr int kBase = kPlotHeight + 12;
  Image image(kBase + 24, kBins * kBarWidth + 24, 3);
  std::fill(image.data.begin(), image.data.end(), uint8_t{245});

  std::array<int, kBins> bins{};
  for (double s : scores) {
    int b = static_cast<int>(std::floor(s * kBins));
    b = std::clamp(b, 0, kBins - 1);
    bins[static_cast<size_t>(b)] += 1;
  }
  const int max_bin = std::max(1, *std::max_element(bins.begin(), bins.end()));
  for (int b = 0; b < kBins; ++b) {
    const int h = bins[static_cast<size_t>(b)] * kPlotHeight / max_bin;
    const int c0 = 12 + b * kBarWidth;
    fill_rect(image, kBase - h, c0, kBase, c0 + kBarWidth - 3, 70, 120, 200);
  }
  fill_rect(image, kBase + 1, 12, kBase + 2, 12 + kBins * kBarWidth - 3, 60, 60, 60);
  draw_text(image, kBase + 6, 12, "0", 30, 30, 30);
  draw_text(image, kBase + 6, 12 + kBins * kBarWidth - 8, "1", 30, 30, 30);
  return image;
}

// ---------------------------------------------------------------------------
// JSON round-trip

namespace {

json report_to_json(const MetricsReport& report) {
  json j;
  j["schema_version"] = 1;
  j["metadata"] = {{"model_id", report.model_id},
                   {"corpus_id", report.corpus_id},
                   {"timestamp", report.timestamp}};
  if (report.segmentation) {
    const auto& seg = *report.segmentation;
    j["segmentation"] = {{"sample_ids", seg.sample_ids},
                         {"per_image_jaccard", seg.per_image_jaccard},
                         {"mean_jaccard", seg.mean_jaccard},
                         {"thresholded_jaccard_0_65", seg.thresholded_jaccard_0_65}};
  }
  if (report.classification) {
    const auto& cls = *report.classification;
    json confusion = json::array();
    for (const auto& row : cls.confusion.counts) confusion.push_back(row);
    json recalls = json::array();
    for (const auto& r : cls.per_class_recall) {
      if (r) {
        recalls.push_back(*r);
      } else {
        recalls.push_back(nullptr);
      }
    }
    j["classification"] = {{"sample_ids", cls.sample_ids},
                           {"confusion", confusion},
                           {"per_class_recall", recalls},
                           {"normalized_accuracy", cls.normalized_accuracy}};
  }
  return j;
}

}  // namespace

void save_report_json(const MetricsReport& report, const std::filesystem::path& json_path) {
  std::ofstream out(json_path, std::ios::binary);
  require(out.good(), Err::IoFailure, "cannot write report " + json_path.string());
  out << report_to_json(report).dump(2) << '\n';
  require(out.good(), Err::IoFailure, "write failed for " + json_path.string());
}

void render_report(const MetricsReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  save_report_json(report, out_dir / "report.json");

  if (report.classification) {
    write_image(out_dir / "confusion_heatmap.png",
                render_confusion_heatmap(report.classification->confusion));
  }
  if (report.segmentation) {
    write_image(out_dir / "jaccard_hist.png",
                render_jaccard_histogram(report.segmentation->per_image_jaccard));
  }
}

MetricsReport load_report(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  require(in.good(), Err::IoFailure, "cannot open report " + json_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise(Err::IoFailure, "malformed report JSON: " + std::string(e.what()));
  }
  MetricsReport report;
  const auto& meta = j.at("metadata");
  report.model_id = meta.at("model_id").get<std::string>();
  report.corpus_id = meta.at("corpus_id").get<std::string>();
  report.timestamp = meta.at("timestamp").get<std::string>();
  if (j.contains("segmentation")) {
    SegmentationReport seg;
    const auto& s = j.at("segmentation");
    seg.sample_ids = s.at("sample_ids").get<std::vector<std::string>>();
    seg.per_image_jaccard = s.at("per_image_jaccard").get<std::vector<double>>();
    seg.mean_jaccard = s.at("mean_jaccard").get<double>();
    seg.thresholded_jaccard_0_65 = s.at("thresholded_jaccard_0_65").get<double>();
    report.segmentation = std::move(seg);
  }
  if (j.contains("classification")) {
    ClassificationReport cls;
    const auto& c = j.at("classification");
    cls.sample_ids = c.at("sample_ids").get<std::vector<std::string>>();
    const auto& confusion = c.at("confusion");
    for (int t = 0; t < kNumClasses; ++t) {
      for (int p = 0; p < kNumClasses; ++p) {
        cls.confusion.counts[static_cast<size_t>(t)][static_cast<size_t>(p)] =
            confusion.at(t).at(p).get<int64_t>();
      }
    }
    const auto& recalls = c.at("per_class_recall");
    for (int i = 0; i < kNumClasses; ++i) {
      if (!recalls.at(i).is_null()) {
        cls.per_class_recall[static_cast<size_t>(i)] = recalls.at(i).get<double>();
      }
    }
    cls.normalized_accuracy = c.at("normalized_accuracy").get<double>();
    report.classification = std::move(cls);
  }
  return report;
}

}  // namespace lesionlab

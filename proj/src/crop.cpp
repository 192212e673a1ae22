#include "lesionlab/crop.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "lesionlab/error.hpp"
#include "lesionlab/image_io.hpp"

namespace fs = std::filesystem;

namespace lesionlab {

void validate_policy(const CropPolicy& policy) {
  require(policy.margin_fraction >= 0.0 && policy.margin_fraction < 1.0, Err::InvalidConfig,
          "margin_fraction must lie in [0,1)");
  require(policy.min_crop_size >= 8, Err::InvalidConfig, "min_crop_size must be >= 8");
}

std::optional<BBox> mask_to_bbox(const Mask& mask) {
  int row_min = mask.height, row_max = -1, col_min = mask.width, col_max = -1;
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      if (!mask.at(r, c)) continue;
      row_min = std::min(row_min, r);
      row_max = std::max(row_max, r);
      col_min = std::min(col_min, c);
      col_max = std::max(col_max, c);
    }
  }
  if (row_max < 0) return std::nullopt;
  return BBox{row_min, col_min, row_max, col_max};
}

namespace {

// Widen [lo,hi] symmetrically to min_size, pushing overflow to the other
// side when an image edge is hit.
void grow_to(int& lo, int& hi, int min_size, int limit) {
  min_size = std::min(min_size, limit);
  while (hi - lo + 1 < min_size) {
    if (lo > 0) --lo;
    if (hi - lo + 1 >= min_size) break;
    if (hi < limit - 1) ++hi;
    if (lo == 0 && hi == limit - 1) break;
  }
}

}  // namespace

BBox expand_bbox(const BBox& bbox, double margin_fraction, int image_height, int image_width,
                 int min_crop_size) {
  const int grow_rows = static_cast<int>(std::lround(margin_fraction * bbox.height()));
  const int grow_cols = static_cast<int>(std::lround(margin_fraction * bbox.width()));
  BBox out;
  out.row_min = std::max(0, bbox.row_min - grow_rows);
  out.col_min = std::max(0, bbox.col_min - grow_cols);
  out.row_max = std::min(image_height - 1, bbox.row_max + grow_rows);
  out.col_max = std::min(image_width - 1, bbox.col_max + grow_cols);
  grow_to(out.row_min, out.row_max, min_crop_size, image_height);
  grow_to(out.col_min, out.col_max, min_crop_size, image_width);
  return out;
}

Image crop_image(const Image& image, const BBox& bbox) {
  Image out(bbox.height(), bbox.width(), image.channels);
  for (int r = 0; r < out.height; ++r) {
    const uint8_t* src = &image.data[(static_cast<size_t>(bbox.row_min + r) * image.width +
                                      bbox.col_min) * image.channels];
    std::copy_n(src, static_cast<size_t>(out.width) * image.channels,
                &out.data[static_cast<size_t>(r) * out.width * image.channels]);
  }
  return out;
}

DatasetManifest crop_corpus(const DatasetManifest& manifest, const fs::path& masks_dir,
                            const CropPolicy& policy, const fs::path& out_root) {
  validate_policy(policy);
  std::error_code ec;
  fs::create_directories(out_root / "images", ec);
  require(fs::exists(out_root / "images"), Err::IoFailure,
          "cannot create crop output under " + out_root.string());

  const fs::path source_root(manifest.source_root);
  nlohmann::json provenance;

  DatasetManifest out;
  out.source_root = out_root.string();
  out.seed = manifest.seed;

  for (const auto& record : manifest.records) {
    const fs::path mask_path = masks_dir / (record.sample_id + "_segmentation.png");
    if (!fs::exists(mask_path)) {
      raise(Err::MissingPredictedMask, "no predicted mask for '" + record.sample_id + "'");
    }
    const Image image = read_image(source_root / record.image_path);
    const Mask mask = read_mask(mask_path);
    require(mask.height == image.height && mask.width == image.width, Err::DimensionMismatch,
            "predicted mask of '" + record.sample_id + "' does not match the image");

    const auto tight = mask_to_bbox(mask);
    BBox applied;
    Image cropped;
    if (tight) {
      applied = expand_bbox(*tight, policy.margin_fraction, image.height, image.width,
                            policy.min_crop_size);
      cropped = crop_image(image, applied);
    } else {
      applied = BBox{0, 0, image.height - 1, image.width - 1};
      cropped = image;  // empty mask: pass the full image through
    }
    write_image(out_root / "images" / (record.sample_id + ".png"), cropped);
    provenance[record.sample_id] = {
        {"bbox", {applied.row_min, applied.col_min, applied.row_max, applied.col_max}},
        {"empty_mask", !tight.has_value()}};

    SampleRecord derived = record;
    derived.image_path = "images/" + record.sample_id + ".png";
    derived.mask_path.reset();
    out.records.push_back(std::move(derived));
  }
  out.recount();

  std::ofstream prov_out(out_root / "crops.json", std::ios::binary);
  require(prov_out.good(), Err::IoFailure, "cannot write crops.json");
  prov_out << provenance.dump(2) << '\n';

  std::ofstream labels(out_root / "labels.csv", std::ios::binary);
  require(labels.good(), Err::IoFailure, "cannot write labels.csv");
  labels << "image,label_code\n";
  for (const auto& record : out.records) {
    labels << record.sample_id << ',' << code_from_label(record.label) << '\n';
  }
  return out;
}

}  // namespace lesionlab

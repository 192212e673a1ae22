#pragma once

#include <filesystem>
#include <optional>

#include "lesionlab/image.hpp"
#include "lesionlab/manifest.hpp"

namespace lesionlab {

struct CropPolicy {
  double margin_fraction = 0.1;  // must lie in [0, 1)
  int min_crop_size = 32;        // must be >= 8
  // empty-mask records always pass through as the full image
};

void validate_policy(const CropPolicy& policy);

// Tight bounding box over foreground pixels; nullopt for an empty mask.
std::optional<BBox> mask_to_bbox(const Mask& mask);

// Each side grows by margin_fraction of the matching bbox dimension, is
// clamped to the image, then grown symmetrically up to min_crop_size.
BBox expand_bbox(const BBox& bbox, double margin_fraction, int image_height, int image_width,
                 int min_crop_size);

Image crop_image(const Image& image, const BBox& bbox);

// Materializes a derived corpus under out_root: identical sample ids, labels
// and split assignments, images replaced by their mask-guided crops, plus a
// crops.json provenance file (sample_id -> applied bbox or null).
DatasetManifest crop_corpus(const DatasetManifest& manifest, const std::filesystem::path& masks_dir,
                            const CropPolicy& policy, const std::filesystem::path& out_root);

}  // namespace lesionlab

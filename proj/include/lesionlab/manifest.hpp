#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lesionlab/labels.hpp"

namespace lesionlab {

enum class Split { train, val, unassigned };

const char* split_name(Split split);
Split split_from_name(const std::string& name);

struct SampleRecord {
  std::string sample_id;
  std::string image_path;                 // relative to the manifest source root
  std::optional<std::string> mask_path;   // relative, if a mask exists
  int label = 0;
  Split split = Split::unassigned;

  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;      // sorted by sample_id
  std::map<int, int64_t> class_counts;    // present classes only
  uint64_t seed = 0;
  std::string source_root;

  int64_t size() const { return static_cast<int64_t>(records.size()); }
  void recount();
  std::vector<const SampleRecord*> with_split(Split split) const;
};

// Per-class loss multipliers over the classes present in a manifest.
struct ClassWeights {
  std::map<int, double> weights;

  static ClassWeights uniform(const std::map<int, int64_t>& class_counts);
  double at(int label) const;
};

struct IngestOptions {
  std::string mask_suffix = "_segmentation";  // masks_dir/<sample_id><suffix>.png
  bool validate_mask_dims = true;
};

// Reads a labels CSV (one-hot columns, or two-column image,label_code; the
// form is auto-detected from the header), resolves every image under `root`,
// and optionally attaches masks from `masks_dir`.
DatasetManifest ingest_manifest(const std::filesystem::path& root,
                                const std::filesystem::path& labels_file,
                                const std::optional<std::filesystem::path>& masks_dir = std::nullopt,
                                const IngestOptions& options = {});

// Per class: round-half-up(count * val_fraction) validation samples, at least
// one per class; assignment deterministic in (manifest, fraction, seed).
DatasetManifest stratified_split(const DatasetManifest& manifest, double val_fraction, uint64_t seed);

// Unstratified counterpart: round-half-up(total * val_fraction) samples drawn
// uniformly over the whole manifest.
DatasetManifest random_split(const DatasetManifest& manifest, double val_fraction, uint64_t seed);

// Exactly val_count records assigned to validation, uniformly under seed.
DatasetManifest fixed_count_val_split(const DatasetManifest& manifest, int64_t val_count, uint64_t seed);

// w_c = N_total / (K * count_c) with K = number of classes in the map.
ClassWeights compute_class_weights(const std::map<int, int64_t>& class_counts);

// Manifest CSV: sample_id,image_path,mask_path,label_code,split (UTF-8, LF).
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path, const std::string& source_root = {});

}  // namespace lesionlab

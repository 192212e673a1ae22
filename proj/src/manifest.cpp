#include "lesionlab/manifest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "lesionlab/error.hpp"
#include "lesionlab/image_io.hpp"
#include "lesionlab/rng.hpp"

namespace fs = std::filesystem;

namespace lesionlab {

namespace {

std::string trim(const std::string& value) {
  size_t first = value.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  size_t last = value.find_last_not_of(" \t\r\n");
  return value.substr(first, last - first + 1);
}

std::vector<std::string> split_line(const std::string& line, char delim = ',') {
  std::vector<std::string> tokens;
  std::string cur;
  std::istringstream stream(line);
  while (std::getline(stream, cur, delim)) tokens.push_back(trim(cur));
  if (!line.empty() && line.back() == delim) tokens.emplace_back();
  return tokens;
}

std::optional<double> parse_double(const std::string& token) {
  const std::string t = trim(token);
  if (t.empty()) return std::nullopt;
  double value{};
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || ptr != t.data() + t.size()) return std::nullopt;
  return value;
}

int64_t round_half_up(double x) { return static_cast<int64_t>(std::floor(x + 0.5)); }

// The `image` cell may or may not carry an extension; images may live either
// directly under root or under root/images.
std::optional<std::string> resolve_image(const fs::path& root, const std::string& cell) {
  std::vector<std::string> candidates;
  if (fs::path(cell).has_extension()) {
    candidates = {cell, "images/" + cell};
  } else {
    for (const char* ext : {".png", ".jpg", ".jpeg"}) {
      candidates.push_back(cell + ext);
      candidates.push_back("images/" + cell + ext);
    }
  }
  for (const auto& rel : candidates) {
    if (fs::exists(root / rel)) return rel;
  }
  return std::nullopt;
}

std::pair<int, int> image_dimensions(const fs::path& path) {
  if (path.extension() == ".png") return png_dimensions(path);
  const Image image = read_image(path);
  return {image.height, image.width};
}

DatasetManifest assign_split(const DatasetManifest& manifest, const std::vector<size_t>& val_indices,
                             uint64_t seed) {
  DatasetManifest out = manifest;
  for (auto& record : out.records) record.split = Split::train;
  for (size_t index : val_indices) out.records[index].split = Split::val;
  out.seed = seed;
  return out;
}

}  // namespace

const char* split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::unassigned: return "unassigned";
  }
  return "unassigned";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "unassigned") return Split::unassigned;
  raise(Err::IoFailure, "unknown split value '" + name + "'");
}

void DatasetManifest::recount() {
  class_counts.clear();
  for (const auto& record : records) class_counts[record.label] += 1;
}

std::vector<const SampleRecord*> DatasetManifest::with_split(Split split) const {
  std::vector<const SampleRecord*> out;
  for (const auto& record : records) {
    if (record.split == split) out.push_back(&record);
  }
  return out;
}

ClassWeights ClassWeights::uniform(const std::map<int, int64_t>& class_counts) {
  ClassWeights w;
  for (const auto& [label, count] : class_counts) {
    (void)count;
    w.weights[label] = 1.0;
  }
  return w;
}

double ClassWeights::at(int label) const {
  auto it = weights.find(label);
  require(it != weights.end(), Err::LabelOutOfRange,
          "no weight for class id " + std::to_string(label));
  return it->second;
}

DatasetManifest ingest_manifest(const fs::path& root, const fs::path& labels_file,
                                const std::optional<fs::path>& masks_dir, const IngestOptions& options) {
  std::ifstream in(labels_file);
  require(in.good(), Err::IoFailure, "cannot open labels file " + labels_file.string());

  std::string line;
  require(static_cast<bool>(std::getline(in, line)), Err::IoFailure,
          "labels file is empty: " + labels_file.string());
  const auto header = split_line(line);
  require(header.size() >= 2 && header[0] == "image", Err::IoFailure,
          "labels header must start with 'image'");

  // One-hot form: every column after `image` is a class code. Two-column
  // form: a single `label_code` (or `label`) column.
  bool one_hot = header.size() > 2;
  std::vector<int> column_labels;
  if (header.size() == 2 && (header[1] == "label_code" || header[1] == "label")) {
    one_hot = false;
  } else {
    one_hot = true;
    for (size_t i = 1; i < header.size(); ++i) column_labels.push_back(label_from_code(header[i]));
  }

  DatasetManifest manifest;
  manifest.source_root = root.string();
  std::set<std::string> seen_ids;

  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    require(cells.size() == header.size(), Err::IoFailure,
            "labels row " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                " cells, expected " + std::to_string(header.size()));

    SampleRecord record;
    record.sample_id = fs::path(cells[0]).stem().string();
    if (!seen_ids.insert(record.sample_id).second) {
      raise(Err::DuplicateSample, "sample '" + record.sample_id + "' appears twice");
    }

    if (one_hot) {
      int hits = 0;
      for (size_t i = 1; i < cells.size(); ++i) {
        const auto value = parse_double(cells[i]);
        if (!value || (*value != 0.0 && *value != 1.0)) {
          raise(Err::AmbiguousLabel,
                "row for '" + record.sample_id + "' has non-binary cell '" + cells[i] + "'");
        }
        if (*value == 1.0) {
          ++hits;
          record.label = column_labels[i - 1];
        }
      }
      if (hits != 1) {
        raise(Err::AmbiguousLabel, "row for '" + record.sample_id + "' has " +
                                       std::to_string(hits) + " active classes, expected 1");
      }
    } else {
      record.label = label_from_code(cells[1]);
    }

    const auto resolved = resolve_image(root, cells[0]);
    if (!resolved) {
      raise(Err::MissingImage, "no image found for '" + cells[0] + "' under " + root.string());
    }
    record.image_path = *resolved;

    if (masks_dir) {
      const fs::path mask = *masks_dir / (record.sample_id + options.mask_suffix + ".png");
      if (fs::exists(mask)) {
        record.mask_path = fs::relative(mask, root).string();
        if (options.validate_mask_dims) {
          const auto [mh, mw] = png_dimensions(mask);
          const auto [ih, iw] = image_dimensions(root / record.image_path);
          require(mh == ih && mw == iw, Err::DimensionMismatch,
                  "mask of '" + record.sample_id + "' is " + std::to_string(mh) + "x" +
                      std::to_string(mw) + " but image is " + std::to_string(ih) + "x" +
                      std::to_string(iw));
        }
      }
    }
    manifest.records.push_back(std::move(record));
  }

  std::sort(manifest.records.begin(), manifest.records.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.sample_id < b.sample_id; });
  manifest.recount();
  return manifest;
}

DatasetManifest stratified_split(const DatasetManifest& manifest, double val_fraction, uint64_t seed) {
  require(val_fraction > 0.0 && val_fraction < 1.0, Err::CountOutOfRange,
          "val_fraction must lie in (0,1)");
  for (const auto& [label, count] : manifest.class_counts) {
    if (count < 2) {
      raise(Err::ClassTooSmall, "class " + std::string(code_from_label(label)) + " has " +
                                    std::to_string(count) + " samples, need at least 2");
    }
  }

  std::vector<size_t> val_indices;
  for (const auto& [label, count] : manifest.class_counts) {
    std::vector<size_t> members;
    for (size_t i = 0; i < manifest.records.size(); ++i) {
      if (manifest.records[i].label == label) members.push_back(i);
    }
    Rng rng(hash_combine(hash_combine(seed, 0x5354524154ULL), static_cast<uint64_t>(label)));
    rng.shuffle(members);
    int64_t n_val = round_half_up(static_cast<double>(count) * val_fraction);
    n_val = std::clamp<int64_t>(n_val, 1, count - 1);
    val_indices.insert(val_indices.end(), members.begin(), members.begin() + n_val);
  }
  return assign_split(manifest, val_indices, seed);
}

DatasetManifest random_split(const DatasetManifest& manifest, double val_fraction, uint64_t seed) {
  require(val_fraction > 0.0 && val_fraction < 1.0, Err::CountOutOfRange,
          "val_fraction must lie in (0,1)");
  require(manifest.size() >= 2, Err::ClassTooSmall, "need at least 2 records to split");
  int64_t n_val = round_half_up(static_cast<double>(manifest.size()) * val_fraction);
  n_val = std::clamp<int64_t>(n_val, 1, manifest.size() - 1);

  std::vector<size_t> indices(manifest.records.size());
  std::iota(indices.begin(), indices.end(), size_t{0});
  Rng rng(hash_combine(seed, 0x52414e44ULL));
  rng.shuffle(indices);
  indices.resize(static_cast<size_t>(n_val));
  return assign_split(manifest, indices, seed);
}

DatasetManifest fixed_count_val_split(const DatasetManifest& manifest, int64_t val_count, uint64_t seed) {
  require(val_count > 0 && val_count < manifest.size(), Err::CountOutOfRange,
          "val_count " + std::to_string(val_count) + " outside (0, " +
              std::to_string(manifest.size()) + ")");
  std::vector<size_t> indices(manifest.records.size());
  std::iota(indices.begin(), indices.end(), size_t{0});
  Rng rng(hash_combine(seed, 0x464958ULL));
  rng.shuffle(indices);
  indices.resize(static_cast<size_t>(val_count));
  return assign_split(manifest, indices, seed);
}

ClassWeights compute_class_weights(const std::map<int, int64_t>& class_counts) {
  require(!class_counts.empty(), Err::EmptyClass, "no classes present");
  int64_t total = 0;
  for (const auto& [label, count] : class_counts) {
    if (count <= 0) {
      raise(Err::EmptyClass, "class " + std::string(code_from_label(label)) + " has zero samples");
    }
    total += count;
  }
  const double k = static_cast<double>(class_counts.size());
  ClassWeights out;
  for (const auto& [label, count] : class_counts) {
    out.weights[label] = static_cast<double>(total) / (k * static_cast<double>(count));
  }
  return out;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);  // binary keeps LF endings everywhere
  require(out.good(), Err::IoFailure, "cannot write manifest " + path.string());
  out << "sample_id,image_path,mask_path,label_code,split\n";
  for (const auto& record : manifest.records) {
    out << record.sample_id << ',' << record.image_path << ','
        << (record.mask_path ? *record.mask_path : std::string{}) << ','
        << code_from_label(record.label) << ',' << split_name(record.split) << '\n';
  }
  require(out.good(), Err::IoFailure, "write failed for manifest " + path.string());
}

DatasetManifest load_manifest(const fs::path& path, const std::string& source_root) {
  std::ifstream in(path);
  require(in.good(), Err::IoFailure, "cannot open manifest " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), Err::IoFailure, "manifest is empty");
  require(trim(line) == "sample_id,image_path,mask_path,label_code,split", Err::IoFailure,
          "unexpected manifest header in " + path.string());

  DatasetManifest manifest;
  manifest.source_root = source_root;
  std::set<std::string> seen_ids;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    require(cells.size() == 5, Err::IoFailure, "manifest row needs 5 cells: " + line);
    SampleRecord record;
    record.sample_id = cells[0];
    record.image_path = cells[1];
    if (!cells[2].empty()) record.mask_path = cells[2];
    record.label = label_from_code(cells[3]);
    record.split = split_from_name(cells[4]);
    if (!seen_ids.insert(record.sample_id).second) {
      raise(Err::DuplicateSample, "sample '" + record.sample_id + "' appears twice");
    }
    manifest.records.push_back(std::move(record));
  }
  std::sort(manifest.records.begin(), manifest.records.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.sample_id < b.sample_id; });
  manifest.recount();
  return manifest;
}

}  // namespace lesionlab

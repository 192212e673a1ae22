#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesionlab/cls.hpp"
#include "lesionlab/crop.hpp"
#include "lesionlab/metrics.hpp"
#include "lesionlab/seg.hpp"
#include "lesionlab/synth.hpp"

namespace lesionlab {

struct CorpusConfig {
  std::string type = "synth";  // "synth" | "real"
  SynthSpec synth;
  std::string root;            // real corpus location
  std::string labels_file;
  std::optional<std::string> masks_dir;
};

struct SplitConfig {
  std::string mode = "stratified";  // "stratified" | "random"
  double val_fraction = 0.2;
};

// One declarative config drives the whole experiment graph:
// ingest -> split -> train_cls -> transfer -> train_seg -> predict_masks
// -> crop -> train_cls_cropped -> evaluate -> report.
struct ExperimentConfig {
  CorpusConfig corpus;
  SplitConfig split;
  SegConfig seg;
  ClsConfig cls_baseline;
  ClsConfig cls_cropped;
  CropPolicy crop;
  std::string output_root;
  uint64_t seed = 0;
  std::string device = "cpu";

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  void validate() const;
};

// Reads the JSON config, applies `key=value` overrides (dotted paths into the
// JSON document) and the LESIONLAB_SEED / LESIONLAB_DEVICE environment
// overrides, then derives per-stage sub-seeds from the global seed.
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});
ExperimentConfig experiment_config_from_json(nlohmann::json j,
                                             const std::vector<std::string>& overrides = {});

enum class Stage {
  ingest,
  split,
  train_cls,
  transfer,
  train_seg,
  predict_masks,
  crop,
  train_cls_cropped,
  evaluate,
  report,
};

inline constexpr int kStageCount = 10;
const char* stage_name(Stage stage);
Stage stage_from_name(const std::string& name);

struct StageResult {
  Stage stage;
  std::string status;  // "done" | "cached"
  double duration_s = 0.0;
};

// Runs one stage (validating upstream artifacts and the caching contract) and
// appends the outcome to <output_root>/run.json.
StageResult run_stage(const ExperimentConfig& config, Stage stage);

std::vector<StageResult> run_all(const ExperimentConfig& config);

// Paired comparison of the evaluate-stage reports two runs share.
nlohmann::json compare_runs(const std::filesystem::path& run_a, const std::filesystem::path& run_b);

// Paired deltas between two metric reports of the same kind.
nlohmann::json compare_reports(const MetricsReport& a, const MetricsReport& b);

}  // namespace lesionlab

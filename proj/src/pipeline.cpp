#include "lesionlab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "lesionlab/error.hpp"
#include "lesionlab/image_io.hpp"
#include "lesionlab/metrics.hpp"

namespace fs = std::filesystem;

namespace lesionlab {

using nlohmann::json;

// ---------------------------------------------------------------------------
// config plumbing

namespace {

json synth_spec_to_json(const SynthSpec& spec) {
  json counts;
  for (const auto& [label, count] : spec.class_counts) {
    counts[std::string(code_from_label(label))] = count;
  }
  return {{"height", spec.height},
          {"width", spec.width},
          {"class_counts", counts},
          {"difficulty", spec.difficulty == Difficulty::noisy ? "noisy" : "separable"}};
}

SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec spec;
  spec.height = j.value("height", spec.height);
  spec.width = j.value("width", spec.width);
  if (j.contains("class_counts")) {
    for (const auto& [code, count] : j.at("class_counts").items()) {
      spec.class_counts[label_from_code(code)] = count.get<int64_t>();
    }
  }
  const std::string difficulty = j.value("difficulty", std::string("separable"));
  if (difficulty == "noisy") spec.difficulty = Difficulty::noisy;
  else if (difficulty == "separable") spec.difficulty = Difficulty::separable;
  else raise(Err::InvalidConfig, "unknown difficulty '" + difficulty + "'");
  return spec;
}

uint64_t fnv1a(const void* data, size_t n, uint64_t h = 1469598103934665603ULL) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string hash_of_json(const json& j) {
  const std::string dump = j.dump();
  return hash_hex(fnv1a(dump.data(), dump.size()));
}

std::string hash_of_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::MissingUpstreamArtifact, "missing artifact " + path.string());
  uint64_t h = 1469598103934665603ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    h = fnv1a(buf, static_cast<size_t>(in.gcount()), h);
    if (!in) break;
  }
  return hash_hex(h);
}

// Digest of a directory of artifacts (sorted names + contents).
std::string hash_of_dir(const fs::path& dir) {
  require(fs::exists(dir), Err::MissingUpstreamArtifact, "missing artifact dir " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  uint64_t h = 1469598103934665603ULL;
  for (const auto& file : files) {
    const std::string name = fs::relative(file, dir).string();
    h = fnv1a(name.data(), name.size(), h);
    std::ifstream in(file, std::ios::binary);
    char buf[1 << 16];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
      h = fnv1a(buf, static_cast<size_t>(in.gcount()), h);
      if (!in) break;
    }
  }
  return hash_hex(h);
}

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

json read_json_file(const fs::path& path, Err missing_code) {
  std::ifstream in(path);
  if (!in.good()) raise(missing_code, "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise(Err::IoFailure, "malformed JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

void write_json_file(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), Err::IoFailure, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

json ExperimentConfig::to_json() const {
  json corpus_json{{"type", corpus.type}};
  if (corpus.type == "synth") {
    corpus_json["synth"] = synth_spec_to_json(corpus.synth);
  } else {
    corpus_json["root"] = corpus.root;
    corpus_json["labels_file"] = corpus.labels_file;
    if (corpus.masks_dir) corpus_json["masks_dir"] = *corpus.masks_dir;
  }
  return {{"corpus", corpus_json},
          {"split", {{"mode", split.mode}, {"val_fraction", split.val_fraction}}},
          {"seg", seg.to_json()},
          {"cls_baseline", cls_baseline.to_json()},
          {"cls_cropped", cls_cropped.to_json()},
          {"crop", {{"margin_fraction", crop.margin_fraction}, {"min_crop_size", crop.min_crop_size}}},
          {"output_root", output_root},
          {"seed", seed},
          {"device", device}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  if (j.contains("corpus")) {
    const auto& corpus_json = j.at("corpus");
    c.corpus.type = corpus_json.value("type", c.corpus.type);
    if (corpus_json.contains("synth")) c.corpus.synth = synth_spec_from_json(corpus_json.at("synth"));
    c.corpus.root = corpus_json.value("root", std::string{});
    c.corpus.labels_file = corpus_json.value("labels_file", std::string{});
    if (corpus_json.contains("masks_dir")) c.corpus.masks_dir = corpus_json.at("masks_dir").get<std::string>();
  }
  if (j.contains("split")) {
    c.split.mode = j.at("split").value("mode", c.split.mode);
    c.split.val_fraction = j.at("split").value("val_fraction", c.split.val_fraction);
  }
  if (j.contains("seg")) c.seg = SegConfig::from_json(j.at("seg"));
  if (j.contains("cls_baseline")) c.cls_baseline = ClsConfig::from_json(j.at("cls_baseline"));
  if (j.contains("cls_cropped")) c.cls_cropped = ClsConfig::from_json(j.at("cls_cropped"));
  if (j.contains("crop")) {
    c.crop.margin_fraction = j.at("crop").value("margin_fraction", c.crop.margin_fraction);
    c.crop.min_crop_size = j.at("crop").value("min_crop_size", c.crop.min_crop_size);
  }
  c.output_root = j.value("output_root", std::string{});
  c.seed = j.value("seed", uint64_t{0});
  c.device = j.value("device", std::string("cpu"));
  return c;
}

void ExperimentConfig::validate() const {
  require(!output_root.empty(), Err::InvalidConfig, "output_root is required");
  require(corpus.type == "synth" || corpus.type == "real", Err::InvalidConfig,
          "corpus.type must be 'synth' or 'real'");
  if (corpus.type == "synth") {
    validate_spec(corpus.synth);
  } else {
    require(!corpus.root.empty() && !corpus.labels_file.empty(), Err::InvalidConfig,
            "real corpus needs root and labels_file");
  }
  require(split.mode == "stratified" || split.mode == "random", Err::InvalidConfig,
          "split.mode must be 'stratified' or 'random'");
  require(split.val_fraction > 0.0 && split.val_fraction < 1.0, Err::InvalidConfig,
          "split.val_fraction must lie in (0,1)");
  require(device == "cpu", Err::InvalidConfig, "only device 'cpu' is available");
  seg.validate();
  validate_policy(crop);
}

namespace {

void apply_override(json& doc, const std::string& key_value) {
  const auto eq = key_value.find('=');
  require(eq != std::string::npos && eq > 0, Err::InvalidConfig,
          "override must look like key.path=value: " + key_value);
  const std::string path = key_value.substr(0, eq);
  const std::string raw = key_value.substr(eq + 1);

  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // plain string
  }

  json* node = &doc;
  std::istringstream keys(path);
  std::string key, next;
  require(static_cast<bool>(std::getline(keys, key, '.')), Err::InvalidConfig,
          "empty override path");
  while (std::getline(keys, next, '.')) {
    node = &(*node)[key];
    key = next;
  }
  (*node)[key] = value;
}

}  // namespace

ExperimentConfig experiment_config_from_json(json j, const std::vector<std::string>& overrides) {
  for (const auto& kv : overrides) apply_override(j, kv);

  if (const char* env_seed = std::getenv("LESIONLAB_SEED")) {
    j["seed"] = static_cast<uint64_t>(std::strtoull(env_seed, nullptr, 10));
  }
  if (const char* env_device = std::getenv("LESIONLAB_DEVICE")) {
    std::string device(env_device);
    if (device == "0") device = "cpu";
    j["device"] = device;
  }

  ExperimentConfig config = ExperimentConfig::from_json(j);

  // All stage seeds derive from the global seed.
  config.corpus.synth.seed = hash_combine(config.seed, 1);
  config.cls_baseline.seed = hash_combine(config.seed, 3);
  config.seg.seed = hash_combine(config.seed, 4);
  config.cls_cropped.seed = hash_combine(config.seed, 5);

  // classifier_transfer defaults to this run's baseline classifier
  if (config.seg.backbone_init == BackboneInit::classifier_transfer &&
      !config.seg.classifier_checkpoint) {
    config.seg.classifier_checkpoint =
        (fs::path(config.output_root) / "train_cls" / "cls_baseline.ckpt").string();
  }

  config.validate();
  return config;
}

ExperimentConfig load_experiment_config(const fs::path& path,
                                        const std::vector<std::string>& overrides) {
  return experiment_config_from_json(read_json_file(path, Err::InvalidConfig), overrides);
}

// ---------------------------------------------------------------------------
// stage machinery

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::ingest: return "ingest";
    case Stage::split: return "split";
    case Stage::train_cls: return "train_cls";
    case Stage::transfer: return "transfer";
    case Stage::train_seg: return "train_seg";
    case Stage::predict_masks: return "predict_masks";
    case Stage::crop: return "crop";
    case Stage::train_cls_cropped: return "train_cls_cropped";
    case Stage::evaluate: return "evaluate";
    case Stage::report: return "report";
  }
  return "ingest";
}

Stage stage_from_name(const std::string& name) {
  for (int i = 0; i < kStageCount; ++i) {
    if (name == stage_name(static_cast<Stage>(i))) return static_cast<Stage>(i);
  }
  raise(Err::InvalidConfig, "unknown stage '" + name + "'");
}

namespace {

std::vector<Stage> stage_deps(Stage stage) {
  switch (stage) {
    case Stage::ingest: return {};
    case Stage::split: return {Stage::ingest};
    case Stage::train_cls: return {Stage::split};
    case Stage::transfer: return {Stage::train_cls};
    case Stage::train_seg: return {Stage::transfer, Stage::split};
    case Stage::predict_masks: return {Stage::train_seg, Stage::split};
    case Stage::crop: return {Stage::predict_masks, Stage::split};
    case Stage::train_cls_cropped: return {Stage::crop};
    case Stage::evaluate:
      return {Stage::train_cls, Stage::train_cls_cropped, Stage::predict_masks, Stage::crop};
    case Stage::report: return {Stage::evaluate};
  }
  return {};
}

json stage_scope(const ExperimentConfig& config, Stage stage) {
  json scope{{"seed", config.seed}};
  switch (stage) {
    case Stage::ingest:
      scope["corpus"] = config.to_json().at("corpus");
      break;
    case Stage::split:
      scope["split"] = {{"mode", config.split.mode}, {"val_fraction", config.split.val_fraction}};
      break;
    case Stage::train_cls:
      scope["cls"] = config.cls_baseline.to_json();
      break;
    case Stage::transfer:
    case Stage::train_seg:
    case Stage::predict_masks:
      scope["seg"] = config.seg.to_json();
      break;
    case Stage::crop:
      scope["crop"] = {{"margin_fraction", config.crop.margin_fraction},
                       {"min_crop_size", config.crop.min_crop_size}};
      break;
    case Stage::train_cls_cropped:
      scope["cls"] = config.cls_cropped.to_json();
      break;
    case Stage::evaluate:
    case Stage::report:
      break;
  }
  return scope;
}

// Inputs hashed into stage.json; keys ending in '/' are directory digests.
std::vector<std::string> stage_inputs(const ExperimentConfig& config, Stage stage) {
  switch (stage) {
    case Stage::ingest:
      return config.corpus.type == "real" ? std::vector<std::string>{"@" + config.corpus.labels_file}
                                          : std::vector<std::string>{};
    case Stage::split: return {"ingest/manifest.csv"};
    case Stage::train_cls: return {"split/manifest.csv"};
    case Stage::transfer: return {"train_cls/cls_baseline.ckpt"};
    case Stage::train_seg: return {"transfer/seg_init.ckpt", "split/manifest.csv"};
    case Stage::predict_masks: return {"train_seg/seg.ckpt", "split/manifest.csv"};
    case Stage::crop: return {"predict_masks/detections.json", "predict_masks/masks/", "split/manifest.csv"};
    case Stage::train_cls_cropped: return {"crop/manifest.csv", "crop/corpus/crops.json"};
    case Stage::evaluate:
      return {"train_cls/cls_baseline.ckpt", "train_cls_cropped/cls_cropped.ckpt",
              "predict_masks/masks/", "split/manifest.csv", "crop/manifest.csv"};
    case Stage::report:
      return {"evaluate/cls_baseline/report.json", "evaluate/cls_cropped/report.json",
              "?evaluate/seg/report.json"};
  }
  return {};
}

// '@' marks an absolute external path, a trailing '/' a directory digest and
// '?' an optional artifact (hashed as "absent" when missing).
std::string hash_input(const fs::path& root, const std::string& key) {
  if (!key.empty() && key.front() == '@') return hash_of_file(key.substr(1));
  if (!key.empty() && key.front() == '?') {
    return fs::exists(root / key.substr(1)) ? hash_of_file(root / key.substr(1))
                                            : std::string("absent");
  }
  if (!key.empty() && key.back() == '/') return hash_of_dir(root / key);
  return hash_of_file(root / key);
}

json collect_input_hashes(const ExperimentConfig& config, Stage stage) {
  json out = json::object();
  for (const auto& key : stage_inputs(config, stage)) {
    out[key] = hash_input(config.output_root, key);
  }
  return out;
}

fs::path stage_dir(const ExperimentConfig& config, Stage stage) {
  return fs::path(config.output_root) / stage_name(stage);
}

fs::path stage_marker(const ExperimentConfig& config, Stage stage) {
  return stage_dir(config, stage) / "stage.json";
}

// Exclusive ownership of an output root within this process tree.
class RunLock {
 public:
  explicit RunLock(const fs::path& root) : path_(root / ".lock") {
    std::error_code ec;
    fs::create_directories(root, ec);
    if (locked_roots().count(path_.string())) {
      owner_ = false;  // re-entrant within the process
      return;
    }
    if (fs::exists(path_)) {
      raise(Err::IoFailure, "output root is locked by another run: " + path_.string());
    }
    std::ofstream out(path_);
    out << "locked\n";
    locked_roots().insert(path_.string());
    owner_ = true;
  }

  ~RunLock() {
    if (owner_) {
      std::error_code ec;
      fs::remove(path_, ec);
      locked_roots().erase(path_.string());
    }
  }

 private:
  static std::set<std::string>& locked_roots() {
    static std::set<std::string> roots;
    return roots;
  }
  fs::path path_;
  bool owner_;
};

void append_run_entry(const ExperimentConfig& config, const json& entry) {
  const fs::path path = fs::path(config.output_root) / "run.json";
  json doc = json::array();
  if (fs::exists(path)) doc = read_json_file(path, Err::IoFailure);
  doc.push_back(entry);
  write_json_file(doc, path);
}

DatasetManifest load_stage_manifest(const ExperimentConfig& config, Stage stage) {
  const json marker = read_json_file(stage_marker(config, stage), Err::MissingUpstreamArtifact);
  return load_manifest(stage_dir(config, stage) / "manifest.csv",
                       marker.value("source_root", std::string{}));
}

ClassWeights resolve_weights(const ClsConfig& cls, const DatasetManifest& manifest) {
  if (cls.class_weights) return *cls.class_weights;
  std::map<int, int64_t> train_counts;
  for (const auto& record : manifest.records) {
    if (record.split == Split::train) train_counts[record.label] += 1;
  }
  if (cls.weighting == "uniform") return ClassWeights::uniform(train_counts);
  return compute_class_weights(train_counts);
}

ClsModel load_cls_model(const fs::path& ckpt_path) {
  const nn::Checkpoint ckpt = nn::load_checkpoint(ckpt_path);
  ClsModel model(ClsConfig::from_json(ckpt.meta.at("config")));
  model.restore(ckpt);
  return model;
}

SegModel load_seg_model(const fs::path& ckpt_path) {
  const nn::Checkpoint ckpt = nn::load_checkpoint(ckpt_path);
  SegConfig cfg = SegConfig::from_json(ckpt.meta.at("config"));
  // restoring weights replaces any init transfer; skip its file requirements
  cfg.backbone_init = BackboneInit::random;
  SegModel model(cfg);
  model.restore(ckpt);
  return model;
}

// ---------------------------------------------------------------------------
// stage bodies

void exec_ingest(const ExperimentConfig& config) {
  const fs::path dir = stage_dir(config, Stage::ingest);
  fs::create_directories(dir);
  DatasetManifest manifest;
  std::string source_root;
  if (config.corpus.type == "synth") {
    const fs::path corpus_dir = dir / "corpus";
    manifest = generate_synthetic_corpus(config.corpus.synth, corpus_dir);
    source_root = corpus_dir.string();
  } else {
    std::optional<fs::path> masks_dir;
    if (config.corpus.masks_dir) masks_dir = fs::path(*config.corpus.masks_dir);
    manifest = ingest_manifest(config.corpus.root, config.corpus.labels_file, masks_dir);
    source_root = config.corpus.root;
  }
  save_manifest(manifest, dir / "manifest.csv");
  json extra{{"source_root", source_root}, {"records", manifest.size()}};
  write_json_file(extra, dir / "ingest_info.json");
}

void exec_split(const ExperimentConfig& config) {
  const json ingest_marker = read_json_file(stage_marker(config, Stage::ingest),
                                            Err::MissingUpstreamArtifact);
  DatasetManifest manifest = load_manifest(stage_dir(config, Stage::ingest) / "manifest.csv",
                                           ingest_marker.value("source_root", std::string{}));
  const uint64_t split_seed = hash_combine(config.seed, 2);
  manifest = config.split.mode == "stratified"
                 ? stratified_split(manifest, config.split.val_fraction, split_seed)
                 : random_split(manifest, config.split.val_fraction, split_seed);
  const fs::path dir = stage_dir(config, Stage::split);
  fs::create_directories(dir);
  save_manifest(manifest, dir / "manifest.csv");
}

void exec_train_cls(const ExperimentConfig& config, Stage stage) {
  const bool cropped = stage == Stage::train_cls_cropped;
  DatasetManifest manifest = load_stage_manifest(config, cropped ? Stage::crop : Stage::split);
  ClsConfig cls = cropped ? config.cls_cropped : config.cls_baseline;
  cls.class_weights = resolve_weights(cls, manifest);

  ClsModel model = build_classifier(cls);
  const nn::Checkpoint ckpt = train_classifier(model, manifest, cls);

  const fs::path dir = stage_dir(config, stage);
  fs::create_directories(dir);
  save_checkpoint(ckpt, dir / (cropped ? "cls_cropped.ckpt" : "cls_baseline.ckpt"));
  write_json_file(ckpt.meta.at("log"), dir / "log.json");
}

void exec_transfer(const ExperimentConfig& config) {
  const fs::path dir = stage_dir(config, Stage::transfer);
  fs::create_directories(dir);

  SegConfig seg = config.seg;
  json report{{"mode", backbone_init_name(seg.backbone_init)}};
  if (seg.backbone_init == BackboneInit::classifier_transfer && !seg.classifier_checkpoint) {
    seg.classifier_checkpoint =
        (stage_dir(config, Stage::train_cls) / "cls_baseline.ckpt").string();
  }
  if (seg.backbone_init == BackboneInit::classifier_transfer) {
    SegModel model(seg);  // raw model; transfer applied explicitly for the report
    const TransferReport transfer = transfer_backbone_weights(*seg.classifier_checkpoint, model);
    report["transfer"] = transfer.to_json();
    save_checkpoint(model.snapshot(json::array()), dir / "seg_init.ckpt");
  } else {
    SegModel model = build_seg_model(seg);
    save_checkpoint(model.snapshot(json::array()), dir / "seg_init.ckpt");
  }
  write_json_file(report, dir / "report.json");
}

void exec_train_seg(const ExperimentConfig& config) {
  DatasetManifest split_manifest = load_stage_manifest(config, Stage::split);

  // Per protocol, the segmenter draws its own small validation subset from
  // the training records; the shared val split stays held out end to end.
  DatasetManifest seg_manifest;
  seg_manifest.source_root = split_manifest.source_root;
  for (const auto& record : split_manifest.records) {
    if (record.split == Split::train) seg_manifest.records.push_back(record);
  }
  seg_manifest.recount();
  const int64_t val_count =
      std::clamp<int64_t>(config.seg.val_images, 1, std::max<int64_t>(1, seg_manifest.size() - 1));
  seg_manifest = fixed_count_val_split(seg_manifest, val_count, hash_combine(config.seed, 6));

  SegConfig seg = config.seg;
  seg.backbone_init = BackboneInit::random;  // weights come from the transfer artifact
  SegModel model(seg);
  const nn::Checkpoint init = nn::load_checkpoint(stage_dir(config, Stage::transfer) / "seg_init.ckpt");
  model.restore(init);

  const nn::Checkpoint ckpt = train_segmentation(model, seg_manifest, config.seg);
  const fs::path dir = stage_dir(config, Stage::train_seg);
  fs::create_directories(dir);
  save_checkpoint(ckpt, dir / "seg.ckpt");
  write_json_file(ckpt.meta.at("log"), dir / "log.json");
  save_manifest(seg_manifest, dir / "seg_manifest.csv");
}

void exec_predict_masks(const ExperimentConfig& config) {
  DatasetManifest manifest = load_stage_manifest(config, Stage::split);
  SegModel model = load_seg_model(stage_dir(config, Stage::train_seg) / "seg.ckpt");

  const fs::path dir = stage_dir(config, Stage::predict_masks);
  fs::create_directories(dir / "masks");
  json detections_json = json::object();
  const fs::path root(manifest.source_root);
  for (const auto& record : manifest.records) {
    const Image image = read_image(root / record.image_path);
    const auto detections = infer_detections(model, image);
    const Mask mask = select_primary_mask(detections, image.height, image.width,
                                          config.seg.confidence_threshold);
    write_mask(dir / "masks" / (record.sample_id + "_segmentation.png"), mask);
    json list = json::array();
    for (const auto& det : detections) {
      list.push_back({{"box", {det.box.row_min, det.box.col_min, det.box.row_max, det.box.col_max}},
                      {"score", det.score}});
    }
    detections_json[record.sample_id] = list;
  }
  write_json_file(detections_json, dir / "detections.json");
}

void exec_crop(const ExperimentConfig& config) {
  DatasetManifest manifest = load_stage_manifest(config, Stage::split);
  const fs::path dir = stage_dir(config, Stage::crop);
  fs::create_directories(dir);
  const DatasetManifest cropped =
      crop_corpus(manifest, stage_dir(config, Stage::predict_masks) / "masks", config.crop,
                  dir / "corpus");
  save_manifest(cropped, dir / "manifest.csv");
}

MetricsReport base_report(const ExperimentConfig& config, const std::string& model_id) {
  MetricsReport report;
  report.model_id = model_id;
  report.corpus_id = config.corpus.type == "synth" ? "synth" : config.corpus.root;
  report.timestamp = now_iso8601();
  return report;
}

void write_predictions_csv(const ClsEvalResult& eval, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), Err::IoFailure, "cannot write " + path.string());
  out << "sample_id";
  for (const auto& entry : class_table()) out << ",p_" << entry.code;
  out << ",pred_code\n";
  for (size_t i = 0; i < eval.sample_ids.size(); ++i) {
    out << eval.sample_ids[i];
    for (int c = 0; c < kNumClasses; ++c) out << ',' << eval.probs[i][static_cast<size_t>(c)];
    out << ',' << code_from_label(eval.preds[i]) << '\n';
  }
}

void exec_evaluate(const ExperimentConfig& config) {
  DatasetManifest split_manifest = load_stage_manifest(config, Stage::split);
  DatasetManifest crop_manifest = load_stage_manifest(config, Stage::crop);
  const fs::path dir = stage_dir(config, Stage::evaluate);

  // segmentation metrics on the held-out val split (needs ground-truth masks)
  bool have_gt_masks = true;
  for (const auto& record : split_manifest.records) {
    if (record.split == Split::val && !record.mask_path) have_gt_masks = false;
  }
  if (have_gt_masks) {
    MetricsReport report = base_report(config, "seg");
    SegmentationReport seg;
    const fs::path root(split_manifest.source_root);
    const fs::path masks = stage_dir(config, Stage::predict_masks) / "masks";
    std::vector<double> scores;
    for (const auto& record : split_manifest.records) {
      if (record.split != Split::val) continue;
      const Mask predicted = read_mask(masks / (record.sample_id + "_segmentation.png"));
      const Mask truth = read_mask(root / *record.mask_path);
      seg.sample_ids.push_back(record.sample_id);
      scores.push_back(jaccard(predicted, truth));
    }
    const JaccardSummary summary = summarize_jaccard(scores);
    seg.per_image_jaccard = summary.per_pair;
    seg.mean_jaccard = summary.mean;
    seg.thresholded_jaccard_0_65 = summary.thresholded_0_65;
    report.segmentation = std::move(seg);
    fs::create_directories(dir / "seg");
    save_report_json(report, dir / "seg" / "report.json");
  }

  const auto eval_cls = [&](const fs::path& ckpt, const DatasetManifest& manifest,
                            const std::string& name) {
    ClsModel model = load_cls_model(ckpt);
    const ClsEvalResult eval = evaluate_classifier(model, manifest, Split::val);
    MetricsReport report = base_report(config, name);
    ClassificationReport cls;
    cls.sample_ids = eval.sample_ids;
    cls.confusion = confusion_matrix(eval.truths, eval.preds);
    cls.per_class_recall = per_class_recall(cls.confusion);
    cls.normalized_accuracy = normalized_multiclass_accuracy(cls.confusion);
    report.classification = std::move(cls);
    fs::create_directories(dir / name);
    save_report_json(report, dir / name / "report.json");
    write_predictions_csv(eval, dir / name / "predictions.csv");
  };
  eval_cls(stage_dir(config, Stage::train_cls) / "cls_baseline.ckpt", split_manifest, "cls_baseline");
  eval_cls(stage_dir(config, Stage::train_cls_cropped) / "cls_cropped.ckpt", crop_manifest,
           "cls_cropped");
}

void exec_report(const ExperimentConfig& config) {
  const fs::path eval_dir = stage_dir(config, Stage::evaluate);
  const fs::path dir = stage_dir(config, Stage::report);
  fs::create_directories(dir);

  for (const char* name : {"seg", "cls_baseline", "cls_cropped"}) {
    const fs::path report_json = eval_dir / name / "report.json";
    if (!fs::exists(report_json)) continue;
    render_report(load_report(report_json), dir / name);
  }

  const MetricsReport baseline = load_report(eval_dir / "cls_baseline" / "report.json");
  const MetricsReport cropped = load_report(eval_dir / "cls_cropped" / "report.json");
  write_json_file(compare_reports(baseline, cropped), dir / "compare_baseline_vs_cropped.json");
}

void exec_stage(const ExperimentConfig& config, Stage stage) {
  switch (stage) {
    case Stage::ingest: exec_ingest(config); return;
    case Stage::split: exec_split(config); return;
    case Stage::train_cls: exec_train_cls(config, Stage::train_cls); return;
    case Stage::transfer: exec_transfer(config); return;
    case Stage::train_seg: exec_train_seg(config); return;
    case Stage::predict_masks: exec_predict_masks(config); return;
    case Stage::crop: exec_crop(config); return;
    case Stage::train_cls_cropped: exec_train_cls(config, Stage::train_cls_cropped); return;
    case Stage::evaluate: exec_evaluate(config); return;
    case Stage::report: exec_report(config); return;
  }
}

StageResult run_stage_locked(const ExperimentConfig& config, Stage stage) {
  // Upstream artifacts must exist and must have been produced under the
  // currently configured settings.
  for (Stage dep : stage_deps(stage)) {
    const fs::path marker = stage_marker(config, dep);
    if (!fs::exists(marker)) {
      raise(Err::MissingUpstreamArtifact, std::string("stage '") + stage_name(stage) +
                                              "' needs completed stage '" + stage_name(dep) + "'");
    }
    const json recorded = read_json_file(marker, Err::MissingUpstreamArtifact);
    const std::string expected = hash_of_json(stage_scope(config, dep));
    if (recorded.value("config_hash", std::string{}) != expected) {
      raise(Err::ConfigHashMismatch, std::string("artifact of stage '") + stage_name(dep) +
                                         "' was produced under a different config");
    }
  }

  const std::string config_hash = hash_of_json(stage_scope(config, stage));
  const json inputs = collect_input_hashes(config, stage);

  const fs::path marker = stage_marker(config, stage);
  if (fs::exists(marker)) {
    const json recorded = read_json_file(marker, Err::IoFailure);
    if (recorded.value("config_hash", std::string{}) == config_hash &&
        recorded.value("inputs", json::object()) == inputs) {
      append_run_entry(config, {{"stage", stage_name(stage)},
                                {"status", "cached"},
                                {"config_hash", config_hash},
                                {"device", config.device},
                                {"duration_s", 0.0}});
      return {stage, "cached", 0.0};
    }
  }

  const auto start = std::chrono::steady_clock::now();
  fs::create_directories(stage_dir(config, stage));
  exec_stage(config, stage);
  const double duration =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  write_json_file({{"stage", stage_name(stage)},
                   {"config_hash", config_hash},
                   {"inputs", inputs},
                   {"source_root", stage == Stage::ingest
                                       ? read_json_file(stage_dir(config, stage) / "ingest_info.json",
                                                        Err::IoFailure)
                                             .value("source_root", std::string{})
                                   : stage == Stage::split
                                       ? read_json_file(stage_marker(config, Stage::ingest),
                                                        Err::IoFailure)
                                             .value("source_root", std::string{})
                                   : stage == Stage::crop
                                       ? (stage_dir(config, Stage::crop) / "corpus").string()
                                       : std::string{}},
                   {"completed", true}},
                  marker);
  append_run_entry(config, {{"stage", stage_name(stage)},
                            {"status", "done"},
                            {"config_hash", config_hash},
                            {"device", config.device},
                            {"duration_s", duration}});
  return {stage, "done", duration};
}

}  // namespace

StageResult run_stage(const ExperimentConfig& config, Stage stage) {
  config.validate();
  RunLock lock(config.output_root);
  return run_stage_locked(config, stage);
}

std::vector<StageResult> run_all(const ExperimentConfig& config) {
  config.validate();
  RunLock lock(config.output_root);
  std::vector<StageResult> results;
  for (int i = 0; i < kStageCount; ++i) {
    results.push_back(run_stage_locked(config, static_cast<Stage>(i)));
  }
  return results;
}

// ---------------------------------------------------------------------------
// run comparison

namespace {

json metric_delta(double a, double b) {
  return {{"run_a", a}, {"run_b", b}, {"delta", b - a}};
}

void require_same_samples(const std::vector<std::string>& a, const std::vector<std::string>& b,
                          const std::string& what) {
  std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa != sb) {
    raise(Err::SampleSetMismatch, what + " reports cover different sample sets (" +
                                      std::to_string(sa.size()) + " vs " +
                                      std::to_string(sb.size()) + " ids)");
  }
}

}  // namespace

json compare_reports(const MetricsReport& a, const MetricsReport& b) {
  json out{{"model_a", a.model_id}, {"model_b", b.model_id}};
  if (a.segmentation && b.segmentation) {
    require_same_samples(a.segmentation->sample_ids, b.segmentation->sample_ids, "segmentation");
    out["segmentation"] = {
        {"mean_jaccard", metric_delta(a.segmentation->mean_jaccard, b.segmentation->mean_jaccard)},
        {"thresholded_jaccard_0_65", metric_delta(a.segmentation->thresholded_jaccard_0_65,
                                                  b.segmentation->thresholded_jaccard_0_65)}};
  }
  if (a.classification && b.classification) {
    require_same_samples(a.classification->sample_ids, b.classification->sample_ids,
                         "classification");
    json recalls = json::array();
    for (int c = 0; c < kNumClasses; ++c) {
      const auto& ra = a.classification->per_class_recall[static_cast<size_t>(c)];
      const auto& rb = b.classification->per_class_recall[static_cast<size_t>(c)];
      json entry{{"code", std::string(code_from_label(c))}};
      if (ra && rb) {
        entry["run_a"] = *ra;
        entry["run_b"] = *rb;
        entry["delta"] = *rb - *ra;
      } else {
        entry["delta"] = nullptr;
      }
      recalls.push_back(entry);
    }
    out["classification"] = {
        {"normalized_accuracy", metric_delta(a.classification->normalized_accuracy,
                                             b.classification->normalized_accuracy)},
        {"per_class_recall", recalls}};
  }
  return out;
}

json compare_runs(const fs::path& run_a, const fs::path& run_b) {
  json out = json::object();
  int shared = 0;
  for (const char* name : {"seg", "cls_baseline", "cls_cropped"}) {
    const fs::path path_a = run_a / "evaluate" / name / "report.json";
    const fs::path path_b = run_b / "evaluate" / name / "report.json";
    if (!fs::exists(path_a) || !fs::exists(path_b)) continue;
    ++shared;
    out[name] = compare_reports(load_report(path_a), load_report(path_b));
  }
  if (shared == 0) {
    raise(Err::MissingUpstreamArtifact,
          "runs share no evaluate-stage reports under " + run_a.string() + " and " + run_b.string());
  }
  out["run_a"] = run_a.string();
  out["run_b"] = run_b.string();
  return out;
}

}  // namespace lesionlab

// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Runs everything on CPU from fixed seeds.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <omp.h>

#include "lesionlab/cls.hpp"
#include "lesionlab/crop.hpp"
#include "lesionlab/image_io.hpp"
#include "lesionlab/metrics.hpp"
#include "lesionlab/pipeline.hpp"
#include "lesionlab/seg.hpp"
#include "lesionlab/synth.hpp"

using namespace lesionlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Check {
  bool ok = true;
  std::string detail;

  void expect(bool condition, const std::string& message) {
    if (!condition) {
      ok = false;
      if (!detail.empty()) detail += "; ";
      detail += message;
    }
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

fs::path work_dir() {
  const fs::path dir = fs::temp_directory_path() / "lesionlab_acceptance";
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json json_schema_of(const json& j) {
  if (j.is_object()) {
    json out = json::object();
    for (const auto& [key, value] : j.items()) out[key] = json_schema_of(value);
    return out;
  }
  if (j.is_array()) return "array";
  if (j.is_number()) return "number";
  return j.type_name();
}

// --------------------------------------------------------------------------
// criterion 1: metric oracles

double jaccard_set_oracle(const Mask& a, const Mask& b) {
  std::set<size_t> sa, sb;
  for (size_t i = 0; i < a.data.size(); ++i)
    if (a.data[i]) sa.insert(i);
  for (size_t i = 0; i < b.data.size(); ++i)
    if (b.data[i]) sb.insert(i);
  std::set<size_t> inter, uni;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(),
                        std::inserter(inter, inter.begin()));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::inserter(uni, uni.begin()));
  return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

Check metric_oracles() {
  Check check;
  Rng rng(2024);

  int jaccard_mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Mask a(16, 16), b(16, 16);
    const double da = rng.uniform(), db = rng.uniform();
    for (auto& v : a.data) v = rng.uniform() < da ? 1 : 0;
    for (auto& v : b.data) v = rng.uniform() < db ? 1 : 0;
    if (jaccard(a, b) != jaccard_set_oracle(a, b)) ++jaccard_mismatches;
  }
  check.expect(jaccard_mismatches == 0,
               "jaccard disagreed with the set oracle on " + std::to_string(jaccard_mismatches) +
                   "/1000 pairs");

  for (int trial = 0; trial < 20; ++trial) {
    ConfusionMatrix cm;
    for (int t = 0; t < kNumClasses; ++t)
      for (int p = 0; p < kNumClasses; ++p)
        cm.counts[static_cast<size_t>(t)][static_cast<size_t>(p)] = rng.uniform_int(0, 9);
    // hand computation: mean of per-row diagonal fractions over populated rows
    double sum = 0.0;
    int rows = 0;
    for (int t = 0; t < kNumClasses; ++t) {
      int64_t row = 0;
      for (int p = 0; p < kNumClasses; ++p)
        row += cm.counts[static_cast<size_t>(t)][static_cast<size_t>(p)];
      if (row > 0) {
        sum += static_cast<double>(cm.counts[static_cast<size_t>(t)][static_cast<size_t>(t)]) /
               static_cast<double>(row);
        ++rows;
      }
    }
    if (rows == 0) continue;
    const double expected = sum / rows;
    if (std::fabs(normalized_multiclass_accuracy(cm) - expected) > 1e-12) {
      check.expect(false, "normalized accuracy mismatch on matrix " + std::to_string(trial));
    }
  }

  for (int trial = 0; trial < 1000; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(0, 40));
    std::vector<int> truths, preds;
    int correct = 0;
    for (int i = 0; i < n; ++i) {
      truths.push_back(static_cast<int>(rng.uniform_int(0, 6)));
      preds.push_back(static_cast<int>(rng.uniform_int(0, 6)));
      correct += truths.back() == preds.back();
    }
    const auto cm = confusion_matrix(truths, preds);
    if (cm.total() != n || cm.trace() != correct) {
      check.expect(false, "trace/total invariant failed at trial " + std::to_string(trial));
      break;
    }
  }
  return check;
}

// --------------------------------------------------------------------------
// criterion 2: class-weight law

Check class_weight_law() {
  Check check;
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    std::map<int, int64_t> counts;
    const int k = static_cast<int>(rng.uniform_int(2, 7));
    for (int c = 0; c < k; ++c) counts[c] = rng.uniform_int(1, 1000000);
    const auto weights = compute_class_weights(counts);

    int64_t total = 0;
    double weighted = 0.0;
    for (const auto& [label, count] : counts) {
      total += count;
      weighted += static_cast<double>(count) * weights.at(label);
    }
    if (std::fabs(weighted - static_cast<double>(total)) > 1e-9 * static_cast<double>(total)) {
      check.expect(false, "weighted mean law violated at trial " + std::to_string(trial));
      break;
    }
    for (const auto& [la, na] : counts) {
      for (const auto& [lb, nb] : counts) {
        if (na > nb && !(weights.at(la) < weights.at(lb))) {
          check.expect(false, "anti-monotonicity violated at trial " + std::to_string(trial));
        }
      }
    }
    if (!check.ok) break;
  }
  return check;
}

// --------------------------------------------------------------------------
// criterion 3: loss gradient vs finite differences

Check loss_gradient() {
  Check check;
  Rng rng(55);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::array<double, kNumClasses> scores;
    for (auto& s : scores) s = rng.normal(0.0, 2.0);
    const int label = static_cast<int>(rng.uniform_int(0, kNumClasses - 1));
    const double weight = rng.uniform(0.2, 5.0);
    const auto analytic = weighted_ce_from_scores(scores, label, weight);
    const double h = 1e-5;
    for (int i = 0; i < kNumClasses; ++i) {
      auto sp = scores, sm = scores;
      sp[static_cast<size_t>(i)] += h;
      sm[static_cast<size_t>(i)] -= h;
      const double numeric = (weighted_ce_from_scores(sp, label, weight).loss -
                              weighted_ce_from_scores(sm, label, weight).loss) /
                             (2 * h);
      worst = std::max(worst, std::fabs(numeric - analytic.grad[static_cast<size_t>(i)]));
    }
  }
  check.expect(worst < 1e-5, "max gradient error " + fmt(worst) + " exceeds 1e-5");
  check.detail = "max |analytic - central difference| = " + fmt(worst);
  return check;
}

// --------------------------------------------------------------------------
// criterion 4: backbone-transfer exactness

Check transfer_exactness() {
  Check check;
  const fs::path dir = work_dir() / "transfer";
  fs::remove_all(dir);
  fs::create_directories(dir);

  ClsConfig cls_config;
  cls_config.seed = 101;
  ClsModel classifier = build_classifier(cls_config);
  save_checkpoint(classifier.snapshot(json::array()), dir / "cls.ckpt");

  SegConfig seg_config;
  seg_config.seed = 202;  // different init
  SegModel model(seg_config);
  const TransferReport report = transfer_backbone_weights(dir / "cls.ckpt", model);
  check.expect(report.copied_fraction >= 0.9,
               "only " + fmt(report.copied_fraction * 100) + "% of backbone parameters copied");

  Rng rng(303);
  float worst = 0.0f;
  for (int trial = 0; trial < 10; ++trial) {
    nn::Tensor x({1, 3, 64, 64});
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    const nn::Tensor fa = classifier.backbone().forward(x, false, false);
    const nn::Tensor fb = model.backbone().forward(x, false, false);
    for (size_t i = 0; i < fa.data.size(); ++i) {
      worst = std::max(worst, std::fabs(fa.data[i] - fb.data[i]));
    }
  }
  check.expect(worst <= 1e-5f, "backbone forward passes differ by " + fmt(worst));
  check.detail = "copied " + fmt(report.copied_fraction * 100) +
                 "% of parameters, max forward diff " + fmt(worst);
  return check;
}

// --------------------------------------------------------------------------
// criteria 5 & 7: end-to-end desk run and determinism

ExperimentConfig desk_config(const fs::path& output_root, uint64_t seed) {
  json j;
  json counts;
  for (const auto& entry : class_table()) counts[std::string(entry.code)] = 50;
  j["corpus"] = {{"type", "synth"},
                 {"synth", {{"height", 64}, {"width", 64}, {"difficulty", "separable"},
                            {"class_counts", counts}}}};
  j["split"] = {{"mode", "stratified"}, {"val_fraction", 0.2}};
  j["cls_baseline"] = {{"epochs", 10}, {"batch_size", 16}};
  j["cls_cropped"] = {{"epochs", 10}, {"batch_size", 16}};
  j["seg"] = {{"epochs", 5}, {"val_images", 20}, {"backbone_init", "classifier_transfer"}};
  j["crop"] = {{"margin_fraction", 0.1}, {"min_crop_size", 32}};
  j["output_root"] = output_root.string();
  j["seed"] = seed;
  return experiment_config_from_json(j);
}

Check end_to_end_desk_run() {
  Check check;
  const fs::path root = work_dir() / "e2e";
  fs::remove_all(root);

  const double t0 = omp_get_wtime();
  const auto results = run_all(desk_config(root, 42));
  const double minutes = (omp_get_wtime() - t0) / 60.0;
  check.expect(minutes <= 20.0, "run took " + fmt(minutes) + " min (> 20)");

  check.expect(results.size() == kStageCount, "expected 10 stage results");
  json run_log;
  std::ifstream(root / "run.json") >> run_log;
  std::map<std::string, int> stage_counts;
  for (const auto& entry : run_log) stage_counts[entry.at("stage").get<std::string>()] += 1;
  bool all_once = stage_counts.size() == kStageCount;
  for (const auto& [name, count] : stage_counts) all_once = all_once && count == 1;
  check.expect(all_once, "run.json does not list all 10 stages exactly once");

  const MetricsReport seg_report = load_report(root / "evaluate" / "seg" / "report.json");
  const double mean_jaccard = seg_report.segmentation->mean_jaccard;
  check.expect(mean_jaccard >= 0.70, "val mean jaccard " + fmt(mean_jaccard) + " < 0.70");

  const MetricsReport cls_report = load_report(root / "evaluate" / "cls_baseline" / "report.json");
  const double accuracy = cls_report.classification->normalized_accuracy;
  check.expect(accuracy >= 0.85, "baseline normalized accuracy " + fmt(accuracy) + " < 0.85");

  // paired baseline-vs-cropped comparison produced by the report stage
  const fs::path cmp_path = root / "report" / "compare_baseline_vs_cropped.json";
  check.expect(fs::exists(cmp_path), "comparison report missing");
  if (fs::exists(cmp_path)) {
    json cmp;
    std::ifstream(cmp_path) >> cmp;
    check.expect(cmp.contains("classification") &&
                     cmp.at("classification").contains("normalized_accuracy") &&
                     cmp.at("classification").at("normalized_accuracy").contains("delta"),
                 "comparison lacks a paired normalized-accuracy delta");
  }
  check.detail = "jaccard " + fmt(mean_jaccard) + ", normalized accuracy " + fmt(accuracy) +
                 ", " + fmt(minutes) + " min";
  return check;
}

Check determinism() {
  Check check;
  const fs::path root_a = work_dir() / "det_a";
  const fs::path root_b = work_dir() / "det_b";
  fs::remove_all(root_a);
  fs::remove_all(root_b);
  run_all(desk_config(root_a, 7));
  run_all(desk_config(root_b, 7));

  for (const char* rel : {"ingest/manifest.csv", "split/manifest.csv", "crop/manifest.csv",
                          "crop/corpus/crops.json"}) {
    if (slurp(root_a / rel) != slurp(root_b / rel)) {
      check.expect(false, std::string(rel) + " differs between identical runs");
    }
  }
  for (const char* name : {"seg", "cls_baseline", "cls_cropped"}) {
    json a, b;
    std::ifstream(root_a / "evaluate" / name / "report.json") >> a;
    std::ifstream(root_b / "evaluate" / name / "report.json") >> b;
    if (json_schema_of(a) != json_schema_of(b)) {
      check.expect(false, std::string(name) + " report schemas differ");
    }
  }
  check.detail = "manifests, splits and crop provenance byte-identical; report schemas equal";
  return check;
}

// --------------------------------------------------------------------------
// criterion 6: imbalance mitigation

Check imbalance_mitigation() {
  Check check;
  const int minority = label_from_code("DF");
  const int majority = label_from_code("NV");

  std::vector<double> weighted_recalls, unweighted_recalls;
  for (uint64_t seed : {11ULL, 22ULL, 33ULL}) {
    const fs::path dir = work_dir() / ("imbalance_" + std::to_string(seed));
    fs::remove_all(dir);
    SynthSpec spec;
    spec.class_counts = {{majority, 150}, {minority, 15}};  // 10:1
    spec.seed = seed;
    DatasetManifest manifest = generate_synthetic_corpus(spec, dir);
    manifest = stratified_split(manifest, 0.2, seed);

    const auto minority_recall = [&](bool weighted) {
      ClsConfig config;
      config.epochs = 10;
      config.seed = seed;
      config.weighting = weighted ? "auto" : "uniform";
      std::map<int, int64_t> train_counts;
      for (const auto& record : manifest.records) {
        if (record.split == Split::train) train_counts[record.label] += 1;
      }
      config.class_weights = weighted ? compute_class_weights(train_counts)
                                      : ClassWeights::uniform(train_counts);
      ClsModel model = build_classifier(config);
      train_classifier(model, manifest, config);
      const auto eval = evaluate_classifier(model, manifest, Split::val);
      const auto cm = confusion_matrix(eval.truths, eval.preds);
      const auto recalls = per_class_recall(cm);
      return recalls[static_cast<size_t>(minority)].value_or(0.0);
    };

    weighted_recalls.push_back(minority_recall(true));
    unweighted_recalls.push_back(minority_recall(false));
  }
  std::sort(weighted_recalls.begin(), weighted_recalls.end());
  std::sort(unweighted_recalls.begin(), unweighted_recalls.end());
  const double median_weighted = weighted_recalls[1];
  const double median_unweighted = unweighted_recalls[1];
  check.expect(median_weighted >= median_unweighted,
               "median minority recall with weights " + fmt(median_weighted) + " < without " +
                   fmt(median_unweighted));
  check.detail = "median minority recall: weighted " + fmt(median_weighted) + ", unweighted " +
                 fmt(median_unweighted);
  return check;
}

// --------------------------------------------------------------------------
// criterion 8: crop safety

Check crop_safety() {
  Check check;
  const fs::path dir = work_dir() / "crop_safety";
  fs::remove_all(dir);
  SynthSpec spec;
  for (int c = 0; c < kNumClasses; ++c) spec.class_counts[c] = 20;
  spec.seed = 515;
  DatasetManifest manifest = generate_synthetic_corpus(spec, dir / "corpus");
  manifest = stratified_split(manifest, 0.2, 515);

  CropPolicy policy;
  const DatasetManifest cropped =
      crop_corpus(manifest, dir / "corpus" / "masks", policy, dir / "cropped");

  double worst_retention = 1.0;
  for (const auto& record : manifest.records) {
    const Mask gt = read_mask(dir / "corpus" / *record.mask_path);
    const auto tight = mask_to_bbox(gt);
    const BBox applied = expand_bbox(*tight, policy.margin_fraction, gt.height, gt.width,
                                     policy.min_crop_size);
    int64_t inside = 0;
    for (int r = applied.row_min; r <= applied.row_max; ++r)
      for (int c = applied.col_min; c <= applied.col_max; ++c) inside += gt.at(r, c);
    worst_retention =
        std::min(worst_retention, static_cast<double>(inside) / static_cast<double>(gt.area()));
  }
  check.expect(worst_retention >= 0.99,
               "worst per-image foreground retention " + fmt(worst_retention) + " < 0.99");

  bool splits_identical = cropped.size() == manifest.size();
  for (int64_t i = 0; splits_identical && i < manifest.size(); ++i) {
    const auto& a = manifest.records[static_cast<size_t>(i)];
    const auto& b = cropped.records[static_cast<size_t>(i)];
    splits_identical = a.sample_id == b.sample_id && a.split == b.split;
  }
  check.expect(splits_identical, "split assignments changed through cropping");
  check.detail = "worst foreground retention " + fmt(worst_retention);
  return check;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Check()> run;
  };
  const Criterion criteria[] = {
      {"metric-oracles", metric_oracles},
      {"class-weight-law", class_weight_law},
      {"loss-gradient-check", loss_gradient},
      {"backbone-transfer-exactness", transfer_exactness},
      {"end-to-end-desk-run", end_to_end_desk_run},
      {"imbalance-mitigation", imbalance_mitigation},
      {"determinism", determinism},
      {"crop-safety", crop_safety},
  };

  fs::create_directories(work_dir());
  int failures = 0;
  for (const auto& criterion : criteria) {
    const double t0 = omp_get_wtime();
    Check check;
    try {
      check = criterion.run();
    } catch (const std::exception& e) {
      check.ok = false;
      check.detail = std::string("exception: ") + e.what();
    }
    const double elapsed = omp_get_wtime() - t0;
    std::printf("[%s] %-28s (%.1fs)%s%s\n", check.ok ? "PASS" : "FAIL", criterion.name, elapsed,
                check.detail.empty() ? "" : " ", check.detail.c_str());
    std::fflush(stdout);
    failures += !check.ok;
  }
  if (failures > 0) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all %zu criteria passed\n", std::size(criteria));
  return 0;
}

#include <doctest.h>

#include <cstdlib>
#include <fstream>

#include "lesionlab/pipeline.hpp"
#include "test_util.hpp"

using namespace lesionlab;
using testutil::TempDir;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Tiny but complete experiment: small corpus, single training epochs.
ExperimentConfig micro_config(const fs::path& output_root, uint64_t seed = 5) {
  json j;
  j["corpus"] = {{"type", "synth"},
                 {"synth", {{"height", 64},
                            {"width", 64},
                            {"difficulty", "separable"},
                            {"class_counts", {{"MEL", 8}, {"NV", 8}, {"DF", 8}}}}}};
  j["split"] = {{"mode", "stratified"}, {"val_fraction", 0.25}};
  j["cls_baseline"] = {{"epochs", 1}, {"batch_size", 8}};
  j["cls_cropped"] = {{"epochs", 1}, {"batch_size", 8}};
  j["seg"] = {{"epochs", 1}, {"val_images", 4}, {"backbone_init", "classifier_transfer"}};
  j["crop"] = {{"margin_fraction", 0.1}, {"min_crop_size", 16}};
  j["output_root"] = output_root.string();
  j["seed"] = seed;
  return experiment_config_from_json(j);
}

MetricsReport fabricated_cls_report(const std::vector<std::string>& ids, double accuracy_shift) {
  MetricsReport report;
  report.model_id = "cls_baseline";
  report.corpus_id = "synth";
  report.timestamp = "2024-01-01T00:00:00Z";
  ClassificationReport cls;
  cls.sample_ids = ids;
  std::vector<int> truths, preds;
  for (size_t i = 0; i < ids.size(); ++i) {
    truths.push_back(static_cast<int>(i % 2));
    preds.push_back(accuracy_shift > 0 ? truths.back() : 0);
  }
  cls.confusion = confusion_matrix(truths, preds);
  cls.per_class_recall = per_class_recall(cls.confusion);
  cls.normalized_accuracy = normalized_multiclass_accuracy(cls.confusion);
  report.classification = std::move(cls);
  return report;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config parsing, overrides and environment seed") {
  TempDir tmp("pipeline_config");
  json j = micro_config(tmp.path / "run").to_json();
  std::ofstream(tmp.path / "config.json") << j.dump(2);

  const auto base = load_experiment_config(tmp.path / "config.json");
  CHECK(base.seed == 5);
  CHECK(base.cls_baseline.epochs == 1);

  const auto overridden = load_experiment_config(
      tmp.path / "config.json", {"cls_baseline.epochs=4", "seg.confidence_threshold=0.5"});
  CHECK(overridden.cls_baseline.epochs == 4);
  CHECK(overridden.seg.confidence_threshold == doctest::Approx(0.5));

  setenv("LESIONLAB_SEED", "1234", 1);
  const auto env_seeded = load_experiment_config(tmp.path / "config.json");
  unsetenv("LESIONLAB_SEED");
  CHECK(env_seeded.seed == 1234);
  // nested seeds derive from the global seed
  CHECK(env_seeded.cls_baseline.seed != base.cls_baseline.seed);

  setenv("LESIONLAB_DEVICE", "cuda:1", 1);
  CHECK_THROWS_AS(load_experiment_config(tmp.path / "config.json"), Error);
  setenv("LESIONLAB_DEVICE", "0", 1);
  CHECK(load_experiment_config(tmp.path / "config.json").device == "cpu");
  unsetenv("LESIONLAB_DEVICE");
}

TEST_CASE("stage DAG blocks on missing upstream artifacts") {
  TempDir tmp("pipeline_dag");
  const auto config = micro_config(tmp.path / "run");
  try {
    run_stage(config, Stage::evaluate);
    FAIL("expected MissingUpstreamArtifact");
  } catch (const Error& e) {
    CHECK(e.code() == Err::MissingUpstreamArtifact);
  }
}

TEST_CASE("micro end-to-end run, caching and determinism of artifacts") {
  TempDir tmp("pipeline_micro");
  const auto config = micro_config(tmp.path / "run");

  const auto results = run_all(config);
  REQUIRE(results.size() == kStageCount);
  for (const auto& result : results) CHECK(result.status == "done");

  // run.json lists all 10 stages exactly once
  std::ifstream run_file(tmp.path / "run" / "run.json");
  json run_log;
  run_file >> run_log;
  REQUIRE(run_log.size() == kStageCount);
  for (int i = 0; i < kStageCount; ++i) {
    CHECK(run_log.at(i).at("stage") == stage_name(static_cast<Stage>(i)));
  }

  // key artifacts exist
  for (const char* rel : {"ingest/manifest.csv", "split/manifest.csv",
                          "train_cls/cls_baseline.ckpt", "transfer/seg_init.ckpt",
                          "transfer/report.json", "train_seg/seg.ckpt",
                          "predict_masks/detections.json", "crop/manifest.csv",
                          "crop/corpus/crops.json", "train_cls_cropped/cls_cropped.ckpt",
                          "evaluate/cls_baseline/report.json", "evaluate/cls_cropped/report.json",
                          "evaluate/seg/report.json", "report/compare_baseline_vs_cropped.json"}) {
    CHECK_MESSAGE(fs::exists(tmp.path / "run" / rel), rel);
  }

  SUBCASE("rerunning completed stages reports cached status") {
    const auto cached = run_all(config);
    for (const auto& result : cached) CHECK(result.status == "cached");
  }

  SUBCASE("a stage reruns when its recorded input hashes no longer match") {
    // touch the ingest manifest: split must rerun rather than report cached
    std::ofstream(tmp.path / "run" / "ingest" / "manifest.csv", std::ios::app) << "\n";
    const auto result = run_stage(config, Stage::split);
    CHECK(result.status == "done");
  }

  SUBCASE("changed upstream config raises ConfigHashMismatch downstream") {
    auto changed = config;
    changed.corpus.synth.class_counts[label_from_code("NV")] = 9;
    try {
      run_stage(changed, Stage::split);
      FAIL("expected ConfigHashMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Err::ConfigHashMismatch);
    }
  }

  SUBCASE("comparing a run against itself yields zero deltas") {
    const json cmp = compare_runs(tmp.path / "run", tmp.path / "run");
    for (const char* kind : {"seg", "cls_baseline", "cls_cropped"}) {
      REQUIRE(cmp.contains(kind));
    }
    CHECK(cmp.at("cls_baseline").at("classification").at("normalized_accuracy").at("delta") == 0.0);
    CHECK(cmp.at("seg").at("segmentation").at("mean_jaccard").at("delta") == 0.0);
  }

  SUBCASE("a second identical run reproduces manifests, crops and schemas") {
    const auto config_b = micro_config(tmp.path / "run_b");
    run_all(config_b);
    auto slurp = [](const fs::path& p) {
      std::ifstream in(p, std::ios::binary);
      return std::string{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    };
    for (const char* rel : {"ingest/manifest.csv", "split/manifest.csv", "crop/manifest.csv",
                            "crop/corpus/crops.json"}) {
      CHECK_MESSAGE(slurp(tmp.path / "run" / rel) == slurp(tmp.path / "run_b" / rel), rel);
    }
  }
}

TEST_CASE("real-corpus ingest and split stages") {
  TempDir tmp("pipeline_real");
  // materialize a corpus on disk, then point a "real" config at it
  SynthSpec spec;
  spec.class_counts = {{label_from_code("MEL"), 5}, {label_from_code("NV"), 5}};
  spec.seed = 3;
  generate_synthetic_corpus(spec, tmp.path / "corpus");

  json j = micro_config(tmp.path / "run").to_json();
  j["corpus"] = {{"type", "real"},
                 {"root", (tmp.path / "corpus").string()},
                 {"labels_file", (tmp.path / "corpus" / "labels.csv").string()},
                 {"masks_dir", (tmp.path / "corpus" / "masks").string()}};
  const auto config = experiment_config_from_json(j);

  CHECK(run_stage(config, Stage::ingest).status == "done");
  CHECK(run_stage(config, Stage::split).status == "done");
  const auto manifest = load_manifest(tmp.path / "run" / "split" / "manifest.csv");
  CHECK(manifest.size() == 10);
  int val_count = 0;
  for (const auto& record : manifest.records) {
    CHECK(record.mask_path.has_value());
    val_count += record.split == Split::val;
  }
  CHECK(val_count >= 2);
}

TEST_CASE("compare_reports flags mismatched sample sets") {
  const auto a = fabricated_cls_report({"s1", "s2", "s3"}, 1.0);
  const auto b = fabricated_cls_report({"s1", "s2", "s4"}, 1.0);
  try {
    compare_reports(a, b);
    FAIL("expected SampleSetMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::SampleSetMismatch);
  }
}

TEST_CASE("compare_reports emits paired deltas") {
  const auto a = fabricated_cls_report({"s1", "s2", "s3", "s4"}, -1.0);
  const auto b = fabricated_cls_report({"s1", "s2", "s3", "s4"}, 1.0);
  const json cmp = compare_reports(a, b);
  const auto& acc = cmp.at("classification").at("normalized_accuracy");
  CHECK(acc.at("run_b").get<double>() == doctest::Approx(1.0));
  CHECK(acc.at("delta").get<double>() ==
        doctest::Approx(acc.at("run_b").get<double>() - acc.at("run_a").get<double>()));
}

TEST_CASE("compare_runs requires shared evaluate reports") {
  TempDir tmp("pipeline_compare_empty");
  fs::create_directories(tmp.path / "a");
  fs::create_directories(tmp.path / "b");
  try {
    compare_runs(tmp.path / "a", tmp.path / "b");
    FAIL("expected MissingUpstreamArtifact");
  } catch (const Error& e) {
    CHECK(e.code() == Err::MissingUpstreamArtifact);
  }
}

TEST_CASE("output root lock is exclusive") {
  TempDir tmp("pipeline_lock");
  fs::create_directories(tmp.path / "run");
  std::ofstream(tmp.path / "run" / ".lock") << "held\n";
  const auto config = micro_config(tmp.path / "run");
  CHECK_THROWS_AS(run_stage(config, Stage::ingest), Error);
}

}  // TEST_SUITE

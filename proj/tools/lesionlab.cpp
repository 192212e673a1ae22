#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "lesionlab/pipeline.hpp"

namespace fs = std::filesystem;
using namespace lesionlab;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitMissingArtifact = 3;

struct StageArgs {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, StageArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config (JSON)")->required();
  cmd->add_option("--stage-override", args.overrides,
                  "config override as dotted.path=value (repeatable)");
}

void print_result(const StageResult& result) {
  std::printf("[%-17s] %-6s %.2fs\n", stage_name(result.stage), result.status.c_str(),
              result.duration_s);
}

std::string format_comparison_table(const nlohmann::json& cmp) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-34s %12s %12s %12s\n", "metric", "run_a", "run_b", "delta");
  out += line;
  for (const auto& [kind, body] : cmp.items()) {
    if (!body.is_object()) continue;
    for (const char* section : {"segmentation", "classification"}) {
      if (!body.contains(section)) continue;
      for (const auto& [metric, value] : body.at(section).items()) {
        if (!value.is_object() || !value.contains("delta")) continue;
        std::snprintf(line, sizeof(line), "%-34s %12.4f %12.4f %+12.4f\n",
                      (kind + "." + metric).c_str(), value.at("run_a").get<double>(),
                      value.at("run_b").get<double>(), value.at("delta").get<double>());
        out += line;
      }
    }
  }
  return out;
}

int run_one_stage(const StageArgs& args, Stage stage) {
  const auto config = load_experiment_config(args.config_path, args.overrides);
  print_result(run_stage(config, stage));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lesionlab: lesion segmentation + diagnosis experiment pipeline"};
  app.require_subcommand(1);

  StageArgs stage_args;
  struct Verb {
    const char* name;
    const char* help;
    Stage stage;
  };
  const Verb verbs[] = {
      {"ingest", "ingest (or synthesize) the corpus and write its manifest", Stage::ingest},
      {"split", "assign train/val splits", Stage::split},
      {"transfer", "initialize the segmenter backbone from the classifier", Stage::transfer},
      {"train-seg", "train the segmentation model", Stage::train_seg},
      {"predict", "predict lesion masks for every sample", Stage::predict_masks},
      {"crop", "derive the cropped classification corpus", Stage::crop},
      {"evaluate", "compute metric reports for all trained models", Stage::evaluate},
      {"report", "render reports and the baseline-vs-cropped comparison", Stage::report},
  };

  std::map<const CLI::App*, Stage> stage_of;
  for (const auto& verb : verbs) {
    CLI::App* cmd = app.add_subcommand(verb.name, verb.help);
    add_config_options(cmd, stage_args);
    stage_of[cmd] = verb.stage;
  }

  bool train_cropped = false;
  CLI::App* train_cls = app.add_subcommand("train-cls", "train a diagnosis classifier");
  add_config_options(train_cls, stage_args);
  train_cls->add_flag("--cropped", train_cropped,
                      "train on the cropped corpus (train_cls_cropped stage)");

  std::string synth_out;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic corpus standalone");
  add_config_options(synth, stage_args);
  synth->add_option("--out", synth_out, "corpus output directory")->required();

  CLI::App* run_all_cmd = app.add_subcommand("run-all", "execute every pipeline stage in order");
  add_config_options(run_all_cmd, stage_args);

  std::string run_a, run_b, compare_out;
  CLI::App* compare = app.add_subcommand("compare", "paired comparison of two runs");
  compare->add_option("run_a", run_a, "first run output root")->required();
  compare->add_option("run_b", run_b, "second run output root")->required();
  compare->add_option("--out", compare_out, "write the comparison JSON here");

  CLI11_PARSE(app, argc, argv);

  try {
    for (const auto& [cmd, stage] : stage_of) {
      if (cmd->parsed()) return run_one_stage(stage_args, stage);
    }
    if (train_cls->parsed()) {
      return run_one_stage(stage_args,
                           train_cropped ? Stage::train_cls_cropped : Stage::train_cls);
    }
    if (synth->parsed()) {
      const auto config = load_experiment_config(stage_args.config_path, stage_args.overrides);
      const auto manifest = generate_synthetic_corpus(config.corpus.synth, synth_out);
      save_manifest(manifest, fs::path(synth_out) / "manifest.csv");
      std::printf("generated %lld samples under %s\n",
                  static_cast<long long>(manifest.size()), synth_out.c_str());
      return 0;
    }
    if (run_all_cmd->parsed()) {
      const auto config = load_experiment_config(stage_args.config_path, stage_args.overrides);
      for (const auto& result : run_all(config)) print_result(result);
      return 0;
    }
    if (compare->parsed()) {
      const auto cmp = compare_runs(run_a, run_b);
      std::cout << format_comparison_table(cmp);
      if (!compare_out.empty()) {
        std::ofstream out(compare_out, std::ios::binary);
        out << cmp.dump(2) << '\n';
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (e.code() == Err::MissingUpstreamArtifact || e.code() == Err::MissingPredictedMask) {
      return kExitMissingArtifact;
    }
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

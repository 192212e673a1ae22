#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>

#include <json.hpp>

#include "lesionlab/image.hpp"
#include "lesionlab/manifest.hpp"
#include "lesionlab/nn/backbone.hpp"
#include "lesionlab/nn/checkpoint.hpp"
#include "lesionlab/nn/optim.hpp"

namespace lesionlab {

struct ClsConfig {
  std::string backbone_id = "tiny8";
  int epochs = 10;
  int input_h = 64;
  int input_w = 64;
  std::optional<ClassWeights> class_weights;  // nullopt = uniform
  std::string weighting = "auto";  // "auto" = inverse-frequency from train split, or "uniform"
  uint64_t seed = 0;
  int batch_size = 16;
  bool augment_flips = true;
  bool oversample = false;  // alternative to loss weighting, off by default
  nn::OptimConfig optim{0.08, 0.9, 1e-4, 6, 0.3};

  nlohmann::json to_json() const;
  static ClsConfig from_json(const nlohmann::json& j);
};

struct Prediction {
  std::array<double, kNumClasses> probs;
  int label;  // argmax, ties resolved to the lowest id
};

// argmax with ties broken by the lowest class id
int argmax_label(const std::array<double, kNumClasses>& probs);

struct EpochLogEntry {
  int epoch;
  double train_loss;
  double val_loss;
  double val_metric;  // normalized accuracy (cls) or mean jaccard (seg)
};

// backbone -> global average pooling -> fully connected (7) -> softmax.
class ClsModel {
 public:
  explicit ClsModel(const ClsConfig& config);

  nn::Tensor forward_scores(const nn::Tensor& images, bool train, bool cache);
  void backward(const nn::Tensor& dscores);

  nn::ParamList params();
  nn::Backbone& backbone() { return *backbone_; }
  const ClsConfig& config() const { return config_; }

  nn::Checkpoint snapshot(const nlohmann::json& log) const;
  void restore(const nn::Checkpoint& checkpoint);

 private:
  ClsConfig config_;
  std::unique_ptr<nn::Backbone> backbone_;
  nn::GlobalAvgPool gap_;
  nn::Linear fc_;
  mutable nn::ParamList param_cache_;
};

ClsModel build_classifier(const ClsConfig& config);

// w_true * (-log p_true), probabilities clamped at 1e-7 before the log.
double weighted_cross_entropy(const std::array<double, kNumClasses>& probs, int true_label,
                              const ClassWeights& weights);

// Loss and gradient with respect to pre-softmax scores (double precision;
// used by the finite-difference checks and mirrored by the training path).
struct ScoreLoss {
  double loss;
  std::array<double, kNumClasses> grad;
};
ScoreLoss weighted_ce_from_scores(const std::array<double, kNumClasses>& scores, int true_label,
                                  double weight);

struct TrainSummary {
  std::vector<EpochLogEntry> log;
  int best_epoch = 0;
  double best_metric = 0.0;
};

// Trains on manifest's train split, validates per epoch on the val split and
// returns the best-epoch checkpoint (by validation normalized accuracy).
// The model is left holding the best-epoch weights.
nn::Checkpoint train_classifier(ClsModel& model, const DatasetManifest& manifest,
                                const ClsConfig& config);

Prediction predict(ClsModel& model, const Image& image);

struct ClsEvalResult {
  std::vector<std::string> sample_ids;
  std::vector<int> truths;
  std::vector<int> preds;
  std::vector<std::array<double, kNumClasses>> probs;
};
ClsEvalResult evaluate_classifier(ClsModel& model, const DatasetManifest& manifest, Split split);

// Image -> normalized [1,3,H,W] network input (resized when needed).
nn::Tensor image_to_input(const Image& image, int input_h, int input_w);

}  // namespace lesionlab

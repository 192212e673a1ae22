#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include <json.hpp>

#include "lesionlab/cls.hpp"
#include "lesionlab/image.hpp"
#include "lesionlab/manifest.hpp"
#include "lesionlab/nn/backbone.hpp"
#include "lesionlab/nn/checkpoint.hpp"
#include "lesionlab/nn/optim.hpp"

namespace lesionlab {

enum class BackboneInit { random, generic_pretrained, classifier_transfer };

const char* backbone_init_name(BackboneInit init);
BackboneInit backbone_init_from_name(const std::string& name);

struct SegConfig {
  int roi_candidates_per_image = 200;
  double confidence_threshold = 0.9;
  int epochs = 5;
  int input_h = 64;
  int input_w = 64;
  std::string backbone_id = "tiny8";
  BackboneInit backbone_init = BackboneInit::random;
  std::optional<std::string> classifier_checkpoint;  // required for classifier_transfer
  std::optional<std::string> pretrained_checkpoint;  // required for generic_pretrained
  uint64_t seed = 0;
  int batch_size = 4;      // images per optimizer step
  int val_images = 20;     // validation subset drawn from the training records
  bool augment_flips = true;
  nn::OptimConfig optim{0.02, 0.9, 1e-4, 3, 0.3};

  nlohmann::json to_json() const;
  static SegConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct Detection {
  BBox box;
  double score = 0.0;  // lesion probability in [0,1]
  Mask mask;           // full-frame; foreground confined to box
};

// Two-stage region-proposal segmenter: anchors scored by a small proposal
// head, top candidates classified lesion/background with box refinement and
// an in-box mask head.
class SegModel {
 public:
  explicit SegModel(const SegConfig& config);
  SegModel(SegModel&&) noexcept;
  SegModel& operator=(SegModel&&) noexcept;
  ~SegModel();

  const SegConfig& config() const { return config_; }
  nn::Backbone& backbone() { return *backbone_; }
  nn::ParamList params();

  nn::Checkpoint snapshot(const nlohmann::json& log) const;
  void restore(const nn::Checkpoint& checkpoint);

  struct ImageLoss {
    double total = 0.0;
    double proposal_cls = 0.0;
    double proposal_box = 0.0;
    double roi_cls = 0.0;
    double roi_box = 0.0;
    double mask = 0.0;
  };

  // Forward+backward for one training image; accumulates parameter grads.
  ImageLoss train_step(const nn::Tensor& image, const Mask& gt_mask, Rng& rng);

  std::vector<Detection> detect(const nn::Tensor& image, int image_h, int image_w);

 private:
  struct Impl;
  SegConfig config_;
  std::unique_ptr<nn::Backbone> backbone_;
  std::unique_ptr<Impl> impl_;
};

SegModel build_seg_model(const SegConfig& config);

struct TransferReport {
  std::vector<std::string> copied;
  std::vector<std::string> skipped;   // checkpoint tensors not used (head layers)
  std::vector<std::string> missing;   // backbone tensors absent from the checkpoint
  int64_t copied_params = 0;
  int64_t backbone_params = 0;
  double copied_fraction = 0.0;

  nlohmann::json to_json() const;
};

// Copies every name+shape-matched backbone tensor from a classifier
// checkpoint; fails when the architectures disagree or under 90% of the
// backbone parameters could be copied.
TransferReport transfer_backbone_weights(const std::filesystem::path& classifier_ckpt,
                                         SegModel& model);

nn::Checkpoint train_segmentation(SegModel& model, const DatasetManifest& manifest,
                                  const SegConfig& config);

// All detections (no confidence filtering), sorted by score descending.
std::vector<Detection> infer_detections(SegModel& model, const Image& image);

// Highest-scoring detection at or above threshold; falls back to the best
// detection overall, then to a full-frame foreground mask.
Mask select_primary_mask(const std::vector<Detection>& detections, int image_h, int image_w,
                         double threshold);

}  // namespace lesionlab

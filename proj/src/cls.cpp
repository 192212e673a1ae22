#include "lesionlab/cls.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lesionlab/error.hpp"
#include "lesionlab/image_io.hpp"
#include "lesionlab/metrics.hpp"

namespace lesionlab {

using nn::Tensor;

nlohmann::json ClsConfig::to_json() const {
  nlohmann::json j{{"backbone_id", backbone_id},
                   {"epochs", epochs},
                   {"input_h", input_h},
                   {"input_w", input_w},
                   {"weighting", weighting},
                   {"seed", seed},
                   {"batch_size", batch_size},
                   {"augment_flips", augment_flips},
                   {"oversample", oversample},
                   {"optim",
                    {{"lr", optim.lr},
                     {"momentum", optim.momentum},
                     {"weight_decay", optim.weight_decay},
                     {"lr_step_epochs", optim.lr_step_epochs},
                     {"lr_gamma", optim.lr_gamma}}}};
  if (class_weights) {
    nlohmann::json w;
    for (const auto& [label, weight] : class_weights->weights) {
      w[std::string(code_from_label(label))] = weight;
    }
    j["class_weights"] = w;
  } else {
    j["class_weights"] = "uniform";
  }
  return j;
}

ClsConfig ClsConfig::from_json(const nlohmann::json& j) {
  ClsConfig c;
  c.backbone_id = j.value("backbone_id", c.backbone_id);
  c.epochs = j.value("epochs", c.epochs);
  c.input_h = j.value("input_h", c.input_h);
  c.input_w = j.value("input_w", c.input_w);
  c.weighting = j.value("weighting", c.weighting);
  c.seed = j.value("seed", c.seed);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.augment_flips = j.value("augment_flips", c.augment_flips);
  c.oversample = j.value("oversample", c.oversample);
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    c.optim.lr = o.value("lr", c.optim.lr);
    c.optim.momentum = o.value("momentum", c.optim.momentum);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
    c.optim.lr_step_epochs = o.value("lr_step_epochs", c.optim.lr_step_epochs);
    c.optim.lr_gamma = o.value("lr_gamma", c.optim.lr_gamma);
  }
  if (j.contains("class_weights") && j.at("class_weights").is_object()) {
    ClassWeights w;
    for (const auto& [code, weight] : j.at("class_weights").items()) {
      w.weights[label_from_code(code)] = weight.get<double>();
    }
    c.class_weights = std::move(w);
  }
  return c;
}

// ---------------------------------------------------------------------------

ClsModel::ClsModel(const ClsConfig& config) : config_(config), fc_(1, 1) {
  require(config.epochs >= 1, Err::InvalidConfig, "epochs must be >= 1");
  require(config.input_h > 0 && config.input_w > 0, Err::InvalidConfig,
          "input size must be positive");
  Rng rng(hash_combine(config.seed, 0xC1A55ULL));
  backbone_ = nn::BackboneRegistry::instance().create(config.backbone_id, rng);
  fc_ = nn::Linear(backbone_->out_channels(), kNumClasses);
  fc_.init_he(rng);
}

Tensor ClsModel::forward_scores(const Tensor& images, bool train, bool cache) {
  Tensor features = backbone_->forward(images, train, cache);
  Tensor pooled = gap_.forward(features, cache);
  return fc_.forward(pooled, cache);
}

void ClsModel::backward(const Tensor& dscores) {
  Tensor dpooled = fc_.backward(dscores);
  Tensor dfeatures = gap_.backward(dpooled);
  backbone_->backward(dfeatures);
}

nn::ParamList ClsModel::params() {
  nn::ParamList out;
  backbone_->visit("backbone", out);
  fc_.visit("head.fc", out);
  return out;
}

nn::Checkpoint ClsModel::snapshot(const nlohmann::json& log) const {
  nn::Checkpoint ckpt;
  ckpt.meta = {{"kind", "cls"}, {"backbone_id", config_.backbone_id},
               {"config", config_.to_json()}, {"log", log}};
  for (const auto& p : const_cast<ClsModel*>(this)->params()) ckpt.tensors[p.name] = *p.value;
  return ckpt;
}

void ClsModel::restore(const nn::Checkpoint& checkpoint) {
  for (auto& p : params()) {
    auto it = checkpoint.tensors.find(p.name);
    require(it != checkpoint.tensors.end(), Err::CheckpointShapeMismatch,
            "checkpoint lacks tensor '" + p.name + "'");
    require(it->second.shape == p.value->shape, Err::CheckpointShapeMismatch,
            "tensor '" + p.name + "' shape differs");
    *p.value = it->second;
  }
}

ClsModel build_classifier(const ClsConfig& config) { return ClsModel(config); }

// ---------------------------------------------------------------------------

double weighted_cross_entropy(const std::array<double, kNumClasses>& probs, int true_label,
                              const ClassWeights& weights) {
  require(is_valid_label(true_label), Err::LabelOutOfRange,
          "true label " + std::to_string(true_label));
  const double p = std::max(probs[static_cast<size_t>(true_label)], 1e-7);
  return weights.at(true_label) * (-std::log(p));
}

ScoreLoss weighted_ce_from_scores(const std::array<double, kNumClasses>& scores, int true_label,
                                  double weight) {
  double max_score = scores[0];
  for (double s : scores) max_score = std::max(max_score, s);
  std::array<double, kNumClasses> probs{};
  double sum = 0.0;
  for (int i = 0; i < kNumClasses; ++i) {
    probs[static_cast<size_t>(i)] = std::exp(scores[static_cast<size_t>(i)] - max_score);
    sum += probs[static_cast<size_t>(i)];
  }
  for (auto& p : probs) p /= sum;

  ScoreLoss out;
  const double p_true = std::max(probs[static_cast<size_t>(true_label)], 1e-7);
  out.loss = weight * (-std::log(p_true));
  for (int i = 0; i < kNumClasses; ++i) {
    out.grad[static_cast<size_t>(i)] =
        weight * (probs[static_cast<size_t>(i)] - (i == true_label ? 1.0 : 0.0));
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor image_to_input(const Image& image, int input_h, int input_w) {
  require(image.height >= 8 && image.width >= 8, Err::ImageTooSmall,
          "image is " + std::to_string(image.height) + "x" + std::to_string(image.width));
  const Image sized = resize_image(image, input_h, input_w, ResizeFilter::bilinear);
  Tensor x({1, 3, input_h, input_w});
  for (int r = 0; r < input_h; ++r) {
    for (int c = 0; c < input_w; ++c) {
      for (int ch = 0; ch < 3; ++ch) {
        const uint8_t v = sized.channels == 3 ? sized.at(r, c, ch) : sized.at(r, c, 0);
        x.data[(static_cast<size_t>(ch) * input_h + r) * input_w + c] =
            static_cast<float>(v) / 127.5f - 1.0f;
      }
    }
  }
  return x;
}

namespace {

struct LoadedSample {
  Tensor input;  // [1,3,H,W]
  int label;
  std::string sample_id;
};

std::vector<LoadedSample> load_split(const DatasetManifest& manifest, Split split,
                                     int input_h, int input_w) {
  std::vector<LoadedSample> out;
  const std::filesystem::path root(manifest.source_root);
  for (const auto& record : manifest.records) {
    if (record.split != split) continue;
    const Image image = read_image(root / record.image_path);
    out.push_back({image_to_input(image, input_h, input_w), record.label, record.sample_id});
  }
  return out;
}

// flip_mode bit 0: horizontal, bit 1: vertical
void copy_with_flip(const Tensor& src, Tensor& batch, int slot, int flip_mode) {
  const int h = src.dim(2), w = src.dim(3);
  for (int ch = 0; ch < 3; ++ch) {
    const float* in = src.ptr() + static_cast<int64_t>(ch) * h * w;
    float* out = batch.ptr() + (static_cast<int64_t>(slot) * 3 + ch) * h * w;
    for (int r = 0; r < h; ++r) {
      const int sr = (flip_mode & 2) ? h - 1 - r : r;
      for (int c = 0; c < w; ++c) {
        const int sc = (flip_mode & 1) ? w - 1 - c : c;
        out[r * w + c] = in[sr * w + sc];
      }
    }
  }
}

}  // namespace

int argmax_label(const std::array<double, kNumClasses>& probs) {
  int best = 0;
  for (int i = 1; i < kNumClasses; ++i) {
    if (probs[static_cast<size_t>(i)] > probs[static_cast<size_t>(best)]) best = i;
  }
  return best;
}

nn::Checkpoint train_classifier(ClsModel& model, const DatasetManifest& manifest,
                                const ClsConfig& config) {
  const auto train_samples = load_split(manifest, Split::train, config.input_h, config.input_w);
  const auto val_samples = load_split(manifest, Split::val, config.input_h, config.input_w);
  require(!train_samples.empty() && !val_samples.empty(), Err::InvalidConfig,
          "manifest needs non-empty train and val splits");

  const ClassWeights weights =
      config.class_weights ? *config.class_weights : ClassWeights::uniform(manifest.class_counts);

  nn::SgdMomentum optimizer(model.params(), config.optim);
  Rng epoch_rng(hash_combine(config.seed, 0x7121A1ULL));

  nlohmann::json log = nlohmann::json::array();
  std::vector<EpochLogEntry> entries;
  double best_metric = -1.0;
  int best_epoch = 0;
  nn::Checkpoint best;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    optimizer.set_epoch(epoch);
    Rng rng = epoch_rng.fork(static_cast<uint64_t>(epoch));

    std::vector<size_t> order(train_samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    if (config.oversample) {
      // sample-with-replacement proportional to class weight
      std::vector<double> cumulative;
      double total = 0.0;
      for (const auto& s : train_samples) {
        total += weights.at(s.label);
        cumulative.push_back(total);
      }
      for (auto& slot : order) {
        const double u = rng.uniform(0.0, total);
        slot = static_cast<size_t>(
            std::lower_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
        if (slot >= train_samples.size()) slot = train_samples.size() - 1;
      }
    } else {
      rng.shuffle(order);
    }

    double epoch_loss = 0.0;
    int64_t seen = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      const int n = static_cast<int>(std::min(order.size() - start,
                                              static_cast<size_t>(config.batch_size)));
      Tensor batch({n, 3, config.input_h, config.input_w});
      std::vector<int> labels(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        const auto& sample = train_samples[order[start + static_cast<size_t>(i)]];
        const int flip = config.augment_flips ? static_cast<int>(rng.uniform_int(0, 3)) : 0;
        copy_with_flip(sample.input, batch, i, flip);
        labels[static_cast<size_t>(i)] = sample.label;
      }

      Tensor scores = model.forward_scores(batch, /*train=*/true, /*cache=*/true);
      Tensor dscores(scores.shape);
      double batch_loss = 0.0;
      for (int i = 0; i < n; ++i) {
        std::array<double, kNumClasses> row{};
        for (int k = 0; k < kNumClasses; ++k) {
          row[static_cast<size_t>(k)] = scores.data[static_cast<size_t>(i) * kNumClasses +
                                                    static_cast<size_t>(k)];
        }
        const double w = config.oversample ? 1.0 : weights.at(labels[static_cast<size_t>(i)]);
        const ScoreLoss sl = weighted_ce_from_scores(row, labels[static_cast<size_t>(i)], w);
        batch_loss += sl.loss;
        for (int k = 0; k < kNumClasses; ++k) {
          dscores.data[static_cast<size_t>(i) * kNumClasses + static_cast<size_t>(k)] =
              static_cast<float>(sl.grad[static_cast<size_t>(k)] / n);
        }
      }
      if (!std::isfinite(batch_loss)) {
        raise(Err::DivergedTraining, "training loss is not finite at epoch " +
                                         std::to_string(epoch));
      }
      epoch_loss += batch_loss;
      seen += n;

      optimizer.zero_grad();
      model.backward(dscores);
      optimizer.step();
    }
    epoch_loss /= static_cast<double>(std::max<int64_t>(1, seen));

    // validation (classes absent from the train split fall back to weight 1)
    double val_loss = 0.0;
    std::vector<int> truths, preds;
    for (const auto& sample : val_samples) {
      Tensor scores = model.forward_scores(sample.input, /*train=*/false, /*cache=*/false);
      std::array<double, kNumClasses> row{};
      for (int k = 0; k < kNumClasses; ++k) row[static_cast<size_t>(k)] = scores.data[static_cast<size_t>(k)];
      const auto weight_it = weights.weights.find(sample.label);
      const ScoreLoss sl = weighted_ce_from_scores(
          row, sample.label, weight_it != weights.weights.end() ? weight_it->second : 1.0);
      val_loss += sl.loss;
      std::array<double, kNumClasses> probs{};
      double sum = 0.0;
      for (int k = 0; k < kNumClasses; ++k) {
        probs[static_cast<size_t>(k)] = std::exp(row[static_cast<size_t>(k)]);
        sum += probs[static_cast<size_t>(k)];
      }
      for (auto& p : probs) p /= sum;
      truths.push_back(sample.label);
      preds.push_back(argmax_label(probs));
    }
    val_loss /= static_cast<double>(val_samples.size());
    const double val_metric = normalized_multiclass_accuracy(confusion_matrix(truths, preds));

    entries.push_back({epoch, epoch_loss, val_loss, val_metric});
    log.push_back({{"epoch", epoch},
                   {"train_loss", epoch_loss},
                   {"val_loss", val_loss},
                   {"val_normalized_accuracy", val_metric}});

    if (val_metric > best_metric) {
      best_metric = val_metric;
      best_epoch = epoch;
      best = model.snapshot(log);
    }
  }

  best.meta["log"] = log;  // full log, not just up to the best epoch
  best.meta["best_epoch"] = best_epoch;
  best.meta["best_val_normalized_accuracy"] = best_metric;
  model.restore(best);
  return best;
}

Prediction predict(ClsModel& model, const Image& image) {
  const auto& cfg = model.config();
  Tensor input = image_to_input(image, cfg.input_h, cfg.input_w);
  Tensor scores = model.forward_scores(input, /*train=*/false, /*cache=*/false);

  std::array<double, kNumClasses> probs{};
  double max_score = scores.data[0];
  for (int k = 1; k < kNumClasses; ++k) max_score = std::max(max_score, static_cast<double>(scores.data[static_cast<size_t>(k)]));
  double sum = 0.0;
  for (int k = 0; k < kNumClasses; ++k) {
    probs[static_cast<size_t>(k)] = std::exp(scores.data[static_cast<size_t>(k)] - max_score);
    sum += probs[static_cast<size_t>(k)];
  }
  for (auto& p : probs) p /= sum;
  return {probs, argmax_label(probs)};
}

ClsEvalResult evaluate_classifier(ClsModel& model, const DatasetManifest& manifest, Split split) {
  ClsEvalResult out;
  const std::filesystem::path root(manifest.source_root);
  for (const auto& record : manifest.records) {
    if (record.split != split) continue;
    const Image image = read_image(root / record.image_path);
    const Prediction pred = predict(model, image);
    out.sample_ids.push_back(record.sample_id);
    out.truths.push_back(record.label);
    out.preds.push_back(pred.label);
    out.probs.push_back(pred.probs);
  }
  return out;
}

}  // namespace lesionlab

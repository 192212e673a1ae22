#include "lesionlab/seg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "lesionlab/crop.hpp"
#include "lesionlab/error.hpp"
#include "lesionlab/image_io.hpp"
#include "lesionlab/metrics.hpp"

namespace lesionlab {

using nn::Tensor;

const char* backbone_init_name(BackboneInit init) {
  switch (init) {
    case BackboneInit::random: return "random";
    case BackboneInit::generic_pretrained: return "generic_pretrained";
    case BackboneInit::classifier_transfer: return "classifier_transfer";
  }
  return "random";
}

BackboneInit backbone_init_from_name(const std::string& name) {
  if (name == "random") return BackboneInit::random;
  if (name == "generic_pretrained") return BackboneInit::generic_pretrained;
  if (name == "classifier_transfer") return BackboneInit::classifier_transfer;
  raise(Err::InvalidConfig, "unknown backbone_init '" + name + "'");
}

nlohmann::json SegConfig::to_json() const {
  nlohmann::json j{{"roi_candidates_per_image", roi_candidates_per_image},
                   {"confidence_threshold", confidence_threshold},
                   {"epochs", epochs},
                   {"input_h", input_h},
                   {"input_w", input_w},
                   {"backbone_id", backbone_id},
                   {"backbone_init", backbone_init_name(backbone_init)},
                   {"seed", seed},
                   {"batch_size", batch_size},
                   {"val_images", val_images},
                   {"augment_flips", augment_flips},
                   {"optim",
                    {{"lr", optim.lr},
                     {"momentum", optim.momentum},
                     {"weight_decay", optim.weight_decay},
                     {"lr_step_epochs", optim.lr_step_epochs},
                     {"lr_gamma", optim.lr_gamma}}}};
  if (classifier_checkpoint) j["classifier_checkpoint"] = *classifier_checkpoint;
  if (pretrained_checkpoint) j["pretrained_checkpoint"] = *pretrained_checkpoint;
  return j;
}

SegConfig SegConfig::from_json(const nlohmann::json& j) {
  SegConfig c;
  c.roi_candidates_per_image = j.value("roi_candidates_per_image", c.roi_candidates_per_image);
  c.confidence_threshold = j.value("confidence_threshold", c.confidence_threshold);
  c.epochs = j.value("epochs", c.epochs);
  c.input_h = j.value("input_h", c.input_h);
  c.input_w = j.value("input_w", c.input_w);
  c.backbone_id = j.value("backbone_id", c.backbone_id);
  if (j.contains("backbone_init")) c.backbone_init = backbone_init_from_name(j.at("backbone_init"));
  if (j.contains("classifier_checkpoint")) c.classifier_checkpoint = j.at("classifier_checkpoint").get<std::string>();
  if (j.contains("pretrained_checkpoint")) c.pretrained_checkpoint = j.at("pretrained_checkpoint").get<std::string>();
  c.seed = j.value("seed", c.seed);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.val_images = j.value("val_images", c.val_images);
  c.augment_flips = j.value("augment_flips", c.augment_flips);
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    c.optim.lr = o.value("lr", c.optim.lr);
    c.optim.momentum = o.value("momentum", c.optim.momentum);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
    c.optim.lr_step_epochs = o.value("lr_step_epochs", c.optim.lr_step_epochs);
    c.optim.lr_gamma = o.value("lr_gamma", c.optim.lr_gamma);
  }
  return c;
}

void SegConfig::validate() const {
  require(roi_candidates_per_image >= 1, Err::InvalidConfig, "roi_candidates_per_image must be >= 1");
  require(confidence_threshold > 0.0 && confidence_threshold < 1.0, Err::InvalidConfig,
          "confidence_threshold must lie in (0,1)");
  require(epochs >= 1, Err::InvalidConfig, "epochs must be >= 1");
  if (backbone_init == BackboneInit::classifier_transfer) {
    require(classifier_checkpoint.has_value(), Err::InvalidConfig,
            "classifier_transfer requires classifier_checkpoint");
  }
  if (backbone_init == BackboneInit::generic_pretrained) {
    require(pretrained_checkpoint.has_value(), Err::InvalidConfig,
            "generic_pretrained requires pretrained_checkpoint");
  }
}

// ---------------------------------------------------------------------------
// geometry helpers

namespace {

struct FBox {
  double r0, c0, r1, c1;

  double h() const { return r1 - r0 + 1.0; }
  double w() const { return c1 - c0 + 1.0; }
  double rc() const { return (r0 + r1) / 2.0; }
  double cc() const { return (c0 + c1) / 2.0; }
};

double fbox_iou(const FBox& a, const FBox& b) {
  const double r0 = std::max(a.r0, b.r0), c0 = std::max(a.c0, b.c0);
  const double r1 = std::min(a.r1, b.r1), c1 = std::min(a.c1, b.c1);
  if (r1 < r0 || c1 < c0) return 0.0;
  const double inter = (r1 - r0 + 1.0) * (c1 - c0 + 1.0);
  return inter / (a.h() * a.w() + b.h() * b.w() - inter);
}

struct Anchor {
  double rc, cc, h, w;

  FBox box() const { return {rc - (h - 1) / 2, cc - (w - 1) / 2, rc + (h - 1) / 2, cc + (w - 1) / 2}; }
};

constexpr int kScales = 3;
constexpr int kAspects = 3;
constexpr int kAnchorsPerCell = kScales * kAspects;
constexpr double kScaleFractions[kScales] = {0.20, 0.40, 0.65};
constexpr double kAspectRatios[kAspects] = {0.7, 1.0, 1.43};  // height / width
constexpr int kPool = 8;
constexpr int kMaskSize = 16;

// Anchor k at cell (y,x) with intra-cell index a maps to objectness channel a
// via flat index (a*fh + y)*fw + x.
std::vector<Anchor> make_anchors(int img_h, int img_w, int stride, int fh, int fw) {
  std::vector<Anchor> anchors(static_cast<size_t>(kAnchorsPerCell) * fh * fw);
  const double base = std::min(img_h, img_w);
  for (int a = 0; a < kAnchorsPerCell; ++a) {
    const double scale = kScaleFractions[a / kAspects] * base;
    const double aspect = kAspectRatios[a % kAspects];
    const double h = scale * std::sqrt(aspect);
    const double w = scale / std::sqrt(aspect);
    for (int y = 0; y < fh; ++y) {
      for (int x = 0; x < fw; ++x) {
        anchors[(static_cast<size_t>(a) * fh + y) * fw + x] = {
            (y + 0.5) * stride - 0.5, (x + 0.5) * stride - 0.5, h, w};
      }
    }
  }
  return anchors;
}

struct BoxDeltas {
  double tr, tc, th, tw;
};

BoxDeltas encode_box(const FBox& target, const FBox& reference) {
  return {(target.rc() - reference.rc()) / reference.h(),
          (target.cc() - reference.cc()) / reference.w(),
          std::log(target.h() / reference.h()),
          std::log(target.w() / reference.w())};
}

FBox decode_box(const BoxDeltas& d, const FBox& reference, int img_h, int img_w) {
  const double rc = reference.rc() + std::clamp(d.tr, -2.0, 2.0) * reference.h();
  const double cc = reference.cc() + std::clamp(d.tc, -2.0, 2.0) * reference.w();
  const double h = reference.h() * std::exp(std::clamp(d.th, -2.0, 2.0));
  const double w = reference.w() * std::exp(std::clamp(d.tw, -2.0, 2.0));
  FBox out{rc - (h - 1) / 2, cc - (w - 1) / 2, rc + (h - 1) / 2, cc + (w - 1) / 2};
  out.r0 = std::clamp(out.r0, 0.0, static_cast<double>(img_h - 1));
  out.c0 = std::clamp(out.c0, 0.0, static_cast<double>(img_w - 1));
  out.r1 = std::clamp(out.r1, out.r0, static_cast<double>(img_h - 1));
  out.c1 = std::clamp(out.c1, out.c0, static_cast<double>(img_w - 1));
  return out;
}

BBox to_pixel_box(const FBox& box, int img_h, int img_w) {
  BBox out;
  out.row_min = std::clamp(static_cast<int>(std::lround(box.r0)), 0, img_h - 1);
  out.col_min = std::clamp(static_cast<int>(std::lround(box.c0)), 0, img_w - 1);
  out.row_max = std::clamp(static_cast<int>(std::lround(box.r1)), out.row_min, img_h - 1);
  out.col_max = std::clamp(static_cast<int>(std::lround(box.c1)), out.col_min, img_w - 1);
  return out;
}

// ---------------------------------------------------------------------------
// losses

double smooth_l1(double x) {
  const double ax = std::fabs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

double smooth_l1_grad(double x) { return std::fabs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0); }

double bce_logit(double z, double t) {
  return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
}

double bce_logit_grad(double z, double t) { return 1.0 / (1.0 + std::exp(-z)) - t; }

// ---------------------------------------------------------------------------
// ROI align (bilinear, one sample per output cell)

struct BilinearTap {
  int lo, hi;
  float w_hi;
};

BilinearTap feature_tap(double pixel_pos, int stride, int extent) {
  double f = (pixel_pos + 0.5) / stride - 0.5;
  f = std::clamp(f, 0.0, static_cast<double>(extent - 1));
  const int lo = static_cast<int>(f);
  const int hi = std::min(lo + 1, extent - 1);
  return {lo, hi, static_cast<float>(f - lo)};
}

Tensor roi_align(const Tensor& feat, const std::vector<FBox>& boxes, int stride) {
  const int ch = feat.dim(1), fh = feat.dim(2), fw = feat.dim(3);
  Tensor pooled({static_cast<int>(boxes.size()), ch, kPool, kPool});
#pragma omp parallel for schedule(static)
  for (int b = 0; b < static_cast<int>(boxes.size()); ++b) {
    const FBox& box = boxes[static_cast<size_t>(b)];
    for (int i = 0; i < kPool; ++i) {
      const BilinearTap ty = feature_tap(box.r0 + (i + 0.5) * box.h() / kPool, stride, fh);
      for (int j = 0; j < kPool; ++j) {
        const BilinearTap tx = feature_tap(box.c0 + (j + 0.5) * box.w() / kPool, stride, fw);
        for (int c = 0; c < ch; ++c) {
          const float* plane = feat.ptr() + static_cast<int64_t>(c) * fh * fw;
          const float top = plane[ty.lo * fw + tx.lo] * (1 - tx.w_hi) + plane[ty.lo * fw + tx.hi] * tx.w_hi;
          const float bot = plane[ty.hi * fw + tx.lo] * (1 - tx.w_hi) + plane[ty.hi * fw + tx.hi] * tx.w_hi;
          pooled.data[((static_cast<size_t>(b) * ch + c) * kPool + i) * kPool + j] =
              top * (1 - ty.w_hi) + bot * ty.w_hi;
        }
      }
    }
  }
  return pooled;
}

// Serial scatter: overlapping boxes write to shared feature cells.
void roi_align_backward(const Tensor& dpooled, const std::vector<FBox>& boxes, int stride,
                        Tensor& dfeat) {
  const int ch = dfeat.dim(1), fh = dfeat.dim(2), fw = dfeat.dim(3);
  for (size_t b = 0; b < boxes.size(); ++b) {
    const FBox& box = boxes[b];
    for (int i = 0; i < kPool; ++i) {
      const BilinearTap ty = feature_tap(box.r0 + (i + 0.5) * box.h() / kPool, stride, fh);
      for (int j = 0; j < kPool; ++j) {
        const BilinearTap tx = feature_tap(box.c0 + (j + 0.5) * box.w() / kPool, stride, fw);
        for (int c = 0; c < ch; ++c) {
          const float g = dpooled.data[((b * ch + static_cast<size_t>(c)) * kPool +
                                        static_cast<size_t>(i)) * kPool + static_cast<size_t>(j)];
          float* plane = dfeat.ptr() + static_cast<int64_t>(c) * fh * fw;
          plane[ty.lo * fw + tx.lo] += g * (1 - ty.w_hi) * (1 - tx.w_hi);
          plane[ty.lo * fw + tx.hi] += g * (1 - ty.w_hi) * tx.w_hi;
          plane[ty.hi * fw + tx.lo] += g * ty.w_hi * (1 - tx.w_hi);
          plane[ty.hi * fw + tx.hi] += g * ty.w_hi * tx.w_hi;
        }
      }
    }
  }
}

std::optional<FBox> mask_fbox(const Mask& mask) {
  const auto bbox = mask_to_bbox(mask);
  if (!bbox) return std::nullopt;
  return FBox{static_cast<double>(bbox->row_min), static_cast<double>(bbox->col_min),
              static_cast<double>(bbox->row_max), static_cast<double>(bbox->col_max)};
}

// Nearest-sample the ground-truth mask over a proposal box into the mask-head grid.
std::vector<float> mask_target(const Mask& gt, const FBox& box) {
  std::vector<float> target(kMaskSize * kMaskSize, 0.0f);
  for (int i = 0; i < kMaskSize; ++i) {
    const int r = static_cast<int>(std::lround(box.r0 + (i + 0.5) * box.h() / kMaskSize - 0.5));
    if (r < 0 || r >= gt.height) continue;
    for (int j = 0; j < kMaskSize; ++j) {
      const int c = static_cast<int>(std::lround(box.c0 + (j + 0.5) * box.w() / kMaskSize - 0.5));
      if (c < 0 || c >= gt.width) continue;
      target[static_cast<size_t>(i) * kMaskSize + j] = gt.at(r, c) ? 1.0f : 0.0f;
    }
  }
  return target;
}

}  // namespace

// ---------------------------------------------------------------------------
// model

struct SegModel::Impl {
  int feat_ch;
  int stride;

  nn::Conv2d rpn_conv;
  nn::ReLU rpn_relu;
  nn::Conv2d rpn_obj;
  nn::Conv2d rpn_box;

  nn::Linear fc1;
  nn::ReLU fc1_relu;
  nn::Linear fc_cls;
  nn::Linear fc_box;

  nn::Conv2d mask_c0;
  nn::ReLU mask_r0;
  nn::Conv2d mask_c1;
  nn::ReLU mask_r1;
  nn::Conv2d mask_out;

  Impl(int channels, int stride_, Rng& rng)
      : feat_ch(channels), stride(stride_),
        rpn_conv(channels, channels, 3, 1, 1),
        rpn_obj(channels, kAnchorsPerCell, 1, 1, 0),
        rpn_box(channels, 4 * kAnchorsPerCell, 1, 1, 0),
        fc1(channels * kPool * kPool, 128),
        fc_cls(128, 2),
        fc_box(128, 4),
        mask_c0(channels, 32, 3, 1, 1),
        mask_c1(32, 16, 3, 1, 1),
        mask_out(16, 1, 1, 1, 0) {
    rpn_conv.init_he(rng);
    rpn_obj.init_he(rng);
    rpn_box.init_he(rng);
    fc1.init_he(rng);
    fc_cls.init_he(rng);
    fc_box.init_he(rng);
    mask_c0.init_he(rng);
    mask_c1.init_he(rng);
    mask_out.init_he(rng);
  }

  void visit(nn::ParamList& out) {
    rpn_conv.visit("rpn.conv", out);
    rpn_obj.visit("rpn.obj", out);
    rpn_box.visit("rpn.box", out);
    fc1.visit("roi.fc1", out);
    fc_cls.visit("roi.cls", out);
    fc_box.visit("roi.box", out);
    mask_c0.visit("mask.conv0", out);
    mask_c1.visit("mask.conv1", out);
    mask_out.visit("mask.out", out);
  }

  // Mask-head forward on pooled ROI features; caches for backward.
  Tensor mask_forward(const Tensor& pooled, bool cache) {
    Tensor h = mask_c0.forward(pooled, cache);
    h = mask_r0.forward(h, cache);
    h = nn::upsample2x_forward(h);
    h = mask_c1.forward(h, cache);
    h = mask_r1.forward(h, cache);
    return mask_out.forward(h, cache);
  }

  Tensor mask_backward(const Tensor& dlogits) {
    Tensor g = mask_out.backward(dlogits);
    g = mask_r1.backward(g);
    g = mask_c1.backward(g);
    g = nn::upsample2x_backward(g, kPool, kPool);
    g = mask_r0.backward(g);
    return mask_c0.backward(g);
  }
};

SegModel::SegModel(const SegConfig& config) : config_(config) {
  config.validate();
  Rng rng(hash_combine(config.seed, 0x5E6ULL));
  backbone_ = nn::BackboneRegistry::instance().create(config.backbone_id, rng);
  impl_ = std::make_unique<Impl>(backbone_->out_channels(), backbone_->out_stride(), rng);
}

SegModel::SegModel(SegModel&&) noexcept = default;
SegModel& SegModel::operator=(SegModel&&) noexcept = default;
SegModel::~SegModel() = default;

nn::ParamList SegModel::params() {
  nn::ParamList out;
  backbone_->visit("backbone", out);
  impl_->visit(out);
  return out;
}

nn::Checkpoint SegModel::snapshot(const nlohmann::json& log) const {
  nn::Checkpoint ckpt;
  ckpt.meta = {{"kind", "seg"}, {"backbone_id", config_.backbone_id},
               {"config", config_.to_json()}, {"log", log}};
  for (const auto& p : const_cast<SegModel*>(this)->params()) ckpt.tensors[p.name] = *p.value;
  return ckpt;
}

void SegModel::restore(const nn::Checkpoint& checkpoint) {
  for (auto& p : params()) {
    auto it = checkpoint.tensors.find(p.name);
    require(it != checkpoint.tensors.end(), Err::CheckpointShapeMismatch,
            "checkpoint lacks tensor '" + p.name + "'");
    require(it->second.shape == p.value->shape, Err::CheckpointShapeMismatch,
            "tensor '" + p.name + "' shape differs");
    *p.value = it->second;
  }
}

SegModel::ImageLoss SegModel::train_step(const Tensor& image, const Mask& gt_mask, Rng& rng) {
  Impl& net = *impl_;
  const int img_h = image.dim(2), img_w = image.dim(3);

  Tensor feat = backbone_->forward(image, /*train=*/true, /*cache=*/true);
  const int fh = feat.dim(2), fw = feat.dim(3);

  Tensor hidden = net.rpn_relu.forward(net.rpn_conv.forward(feat, true), true);
  Tensor obj = net.rpn_obj.forward(hidden, true);
  Tensor deltas = net.rpn_box.forward(hidden, true);

  const auto anchors = make_anchors(img_h, img_w, net.stride, fh, fw);
  const auto gt = mask_fbox(gt_mask);

  // --- proposal-stage targets
  std::vector<int> labels(anchors.size(), -1);  // 1 pos, 0 neg, -1 ignore
  if (gt) {
    double best_iou = -1.0;
    size_t best_idx = 0;
    for (size_t k = 0; k < anchors.size(); ++k) {
      const double iou = fbox_iou(anchors[k].box(), *gt);
      if (iou >= 0.5) labels[k] = 1;
      else if (iou < 0.3) labels[k] = 0;
      if (iou > best_iou) {
        best_iou = iou;
        best_idx = k;
      }
    }
    labels[best_idx] = 1;
  } else {
    std::fill(labels.begin(), labels.end(), 0);
  }

  std::vector<size_t> pos, neg;
  for (size_t k = 0; k < anchors.size(); ++k) {
    if (labels[k] == 1) pos.push_back(k);
    else if (labels[k] == 0) neg.push_back(k);
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  if (pos.size() > 16) pos.resize(16);
  if (neg.size() > 16) neg.resize(16);

  ImageLoss loss;
  Tensor dobj(obj.shape);
  Tensor ddeltas(deltas.shape);
  const double n_sampled = static_cast<double>(pos.size() + neg.size());
  auto obj_at = [&](size_t k) -> float& { return obj.data[k]; };  // layout matches anchor index
  for (size_t k : pos) {
    loss.proposal_cls += bce_logit(obj_at(k), 1.0);
    dobj.data[k] = static_cast<float>(bce_logit_grad(obj_at(k), 1.0) / n_sampled);
  }
  for (size_t k : neg) {
    loss.proposal_cls += bce_logit(obj_at(k), 0.0);
    dobj.data[k] = static_cast<float>(bce_logit_grad(obj_at(k), 0.0) / n_sampled);
  }
  loss.proposal_cls /= std::max(1.0, n_sampled);

  if (gt && !pos.empty()) {
    for (size_t k : pos) {
      const int a = static_cast<int>(k / (static_cast<size_t>(fh) * fw));
      const size_t cell = k % (static_cast<size_t>(fh) * fw);
      const BoxDeltas target = encode_box(*gt, anchors[k].box());
      const double t[4] = {target.tr, target.tc, target.th, target.tw};
      for (int d = 0; d < 4; ++d) {
        const size_t idx = (static_cast<size_t>(4 * a + d) * fh * fw) + cell;
        const double diff = deltas.data[idx] - t[d];
        loss.proposal_box += smooth_l1(diff);
        ddeltas.data[idx] = static_cast<float>(smooth_l1_grad(diff) / (4.0 * pos.size()));
      }
    }
    loss.proposal_box /= 4.0 * static_cast<double>(pos.size());
  }

  // --- proposals for the ROI stage (deltas are treated as fixed here)
  const size_t top_k = std::min(anchors.size(),
                                static_cast<size_t>(config_.roi_candidates_per_image));
  std::vector<size_t> ranked(anchors.size());
  std::iota(ranked.begin(), ranked.end(), size_t{0});
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(top_k),
                    ranked.end(), [&](size_t a, size_t b) {
                      return obj.data[a] != obj.data[b] ? obj.data[a] > obj.data[b] : a < b;
                    });
  ranked.resize(top_k);

  std::vector<FBox> candidates;
  for (size_t k : ranked) {
    const int a = static_cast<int>(k / (static_cast<size_t>(fh) * fw));
    const size_t cell = k % (static_cast<size_t>(fh) * fw);
    BoxDeltas d;
    d.tr = deltas.data[(static_cast<size_t>(4 * a) * fh * fw) + cell];
    d.tc = deltas.data[(static_cast<size_t>(4 * a + 1) * fh * fw) + cell];
    d.th = deltas.data[(static_cast<size_t>(4 * a + 2) * fh * fw) + cell];
    d.tw = deltas.data[(static_cast<size_t>(4 * a + 3) * fh * fw) + cell];
    const FBox box = decode_box(d, anchors[k].box(), img_h, img_w);
    if (box.h() >= 6.0 && box.w() >= 6.0) candidates.push_back(box);
  }
  if (gt) {
    candidates.push_back(*gt);  // guarantees positives from the first epoch
    for (int j = 0; j < 4; ++j) {
      FBox jit = *gt;
      const double dh = gt->h() * rng.uniform(-0.1, 0.1);
      const double dw = gt->w() * rng.uniform(-0.1, 0.1);
      const double sh = rng.uniform(0.85, 1.15), sw = rng.uniform(0.85, 1.15);
      const double hh = gt->h() * sh / 2, hw = gt->w() * sw / 2;
      jit.r0 = std::clamp(gt->rc() + dh - hh, 0.0, static_cast<double>(img_h - 1));
      jit.r1 = std::clamp(gt->rc() + dh + hh, jit.r0, static_cast<double>(img_h - 1));
      jit.c0 = std::clamp(gt->cc() + dw - hw, 0.0, static_cast<double>(img_w - 1));
      jit.c1 = std::clamp(gt->cc() + dw + hw, jit.c0, static_cast<double>(img_w - 1));
      if (jit.h() >= 6.0 && jit.w() >= 6.0) candidates.push_back(jit);
    }
  }

  std::vector<size_t> roi_pos, roi_neg;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const double iou = gt ? fbox_iou(candidates[i], *gt) : 0.0;
    (iou >= 0.5 ? roi_pos : roi_neg).push_back(i);
  }
  rng.shuffle(roi_pos);
  rng.shuffle(roi_neg);
  if (roi_pos.size() > 8) roi_pos.resize(8);
  if (roi_neg.size() > 8) roi_neg.resize(8);

  std::vector<FBox> rois;
  std::vector<int> roi_labels;
  for (size_t i : roi_pos) {
    rois.push_back(candidates[i]);
    roi_labels.push_back(1);
  }
  for (size_t i : roi_neg) {
    rois.push_back(candidates[i]);
    roi_labels.push_back(0);
  }

  Tensor dfeat(feat.shape);
  if (!rois.empty()) {
    const int n_rois = static_cast<int>(rois.size());
    Tensor pooled = roi_align(feat, rois, net.stride);
    Tensor flat = pooled;
    flat.shape = {n_rois, net.feat_ch * kPool * kPool};
    Tensor h1 = net.fc1_relu.forward(net.fc1.forward(flat, true), true);
    Tensor cls_scores = net.fc_cls.forward(h1, true);
    Tensor box_deltas = net.fc_box.forward(h1, true);

    // two-way softmax cross entropy
    Tensor dcls(cls_scores.shape);
    for (int i = 0; i < n_rois; ++i) {
      const double z0 = cls_scores.data[static_cast<size_t>(i) * 2];
      const double z1 = cls_scores.data[static_cast<size_t>(i) * 2 + 1];
      const double zmax = std::max(z0, z1);
      const double e0 = std::exp(z0 - zmax), e1 = std::exp(z1 - zmax);
      const double p1 = e1 / (e0 + e1);
      const int t = roi_labels[static_cast<size_t>(i)];
      loss.roi_cls += -std::log(std::max(t == 1 ? p1 : 1.0 - p1, 1e-12));
      dcls.data[static_cast<size_t>(i) * 2] = static_cast<float>(((1.0 - p1) - (t == 0)) / n_rois);
      dcls.data[static_cast<size_t>(i) * 2 + 1] = static_cast<float>((p1 - (t == 1)) / n_rois);
    }
    loss.roi_cls /= n_rois;

    Tensor dbox(box_deltas.shape);
    if (gt && !roi_pos.empty()) {
      int pos_count = 0;
      for (int i = 0; i < n_rois; ++i) {
        if (roi_labels[static_cast<size_t>(i)] != 1) continue;
        ++pos_count;
        const BoxDeltas target = encode_box(*gt, rois[static_cast<size_t>(i)]);
        const double t[4] = {target.tr, target.tc, target.th, target.tw};
        for (int d = 0; d < 4; ++d) {
          const double diff = box_deltas.data[static_cast<size_t>(i) * 4 + d] - t[d];
          loss.roi_box += smooth_l1(diff);
          dbox.data[static_cast<size_t>(i) * 4 + d] = static_cast<float>(smooth_l1_grad(diff));
        }
      }
      if (pos_count > 0) {
        loss.roi_box /= 4.0 * pos_count;
        for (auto& v : dbox.data) v /= static_cast<float>(4 * pos_count);
      }
    }

    // mask head on positive ROIs
    Tensor dpooled(pooled.shape);
    std::vector<int> pos_slots;
    for (int i = 0; i < n_rois; ++i) {
      if (roi_labels[static_cast<size_t>(i)] == 1) pos_slots.push_back(i);
    }
    if (gt && !pos_slots.empty()) {
      const int n_pos = static_cast<int>(pos_slots.size());
      Tensor pooled_pos({n_pos, net.feat_ch, kPool, kPool});
      const int64_t roi_sz = static_cast<int64_t>(net.feat_ch) * kPool * kPool;
      for (int i = 0; i < n_pos; ++i) {
        std::copy_n(pooled.ptr() + pos_slots[static_cast<size_t>(i)] * roi_sz, roi_sz,
                    pooled_pos.ptr() + i * roi_sz);
      }
      Tensor logits = net.mask_forward(pooled_pos, true);
      Tensor dlogits(logits.shape);
      const double norm = static_cast<double>(n_pos) * kMaskSize * kMaskSize;
      for (int i = 0; i < n_pos; ++i) {
        const auto target = mask_target(gt_mask, rois[static_cast<size_t>(pos_slots[static_cast<size_t>(i)])]);
        for (int p = 0; p < kMaskSize * kMaskSize; ++p) {
          const double z = logits.data[static_cast<size_t>(i) * kMaskSize * kMaskSize + p];
          loss.mask += bce_logit(z, target[static_cast<size_t>(p)]);
          dlogits.data[static_cast<size_t>(i) * kMaskSize * kMaskSize + p] =
              static_cast<float>(bce_logit_grad(z, target[static_cast<size_t>(p)]) / norm);
        }
      }
      loss.mask /= norm;
      Tensor dpooled_pos = net.mask_backward(dlogits);
      for (int i = 0; i < n_pos; ++i) {
        float* dst = dpooled.ptr() + pos_slots[static_cast<size_t>(i)] * roi_sz;
        const float* src = dpooled_pos.ptr() + i * roi_sz;
        for (int64_t v = 0; v < roi_sz; ++v) dst[v] += src[v];
      }
    }

    Tensor dh1_cls = net.fc_cls.backward(dcls);
    Tensor dh1_box = net.fc_box.backward(dbox);
    for (size_t v = 0; v < dh1_cls.data.size(); ++v) dh1_cls.data[v] += dh1_box.data[v];
    Tensor dflat = net.fc1.backward(net.fc1_relu.backward(dh1_cls));
    dflat.shape = pooled.shape;
    for (size_t v = 0; v < dpooled.data.size(); ++v) dpooled.data[v] += dflat.data[v];
    roi_align_backward(dpooled, rois, net.stride, dfeat);
  }

  // proposal-stage backward
  Tensor dhidden_obj = net.rpn_obj.backward(dobj);
  Tensor dhidden_box = net.rpn_box.backward(ddeltas);
  for (size_t v = 0; v < dhidden_obj.data.size(); ++v) dhidden_obj.data[v] += dhidden_box.data[v];
  Tensor dfeat_rpn = net.rpn_conv.backward(net.rpn_relu.backward(dhidden_obj));
  for (size_t v = 0; v < dfeat.data.size(); ++v) dfeat.data[v] += dfeat_rpn.data[v];

  backbone_->backward(dfeat);

  loss.total = loss.proposal_cls + loss.proposal_box + loss.roi_cls + loss.roi_box + loss.mask;
  return loss;
}

std::vector<Detection> SegModel::detect(const Tensor& image, int image_h, int image_w) {
  Impl& net = *impl_;
  Tensor feat = backbone_->forward(image, /*train=*/false, /*cache=*/false);
  const int fh = feat.dim(2), fw = feat.dim(3);

  Tensor hidden = net.rpn_relu.forward(net.rpn_conv.forward(feat, false), false);
  Tensor obj = net.rpn_obj.forward(hidden, false);
  Tensor deltas = net.rpn_box.forward(hidden, false);

  const auto anchors = make_anchors(image_h, image_w, net.stride, fh, fw);
  const size_t top_k = std::min(anchors.size(),
                                static_cast<size_t>(config_.roi_candidates_per_image));
  std::vector<size_t> ranked(anchors.size());
  std::iota(ranked.begin(), ranked.end(), size_t{0});
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(top_k),
                    ranked.end(), [&](size_t a, size_t b) {
                      return obj.data[a] != obj.data[b] ? obj.data[a] > obj.data[b] : a < b;
                    });
  ranked.resize(top_k);

  std::vector<FBox> proposals;
  for (size_t k : ranked) {
    const int a = static_cast<int>(k / (static_cast<size_t>(fh) * fw));
    const size_t cell = k % (static_cast<size_t>(fh) * fw);
    BoxDeltas d;
    d.tr = deltas.data[(static_cast<size_t>(4 * a) * fh * fw) + cell];
    d.tc = deltas.data[(static_cast<size_t>(4 * a + 1) * fh * fw) + cell];
    d.th = deltas.data[(static_cast<size_t>(4 * a + 2) * fh * fw) + cell];
    d.tw = deltas.data[(static_cast<size_t>(4 * a + 3) * fh * fw) + cell];
    const FBox box = decode_box(d, anchors[k].box(), image_h, image_w);
    if (box.h() >= 4.0 && box.w() >= 4.0) proposals.push_back(box);
  }
  if (proposals.empty()) return {};

  Tensor pooled = roi_align(feat, proposals, net.stride);
  Tensor flat = pooled;
  flat.shape = {static_cast<int>(proposals.size()), net.feat_ch * kPool * kPool};
  Tensor h1 = net.fc1_relu.forward(net.fc1.forward(flat, false), false);
  Tensor cls_scores = net.fc_cls.forward(h1, false);
  Tensor box_deltas = net.fc_box.forward(h1, false);

  struct Scored {
    FBox box;
    double score;
    size_t order;
  };
  std::vector<Scored> scored;
  for (size_t i = 0; i < proposals.size(); ++i) {
    const double z0 = cls_scores.data[i * 2];
    const double z1 = cls_scores.data[i * 2 + 1];
    const double zmax = std::max(z0, z1);
    const double e0 = std::exp(z0 - zmax), e1 = std::exp(z1 - zmax);
    BoxDeltas d{box_deltas.data[i * 4], box_deltas.data[i * 4 + 1],
                box_deltas.data[i * 4 + 2], box_deltas.data[i * 4 + 3]};
    scored.push_back({decode_box(d, proposals[i], image_h, image_w), e1 / (e0 + e1), i});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
    return a.score != b.score ? a.score > b.score : a.order < b.order;
  });

  // greedy NMS, IoU 0.5
  std::vector<Scored> kept;
  for (const auto& cand : scored) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (fbox_iou(cand.box, k.box) >= 0.5) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
    if (kept.size() >= 32) break;
  }

  std::vector<FBox> kept_boxes;
  for (const auto& k : kept) kept_boxes.push_back(k.box);
  Tensor mask_pooled = roi_align(feat, kept_boxes, net.stride);
  Tensor logits = net.mask_forward(mask_pooled, false);

  std::vector<Detection> detections;
  for (size_t i = 0; i < kept.size(); ++i) {
    Detection det;
    det.box = to_pixel_box(kept[i].box, image_h, image_w);
    det.score = kept[i].score;
    det.mask = Mask(image_h, image_w);
    // bilinear-resample the mask grid over the pixel box, threshold at 0.5
    const float* grid = logits.ptr() + static_cast<int64_t>(i) * kMaskSize * kMaskSize;
    const int bh = det.box.height(), bw = det.box.width();
    for (int r = 0; r < bh; ++r) {
      const double gy = std::clamp((r + 0.5) * kMaskSize / bh - 0.5, 0.0, kMaskSize - 1.0);
      const int y0 = static_cast<int>(gy);
      const int y1 = std::min(y0 + 1, kMaskSize - 1);
      const double wy = gy - y0;
      for (int c = 0; c < bw; ++c) {
        const double gx = std::clamp((c + 0.5) * kMaskSize / bw - 0.5, 0.0, kMaskSize - 1.0);
        const int x0 = static_cast<int>(gx);
        const int x1 = std::min(x0 + 1, kMaskSize - 1);
        const double wx = gx - x0;
        const double z = grid[y0 * kMaskSize + x0] * (1 - wy) * (1 - wx) +
                         grid[y0 * kMaskSize + x1] * (1 - wy) * wx +
                         grid[y1 * kMaskSize + x0] * wy * (1 - wx) +
                         grid[y1 * kMaskSize + x1] * wy * wx;
        if (nn::sigmoid(static_cast<float>(z)) >= 0.5f) {
          det.mask.at(det.box.row_min + r, det.box.col_min + c) = 1;
        }
      }
    }
    detections.push_back(std::move(det));
  }
  return detections;
}

SegModel build_seg_model(const SegConfig& config) {
  SegModel model(config);
  if (config.backbone_init == BackboneInit::classifier_transfer) {
    transfer_backbone_weights(*config.classifier_checkpoint, model);
  } else if (config.backbone_init == BackboneInit::generic_pretrained) {
    transfer_backbone_weights(*config.pretrained_checkpoint, model);
  }
  return model;
}

// ---------------------------------------------------------------------------

nlohmann::json TransferReport::to_json() const {
  return {{"copied", copied},
          {"skipped", skipped},
          {"missing", missing},
          {"copied_params", copied_params},
          {"backbone_params", backbone_params},
          {"copied_fraction", copied_fraction}};
}

TransferReport transfer_backbone_weights(const std::filesystem::path& classifier_ckpt,
                                         SegModel& model) {
  const nn::Checkpoint ckpt = nn::load_checkpoint(classifier_ckpt);
  const std::string source_backbone = ckpt.meta.value("backbone_id", std::string{});
  require(source_backbone == model.config().backbone_id, Err::CheckpointShapeMismatch,
          "checkpoint backbone '" + source_backbone + "' does not match model backbone '" +
              model.config().backbone_id + "'");

  TransferReport report;
  std::set<std::string> used;
  for (auto& p : model.params()) {
    if (p.name.rfind("backbone.", 0) != 0) continue;
    report.backbone_params += p.value->numel();
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end()) {
      report.missing.push_back(p.name);
      continue;
    }
    require(it->second.shape == p.value->shape, Err::CheckpointShapeMismatch,
            "tensor '" + p.name + "' shape differs between checkpoint and model");
    *p.value = it->second;
    report.copied.push_back(p.name);
    report.copied_params += p.value->numel();
    used.insert(p.name);
  }
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (!used.count(name)) report.skipped.push_back(name);
  }
  report.copied_fraction = report.backbone_params > 0
                               ? static_cast<double>(report.copied_params) /
                                     static_cast<double>(report.backbone_params)
                               : 0.0;
  if (report.copied_fraction < 0.9) {
    raise(Err::CheckpointShapeMismatch,
          "only " + std::to_string(report.copied_fraction * 100.0) +
              "% of backbone parameters could be copied");
  }
  return report;
}

// ---------------------------------------------------------------------------

namespace {

Mask resize_mask_nearest(const Mask& mask, int out_h, int out_w) {
  if (mask.height == out_h && mask.width == out_w) return mask;
  Mask out(out_h, out_w);
  for (int r = 0; r < out_h; ++r) {
    const int sr = std::min(mask.height - 1, r * mask.height / out_h);
    for (int c = 0; c < out_w; ++c) {
      const int sc = std::min(mask.width - 1, c * mask.width / out_w);
      out.at(r, c) = mask.at(sr, sc);
    }
  }
  return out;
}

void flip_sample(Tensor& image, Mask& mask, int flip_mode) {
  if (flip_mode == 0) return;
  const int h = image.dim(2), w = image.dim(3);
  Tensor flipped(image.shape);
  Mask flipped_mask(h, w);
  for (int ch = 0; ch < 3; ++ch) {
    const float* in = image.ptr() + static_cast<int64_t>(ch) * h * w;
    float* out = flipped.ptr() + static_cast<int64_t>(ch) * h * w;
    for (int r = 0; r < h; ++r) {
      const int sr = (flip_mode & 2) ? h - 1 - r : r;
      for (int c = 0; c < w; ++c) {
        const int sc = (flip_mode & 1) ? w - 1 - c : c;
        out[r * w + c] = in[sr * w + sc];
      }
    }
  }
  for (int r = 0; r < h; ++r) {
    const int sr = (flip_mode & 2) ? h - 1 - r : r;
    for (int c = 0; c < w; ++c) {
      const int sc = (flip_mode & 1) ? w - 1 - c : c;
      flipped_mask.at(r, c) = mask.at(sr, sc);
    }
  }
  image = std::move(flipped);
  mask = std::move(flipped_mask);
}

}  // namespace

nn::Checkpoint train_segmentation(SegModel& model, const DatasetManifest& manifest,
                                  const SegConfig& config) {
  struct SegSample {
    Tensor input;
    Mask gt;
    std::string sample_id;
  };

  std::vector<SegSample> train_samples, val_samples;
  const std::filesystem::path root(manifest.source_root);
  for (const auto& record : manifest.records) {
    if (record.split == Split::unassigned) continue;
    if (!record.mask_path) {
      raise(Err::MissingMasks, "record '" + record.sample_id + "' has no mask");
    }
    const Image image = read_image(root / record.image_path);
    Mask gt = read_mask(root / *record.mask_path);
    gt = resize_mask_nearest(gt, config.input_h, config.input_w);
    SegSample sample{image_to_input(image, config.input_h, config.input_w), std::move(gt),
                     record.sample_id};
    (record.split == Split::train ? train_samples : val_samples).push_back(std::move(sample));
  }
  require(!train_samples.empty() && !val_samples.empty(), Err::InvalidConfig,
          "manifest needs non-empty train and val splits");

  nn::SgdMomentum optimizer(model.params(), config.optim);
  Rng epoch_rng(hash_combine(config.seed, 0x5E6731ULL));

  nlohmann::json log = nlohmann::json::array();
  double best_metric = -1.0;
  int best_epoch = 0;
  nn::Checkpoint best;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    optimizer.set_epoch(epoch);
    Rng rng = epoch_rng.fork(static_cast<uint64_t>(epoch));

    std::vector<size_t> order(train_samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    rng.shuffle(order);

    double epoch_loss = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      optimizer.zero_grad();
      for (size_t i = start; i < end; ++i) {
        const auto& sample = train_samples[order[i]];
        Tensor input = sample.input;
        Mask gt = sample.gt;
        if (config.augment_flips) flip_sample(input, gt, static_cast<int>(rng.uniform_int(0, 3)));
        const auto losses = model.train_step(input, gt, rng);
        if (!std::isfinite(losses.total)) {
          raise(Err::DivergedTraining,
                "segmentation loss is not finite at epoch " + std::to_string(epoch));
        }
        epoch_loss += losses.total;
      }
      optimizer.step();
    }
    epoch_loss /= static_cast<double>(train_samples.size());

    std::vector<double> scores;
    for (const auto& sample : val_samples) {
      const auto detections = model.detect(sample.input, config.input_h, config.input_w);
      const Mask predicted = select_primary_mask(detections, config.input_h, config.input_w,
                                                 config.confidence_threshold);
      scores.push_back(jaccard(predicted, sample.gt));
    }
    const double val_jaccard = summarize_jaccard(scores).mean;

    log.push_back({{"epoch", epoch}, {"train_loss", epoch_loss}, {"val_mean_jaccard", val_jaccard}});
    if (val_jaccard > best_metric) {
      best_metric = val_jaccard;
      best_epoch = epoch;
      best = model.snapshot(log);
    }
  }

  best.meta["log"] = log;
  best.meta["best_epoch"] = best_epoch;
  best.meta["best_val_mean_jaccard"] = best_metric;
  model.restore(best);
  return best;
}

std::vector<Detection> infer_detections(SegModel& model, const Image& image) {
  const int min_side = model.backbone().out_stride() * 4;
  if (image.height < min_side || image.width < min_side) {
    raise(Err::ImageTooSmall, "image " + std::to_string(image.height) + "x" +
                                  std::to_string(image.width) + " is below the model minimum of " +
                                  std::to_string(min_side));
  }
  Tensor input = image_to_input(image, image.height, image.width);
  return model.detect(input, image.height, image.width);
}

Mask select_primary_mask(const std::vector<Detection>& detections, int image_h, int image_w,
                         double threshold) {
  require(threshold > 0.0 && threshold < 1.0, Err::InvalidConfig,
          "threshold must lie in (0,1)");
  if (detections.empty()) return Mask::full_frame(image_h, image_w);

  const Detection* best_eligible = nullptr;
  const Detection* best_overall = nullptr;
  for (const auto& det : detections) {
    if (!best_overall || det.score > best_overall->score) best_overall = &det;
    if (det.score >= threshold && (!best_eligible || det.score > best_eligible->score)) {
      best_eligible = &det;
    }
  }
  return best_eligible ? best_eligible->mask : best_overall->mask;
}

}  // namespace lesionlab

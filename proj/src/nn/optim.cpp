#include "lesionlab/nn/optim.hpp"

#include <cmath>

namespace lesionlab::nn {

SgdMomentum::SgdMomentum(ParamList params, OptimConfig config)
    : config_(config), lr_(config.lr) {
  for (auto& p : params) {
    if (p.trainable && p.grad) params_.push_back(p);
  }
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.value->shape);
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_) p.grad->zero();
}

void SgdMomentum::step() {
  const float lr = static_cast<float>(lr_);
  const float mu = static_cast<float>(config_.momentum);
  const float wd = static_cast<float>(config_.weight_decay);
  for (size_t k = 0; k < params_.size(); ++k) {
    float* value = params_[k].value->ptr();
    const float* grad = params_[k].grad->ptr();
    float* vel = velocity_[k].ptr();
    const int64_t n = params_[k].value->numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
      const float g = grad[i] + wd * value[i];
      vel[i] = mu * vel[i] + g;
      value[i] -= lr * vel[i];
    }
  }
}

void SgdMomentum::set_epoch(int epoch) {
  if (config_.lr_step_epochs > 0) {
    lr_ = config_.lr * std::pow(config_.lr_gamma, epoch / config_.lr_step_epochs);
  }
}

}  // namespace lesionlab::nn

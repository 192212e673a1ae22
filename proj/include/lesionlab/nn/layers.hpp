#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lesionlab/nn/tensor.hpp"
#include "lesionlab/rng.hpp"

namespace lesionlab::nn {

struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;   // null for buffers
  bool trainable = true;
};

using ParamList = std::vector<ParamRef>;

struct Conv2d {
  int in_ch, out_ch, ksize, stride, pad;
  Tensor weight, bias, wgrad, bgrad;
  Tensor x_cache;

  Conv2d(int in_channels, int out_channels, int kernel, int stride_ = 1, int pad_ = 1);
  void init_he(Rng& rng);
  Tensor forward(const Tensor& x, bool cache = true);
  Tensor backward(const Tensor& dy);  // accumulates into wgrad/bgrad
  void visit(const std::string& prefix, ParamList& out);
};

struct BatchNorm2d {
  int ch;
  float eps = 1e-5f;
  float momentum = 0.1f;
  Tensor weight, bias, wgrad, bgrad;
  Tensor running_mean, running_var;
  // backward caches
  Tensor x_cache;
  std::vector<float> mean_cache, invstd_cache;

  explicit BatchNorm2d(int channels);
  Tensor forward(const Tensor& x, bool train, bool cache = true);
  Tensor backward(const Tensor& dy);
  void visit(const std::string& prefix, ParamList& out);
};

struct Linear {
  int in_dim, out_dim;
  Tensor weight, bias, wgrad, bgrad;
  Tensor x_cache;

  Linear(int in_features, int out_features);
  void init_he(Rng& rng);
  Tensor forward(const Tensor& x, bool cache = true);  // x: [N, in_dim]
  Tensor backward(const Tensor& dy);
  void visit(const std::string& prefix, ParamList& out);
};

struct ReLU {
  Tensor x_cache;
  Tensor forward(const Tensor& x, bool cache = true);
  Tensor backward(const Tensor& dy);
};

struct GlobalAvgPool {
  int h_cache = 0, w_cache = 0;
  Tensor forward(const Tensor& x, bool cache = true);  // [N,C,H,W] -> [N,C]
  Tensor backward(const Tensor& dy);
};

// Softmax over the last dimension of a [N,K] tensor.
Tensor softmax_rows(const Tensor& scores);

// Fixed bilinear x2 upsample on [N,C,H,W] (align_corners = false).
Tensor upsample2x_forward(const Tensor& x);
Tensor upsample2x_backward(const Tensor& dy, int in_h, int in_w);

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace lesionlab::nn

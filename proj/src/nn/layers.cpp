#include "lesionlab/nn/layers.hpp"

#include <algorithm>
#include <cmath>

#include "lesionlab/error.hpp"
#include "lesionlab/nn/kernels.hpp"

namespace lesionlab::nn {

using kernels::Conv2dShape;

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride_, int pad_)
    : in_ch(in_channels), out_ch(out_channels), ksize(kernel), stride(stride_), pad(pad_),
      weight({out_channels, in_channels, kernel, kernel}),
      bias({out_channels}),
      wgrad({out_channels, in_channels, kernel, kernel}),
      bgrad({out_channels}) {}

void Conv2d::init_he(Rng& rng) {
  const double fan_in = static_cast<double>(in_ch) * ksize * ksize;
  const double stddev = std::sqrt(2.0 / fan_in);
  for (auto& v : weight.data) v = static_cast<float>(rng.normal(0.0, stddev));
  bias.zero();
}

Tensor Conv2d::forward(const Tensor& x, bool cache) {
  const Conv2dShape s{x.dim(0), in_ch, x.dim(2), x.dim(3), out_ch, ksize, stride, pad};
  Tensor y({s.batch, out_ch, s.out_h(), s.out_w()});
  kernels::conv2d_forward(x.ptr(), weight.ptr(), bias.ptr(), y.ptr(), s);
  if (cache) x_cache = x;
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const Conv2dShape s{x_cache.dim(0), in_ch, x_cache.dim(2), x_cache.dim(3), out_ch, ksize, stride, pad};
  kernels::conv2d_backward_params(dy.ptr(), x_cache.ptr(), wgrad.ptr(), bgrad.ptr(), s);
  Tensor dx(x_cache.shape);
  kernels::conv2d_backward_input(dy.ptr(), weight.ptr(), dx.ptr(), s);
  return dx;
}

void Conv2d::visit(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &weight, &wgrad, true});
  out.push_back({prefix + ".bias", &bias, &bgrad, true});
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels)
    : ch(channels), weight({channels}), bias({channels}), wgrad({channels}), bgrad({channels}),
      running_mean({channels}), running_var({channels}) {
  std::fill(weight.data.begin(), weight.data.end(), 1.0f);
  std::fill(running_var.data.begin(), running_var.data.end(), 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool train, bool cache) {
  const int batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t per_channel = static_cast<int64_t>(batch) * plane;
  Tensor y(x.shape);

  std::vector<float> mean(static_cast<size_t>(ch)), invstd(static_cast<size_t>(ch));
#pragma omp parallel for schedule(static)
  for (int c = 0; c < ch; ++c) {
    double m = 0.0, v = 0.0;
    if (train) {
      for (int n = 0; n < batch; ++n) {
        const float* px = x.ptr() + (static_cast<int64_t>(n) * ch + c) * plane;
        for (int64_t i = 0; i < plane; ++i) m += px[i];
      }
      m /= static_cast<double>(per_channel);
      for (int n = 0; n < batch; ++n) {
        const float* px = x.ptr() + (static_cast<int64_t>(n) * ch + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const double d = px[i] - m;
          v += d * d;
        }
      }
      v /= static_cast<double>(per_channel);
    } else {
      m = running_mean.data[static_cast<size_t>(c)];
      v = running_var.data[static_cast<size_t>(c)];
    }
    mean[static_cast<size_t>(c)] = static_cast<float>(m);
    invstd[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(v + eps));
    const float g = weight.data[static_cast<size_t>(c)];
    const float b = bias.data[static_cast<size_t>(c)];
    for (int n = 0; n < batch; ++n) {
      const float* px = x.ptr() + (static_cast<int64_t>(n) * ch + c) * plane;
      float* py = y.ptr() + (static_cast<int64_t>(n) * ch + c) * plane;
      const float mf = mean[static_cast<size_t>(c)];
      const float sf = invstd[static_cast<size_t>(c)];
      for (int64_t i = 0; i < plane; ++i) py[i] = (px[i] - mf) * sf * g + b;
    }
  }

  if (train) {
    for (int c = 0; c < ch; ++c) {
      const float m = mean[static_cast<size_t>(c)];
      const float var = 1.0f / (invstd[static_cast<size_t>(c)] * invstd[static_cast<size_t>(c)]) - eps;
      running_mean.data[static_cast<size_t>(c)] =
          (1.0f - momentum) * running_mean.data[static_cast<size_t>(c)] + momentum * m;
      running_var.data[static_cast<size_t>(c)] =
          (1.0f - momentum) * running_var.data[static_cast<size_t>(c)] + momentum * var;
    }
  }
  if (cache) {
    x_cache = x;
    mean_cache = std::move(mean);
    invstd_cache = std::move(invstd);
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy) {
  const int batch = x_cache.dim(0), h = x_cache.dim(2), w = x_cache.dim(3);
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t per_channel = static_cast<int64_t>(batch) * plane;
  Tensor dx(x_cache.shape);

#pragma omp parallel for schedule(static)
  for (int c = 0; c < ch; ++c) {
    const float m = mean_cache[static_cast<size_t>(c)];
    const float s = invstd_cache[static_cast<size_t>(c)];
    const float g = weight.data[static_cast<size_t>(c)];
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < batch; ++n) {
      const float* pdy = dy.ptr() + (static_cast<int64_t>(n) * ch + c) * plane;
      const float* px = x_cache.ptr() + (static_cast<int64_t>(n) * ch + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        sum_dy += pdy[i];
        sum_dy_xhat += pdy[i] * (px[i] - m) * s;
      }
    }
    wgrad.data[static_cast<size_t>(c)] += static_cast<float>(sum_dy_xhat);
    bgrad.data[static_cast<size_t>(c)] += static_cast<float>(sum_dy);
    const float inv_n = 1.0f / static_cast<float>(per_channel);
    for (int n = 0; n < batch; ++n) {
      const float* pdy = dy.ptr() + (static_cast<int64_t>(n) * ch + c) * plane;
      const float* px = x_cache.ptr() + (static_cast<int64_t>(n) * ch + c) * plane;
      float* pdx = dx.ptr() + (static_cast<int64_t>(n) * ch + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const float xhat = (px[i] - m) * s;
        pdx[i] = g * s *
                 (pdy[i] - inv_n * static_cast<float>(sum_dy) -
                  xhat * inv_n * static_cast<float>(sum_dy_xhat));
      }
    }
  }
  return dx;
}

void BatchNorm2d::visit(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &weight, &wgrad, true});
  out.push_back({prefix + ".bias", &bias, &bgrad, true});
  out.push_back({prefix + ".running_mean", &running_mean, nullptr, false});
  out.push_back({prefix + ".running_var", &running_var, nullptr, false});
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(int in_features, int out_features)
    : in_dim(in_features), out_dim(out_features),
      weight({out_features, in_features}), bias({out_features}),
      wgrad({out_features, in_features}), bgrad({out_features}) {}

void Linear::init_he(Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in_dim));
  for (auto& v : weight.data) v = static_cast<float>(rng.normal(0.0, stddev));
  bias.zero();
}

Tensor Linear::forward(const Tensor& x, bool cache) {
  Tensor y({x.dim(0), out_dim});
  kernels::linear_forward(x.ptr(), weight.ptr(), bias.ptr(), y.ptr(), x.dim(0), in_dim, out_dim);
  if (cache) x_cache = x;
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  kernels::linear_backward_params(dy.ptr(), x_cache.ptr(), wgrad.ptr(), bgrad.ptr(),
                                  x_cache.dim(0), in_dim, out_dim);
  Tensor dx(x_cache.shape);
  kernels::linear_backward_input(dy.ptr(), weight.ptr(), dx.ptr(), x_cache.dim(0), in_dim, out_dim);
  return dx;
}

void Linear::visit(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &weight, &wgrad, true});
  out.push_back({prefix + ".bias", &bias, &bgrad, true});
}

// ---------------------------------------------------------------------------
// ReLU / pooling / resampling

Tensor ReLU::forward(const Tensor& x, bool cache) {
  Tensor y(x.shape);
  const int64_t n = x.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) y.data[static_cast<size_t>(i)] = std::max(0.0f, x.data[static_cast<size_t>(i)]);
  if (cache) x_cache = x;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) {
  Tensor dx(dy.shape);
  const int64_t n = dy.numel();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    dx.data[static_cast<size_t>(i)] =
        x_cache.data[static_cast<size_t>(i)] > 0.0f ? dy.data[static_cast<size_t>(i)] : 0.0f;
  }
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool cache) {
  if (cache) {
    h_cache = x.dim(2);
    w_cache = x.dim(3);
  }
  Tensor y({x.dim(0), x.dim(1)});
  kernels::global_avg_pool_forward(x.ptr(), y.ptr(), x.dim(0), x.dim(1), x.dim(2), x.dim(3));
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
  Tensor dx({dy.dim(0), dy.dim(1), h_cache, w_cache});
  kernels::global_avg_pool_backward(dy.ptr(), dx.ptr(), dy.dim(0), dy.dim(1), h_cache, w_cache);
  return dx;
}

Tensor softmax_rows(const Tensor& scores) {
  Tensor probs(scores.shape);
  const int batch = scores.dim(0), k = scores.dim(1);
  for (int n = 0; n < batch; ++n) {
    const float* row = scores.ptr() + static_cast<int64_t>(n) * k;
    float* out = probs.ptr() + static_cast<int64_t>(n) * k;
    float max_v = row[0];
    for (int i = 1; i < k; ++i) max_v = std::max(max_v, row[i]);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      out[i] = std::exp(row[i] - max_v);
      sum += out[i];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int i = 0; i < k; ++i) out[i] *= inv;
  }
  return probs;
}

namespace {

struct Lerp {
  int lo, hi;
  float w_hi;
};

Lerp half_pixel(int out_index, int in_size) {
  // align_corners=false mapping at scale 2
  float pos = (static_cast<float>(out_index) + 0.5f) / 2.0f - 0.5f;
  pos = std::max(0.0f, std::min(pos, static_cast<float>(in_size - 1)));
  const int lo = static_cast<int>(pos);
  const int hi = std::min(lo + 1, in_size - 1);
  return {lo, hi, pos - static_cast<float>(lo)};
}

}  // namespace

Tensor upsample2x_forward(const Tensor& x) {
  const int batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({batch, ch, h * 2, w * 2});
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const float* src = x.ptr() + (static_cast<int64_t>(n) * ch + c) * h * w;
      float* dst = y.ptr() + (static_cast<int64_t>(n) * ch + c) * h * w * 4;
      for (int r = 0; r < h * 2; ++r) {
        const Lerp lr = half_pixel(r, h);
        for (int col = 0; col < w * 2; ++col) {
          const Lerp lc = half_pixel(col, w);
          const float top = src[lr.lo * w + lc.lo] * (1 - lc.w_hi) + src[lr.lo * w + lc.hi] * lc.w_hi;
          const float bot = src[lr.hi * w + lc.lo] * (1 - lc.w_hi) + src[lr.hi * w + lc.hi] * lc.w_hi;
          dst[r * w * 2 + col] = top * (1 - lr.w_hi) + bot * lr.w_hi;
        }
      }
    }
  }
  return y;
}

Tensor upsample2x_backward(const Tensor& dy, int in_h, int in_w) {
  const int batch = dy.dim(0), ch = dy.dim(1);
  Tensor dx({batch, ch, in_h, in_w});
#pragma omp parallel for collapse(2) schedule(static)
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < ch; ++c) {
      const float* src = dy.ptr() + (static_cast<int64_t>(n) * ch + c) * in_h * in_w * 4;
      float* dst = dx.ptr() + (static_cast<int64_t>(n) * ch + c) * in_h * in_w;
      for (int r = 0; r < in_h * 2; ++r) {
        const Lerp lr = half_pixel(r, in_h);
        for (int col = 0; col < in_w * 2; ++col) {
          const Lerp lc = half_pixel(col, in_w);
          const float g = src[r * in_w * 2 + col];
          dst[lr.lo * in_w + lc.lo] += g * (1 - lr.w_hi) * (1 - lc.w_hi);
          dst[lr.lo * in_w + lc.hi] += g * (1 - lr.w_hi) * lc.w_hi;
          dst[lr.hi * in_w + lc.lo] += g * lr.w_hi * (1 - lc.w_hi);
          dst[lr.hi * in_w + lc.hi] += g * lr.w_hi * lc.w_hi;
        }
      }
    }
  }
  return dx;
}

}  // namespace lesionlab::nn

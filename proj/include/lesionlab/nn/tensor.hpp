#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

namespace lesionlab::nn {

// Dense float32 tensor, row-major; 4-D activations use NCHW.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0f) {}

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return s.empty() ? 0 : n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  void zero() { std::fill(data.begin(), data.end(), 0.0f); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

}  // namespace lesionlab::nn

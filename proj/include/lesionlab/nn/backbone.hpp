#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "lesionlab/nn/layers.hpp"

namespace lesionlab::nn {

// Sequential conv-bn-relu feature extractor. Both engines train it and the
// segmenter can adopt a classifier-trained copy, so layer names must match
// between the two; they are derived purely from block position.
class Backbone {
 public:
  struct BlockSpec {
    int out_ch;
    int stride;
  };

  Backbone(std::string id, int in_channels, const std::vector<BlockSpec>& blocks, Rng& rng);

  Tensor forward(const Tensor& x, bool train, bool cache = true);
  Tensor backward(const Tensor& dy);
  void visit(const std::string& prefix, ParamList& out);

  const std::string& id() const { return id_; }
  int out_channels() const { return out_channels_; }
  int out_stride() const { return out_stride_; }
  int64_t parameter_count() const;

 private:
  std::string id_;
  int out_channels_;
  int out_stride_;
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm2d> bns_;
  std::vector<ReLU> relus_;
};

class BackboneRegistry {
 public:
  using Factory = std::function<std::unique_ptr<Backbone>(Rng&)>;

  static BackboneRegistry& instance();

  void add(const std::string& id, Factory factory);
  bool has(const std::string& id) const;
  std::unique_ptr<Backbone> create(const std::string& id, Rng& rng) const;  // UnknownBackbone
  std::vector<std::string> ids() const;

 private:
  BackboneRegistry();
  std::map<std::string, Factory> factories_;
};

}  // namespace lesionlab::nn

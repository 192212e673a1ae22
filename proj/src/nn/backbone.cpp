#include "lesionlab/nn/backbone.hpp"

#include "lesionlab/error.hpp"

namespace lesionlab::nn {

Backbone::Backbone(std::string id, int in_channels, const std::vector<BlockSpec>& blocks, Rng& rng)
    : id_(std::move(id)) {
  int ch = in_channels;
  int stride = 1;
  for (const auto& block : blocks) {
    convs_.emplace_back(ch, block.out_ch, 3, block.stride, 1);
    convs_.back().init_he(rng);
    bns_.emplace_back(block.out_ch);
    relus_.emplace_back();
    ch = block.out_ch;
    stride *= block.stride;
  }
  out_channels_ = ch;
  out_stride_ = stride;
}

Tensor Backbone::forward(const Tensor& x, bool train, bool cache) {
  Tensor h = x;
  for (size_t i = 0; i < convs_.size(); ++i) {
    h = convs_[i].forward(h, cache);
    h = bns_[i].forward(h, train, cache);
    h = relus_[i].forward(h, cache);
  }
  return h;
}

Tensor Backbone::backward(const Tensor& dy) {
  Tensor g = dy;
  for (size_t i = convs_.size(); i-- > 0;) {
    g = relus_[i].backward(g);
    g = bns_[i].backward(g);
    g = convs_[i].backward(g);
  }
  return g;
}

void Backbone::visit(const std::string& prefix, ParamList& out) {
  for (size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].visit(prefix + ".conv" + std::to_string(i), out);
    bns_[i].visit(prefix + ".bn" + std::to_string(i), out);
  }
}

int64_t Backbone::parameter_count() const {
  int64_t n = 0;
  for (const auto& conv : convs_) n += conv.weight.numel() + conv.bias.numel();
  for (const auto& bn : bns_) {
    n += bn.weight.numel() + bn.bias.numel() + bn.running_mean.numel() + bn.running_var.numel();
  }
  return n;
}

BackboneRegistry& BackboneRegistry::instance() {
  static BackboneRegistry registry;
  return registry;
}

BackboneRegistry::BackboneRegistry() {
  // Desk-scale defaults: small enough to train on CPU in minutes.
  add("tiny8", [](Rng& rng) {
    return std::make_unique<Backbone>(
        "tiny8", 3,
        std::vector<Backbone::BlockSpec>{
            {16, 1}, {16, 2}, {32, 1}, {32, 2}, {64, 1}, {64, 2}, {64, 1}, {64, 1}},
        rng);
  });
  add("tiny4", [](Rng& rng) {
    return std::make_unique<Backbone>(
        "tiny4", 3, std::vector<Backbone::BlockSpec>{{16, 2}, {32, 2}, {48, 2}, {48, 1}}, rng);
  });
}

void BackboneRegistry::add(const std::string& id, Factory factory) {
  factories_[id] = std::move(factory);
}

bool BackboneRegistry::has(const std::string& id) const { return factories_.count(id) > 0; }

std::unique_ptr<Backbone> BackboneRegistry::create(const std::string& id, Rng& rng) const {
  auto it = factories_.find(id);
  if (it == factories_.end()) {
    raise(Err::UnknownBackbone, "no backbone registered under id '" + id + "'");
  }
  return it->second(rng);
}

std::vector<std::string> BackboneRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, factory] : factories_) out.push_back(id);
  return out;
}

}  // namespace lesionlab::nn

#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "lesionlab/nn/tensor.hpp"

namespace lesionlab::nn {

// Single-file container shared by the classifier and the segmenter: weight
// blobs keyed by layer name, a JSON config snapshot and a JSON training log.
struct Checkpoint {
  nlohmann::json meta;  // {"kind":..., "config":..., "log":[...]}
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);  // CheckpointUnreadable

}  // namespace lesionlab::nn

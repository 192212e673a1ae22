#pragma once

#include <vector>

#include "lesionlab/nn/layers.hpp"

namespace lesionlab::nn {

struct OptimConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int lr_step_epochs = 0;   // 0 disables step decay
  double lr_gamma = 0.1;
};

class SgdMomentum {
 public:
  SgdMomentum(ParamList params, OptimConfig config);

  void zero_grad();
  void step();
  void set_epoch(int epoch);  // applies step decay
  double current_lr() const { return lr_; }

 private:
  ParamList params_;
  OptimConfig config_;
  double lr_;
  std::vector<Tensor> velocity_;
};

}  // namespace lesionlab::nn

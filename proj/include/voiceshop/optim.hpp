#pragma once

#include <vector>

#include "voiceshop/tensor.hpp"

namespace vs::num {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg);

  // Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// Rescales accumulated gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

}  // namespace vs::num

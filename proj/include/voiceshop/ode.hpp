#pragma once

#include <functional>
#include <vector>

#include "voiceshop/tensor.hpp"

namespace vs::num {

struct OdeSolverConfig {
  double rtol = 1e-5;
  double atol = 1e-5;
  int max_steps = 10000;
  double initial_step = 1e-2;

  void validate() const;
};

// dz/dt = f(z, t). The returned tensor must have the shape of z.
using Dynamics = std::function<Tensor(const Tensor& z, double t)>;

struct OdeResult {
  Tensor state;
  int steps = 0;     // accepted steps
  int rejected = 0;  // rejected trial steps
  int evaluations = 0;
};

/// Adaptive Dormand-Prince 5(4) integration from t0 to t1 (t1 < t0 integrates
/// backwards). Every stage is built from Tensor ops, so when z0 or the dynamics
/// carry gradients the whole solve is differentiable (step sizes are chosen
/// from values only).
///
/// Throws DivergenceError when more than cfg.max_steps trial steps are needed
/// and NumericError when the state becomes non-finite.
OdeResult dopri5_integrate(const Dynamics& f, const Tensor& z0, double t0, double t1,
                           const OdeSolverConfig& cfg = {});

struct OdePath {
  std::vector<Tensor> states;  // one per requested time, states[0] == z0
  int steps = 0;
};

// Integrates through successive times (monotone in either direction), keeping
// the state at each one.
OdePath dopri5_path(const Dynamics& f, const Tensor& z0, const std::vector<double>& times,
                    const OdeSolverConfig& cfg = {});

}  // namespace vs::num

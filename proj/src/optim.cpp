#include "voiceshop/optim.hpp"

#include <cmath>

namespace vs::num {

Adam::Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Node& node = *params_[i].second.node();
    if (node.grad.empty()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < node.value.size(); ++j) {
      double g = node.grad[j];
      m[j] = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * g * g;
      double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
      node.value[j] -= cfg_.lr * (update + cfg_.weight_decay * node.value[j]);
    }
  }
  zero_grad();
}

void Adam::zero_grad() { zero_grads(params_); }

double clip_grad_norm(const ParamList& params, double max_norm) {
  double total = 0;
  for (const auto& [name, p] : params)
    for (double g : p.node()->grad) total += g * g;
  total = std::sqrt(total);
  if (total > max_norm && total > 0) {
    double s = max_norm / total;
    for (const auto& [name, p] : params)
      for (double& g : p.node()->grad) g *= s;
  }
  return total;
}

}  // namespace vs::num

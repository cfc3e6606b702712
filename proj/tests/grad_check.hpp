#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "voiceshop/layers.hpp"
#include "voiceshop/tensor.hpp"

namespace vs::testing {

inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, ref = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    ref += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-8);
}

// Reverse-mode gradient of f at x versus the central-difference oracle.
inline double check_gradient(const std::function<num::Tensor(const num::Tensor&)>& f, const num::Tensor& x,
                             double h = 1e-5) {
  num::Tensor leaf = x.clone_leaf(true);
  num::Tensor loss = f(leaf);
  auto ad = num::gradients(loss, {leaf})[0];
  auto fd = num::finite_diff_gradient([&](const num::Tensor& p) { return f(p).item(); }, x, h);
  return rel_error(ad, fd);
}

using namespace vs::num;

// Every differentiable primitive with its input shape; `positive` inputs are
// shifted away from zero before use.
struct Primitive {
  const char* name;
  num::Shape shape;
  bool positive;
  std::function<num::Tensor(const num::Tensor&, num::Rng&)> build;  // returns a non-scalar or scalar; weighted below
};

inline std::vector<Primitive> primitives() {
  auto other = [](Shape s, Rng& rng) { return Tensor::randn(std::move(s), rng); };
  return {
      {"add", {3, 4}, false, [=](const Tensor& x, Rng& r) { return add(x, other({3, 4}, r)); }},
      {"add_bcast_col", {3, 1}, false, [=](const Tensor& x, Rng& r) { return add(other({3, 4}, r), x); }},
      {"add_bcast_row", {1, 4}, false, [=](const Tensor& x, Rng& r) { return add(other({3, 4}, r), x); }},
      {"sub", {3, 4}, false, [=](const Tensor& x, Rng& r) { return sub(other({3, 4}, r), x); }},
      {"mul", {3, 4}, false, [=](const Tensor& x, Rng& r) { return mul(x, other({3, 4}, r)); }},
      {"mul_self", {3, 4}, false, [](const Tensor& x, Rng&) { return mul(x, x); }},
      {"mul_bcast", {3, 1}, false, [=](const Tensor& x, Rng& r) { return mul(other({3, 4}, r), x); }},
      {"div", {3, 4}, true, [=](const Tensor& x, Rng& r) { return div(other({3, 4}, r), add_scalar(x, 0.5)); }},
      {"scale", {5}, false, [](const Tensor& x, Rng&) { return scale(x, -1.7); }},
      {"tanh", {5}, false, [](const Tensor& x, Rng&) { return tanh(x); }},
      {"sigmoid", {5}, false, [](const Tensor& x, Rng&) { return sigmoid(x); }},
      {"relu", {5}, false, [](const Tensor& x, Rng&) { return relu(x); }},
      {"silu", {5}, false, [](const Tensor& x, Rng&) { return silu(x); }},
      {"softplus", {5}, false, [](const Tensor& x, Rng&) { return softplus(x); }},
      {"exp", {5}, false, [](const Tensor& x, Rng&) { return exp(x); }},
      {"log", {5}, true, [](const Tensor& x, Rng&) { return log(add_scalar(x, 0.1)); }},
      {"sin", {5}, false, [](const Tensor& x, Rng&) { return sin(x); }},
      {"cos", {5}, false, [](const Tensor& x, Rng&) { return cos(x); }},
      {"square", {5}, false, [](const Tensor& x, Rng&) { return square(x); }},
      {"sqrt", {5}, true, [](const Tensor& x, Rng&) { return sqrt(add_scalar(x, 0.1)); }},
      {"abs", {5}, false, [](const Tensor& x, Rng&) { return abs(x); }},
      {"sum_axis0", {3, 4}, false, [](const Tensor& x, Rng&) { return square(sum(x, 0)); }},
      {"sum_axis1", {3, 4}, false, [](const Tensor& x, Rng&) { return square(sum(x, 1)); }},
      {"mean", {3, 4}, false, [](const Tensor& x, Rng&) { return square(mean(x)); }},
      {"matmul_left", {3, 4}, false, [=](const Tensor& x, Rng& r) { return matmul(x, other({4, 2}, r)); }},
      {"matmul_right", {4, 2}, false, [=](const Tensor& x, Rng& r) { return matmul(other({3, 4}, r), x); }},
      {"transpose", {3, 4}, false, [=](const Tensor& x, Rng& r) { return matmul(transpose(x), other({3, 2}, r)); }},
      {"reshape", {3, 4}, false, [=](const Tensor& x, Rng& r) { return mul(reshape(x, {2, 6}), other({2, 6}, r)); }},
      {"concat0", {2, 3}, false, [=](const Tensor& x, Rng& r) { return square(concat({x, other({1, 3}, r), x}, 0)); }},
      {"concat1", {2, 3}, false, [=](const Tensor& x, Rng& r) { return square(concat({other({2, 2}, r), x}, 1)); }},
      {"slice0", {4, 3}, false, [](const Tensor& x, Rng&) { return square(slice(x, 0, 1, 3)); }},
      {"slice1", {4, 3}, false, [](const Tensor& x, Rng&) { return square(slice(x, 1, 1, 3)); }},
      {"softmax0", {4, 3}, false, [](const Tensor& x, Rng&) { return softmax(x, 0); }},
      {"softmax1", {4, 3}, false, [](const Tensor& x, Rng&) { return softmax(x, 1); }},
      {"log_softmax", {4, 3}, false, [](const Tensor& x, Rng&) { return log_softmax(x, 0); }},
      {"normalize0", {5, 3}, false, [](const Tensor& x, Rng&) { return normalize(x, 0); }},
      {"normalize1", {3, 5}, false, [](const Tensor& x, Rng&) { return normalize(x, 1); }},
      {"conv1d_input", {3, 9}, false,
       [=](const Tensor& x, Rng& r) {
         Tensor w = other({2, 9}, r), b = other({2, 1}, r);
         return conv1d(x, w, &b, 3, 2);
       }},
      {"conv1d_weight", {2, 9}, false, [=](const Tensor& w, Rng& r) { return conv1d(other({3, 7}, r), w, nullptr, 3); }},
      {"conv1d_causal", {1, 11}, false,
       [=](const Tensor& x, Rng& r) { return conv1d(x, other({4, 5}, r), nullptr, 5, 1, 4, 0); }},
      {"depthwise_conv", {3, 8}, false,
       [=](const Tensor& x, Rng& r) {
         Tensor w = other({3, 5}, r);
         return depthwise_conv1d(x, w, nullptr, 5);
       }},
      {"depthwise_weight", {3, 5}, false, [=](const Tensor& w, Rng& r) { return depthwise_conv1d(other({3, 8}, r), w, nullptr, 5); }},
      {"repeat_cols", {2, 3}, false, [](const Tensor& x, Rng&) { return square(repeat_cols(x, 4)); }},
      {"avg_pool", {2, 8}, false, [](const Tensor& x, Rng&) { return square(avg_pool_cols(x, 2)); }},
      {"grad_reverse", {4}, false, [](const Tensor& x, Rng&) { return scale(square(grad_reverse(x, 1.0)), 1.0); }},
      {"bce", {6}, false,
       [](const Tensor& x, Rng& r) {
         std::vector<double> y(6);
         for (auto& v : y) v = r.uniform() < 0.5 ? 0.0 : 1.0;
         return binary_cross_entropy(sigmoid(x), Tensor::vector(y));
       }},
  };
}

}  // namespace vs::testing

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "voiceshop/rng.hpp"

namespace vs::num {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Receives the gradient flowing into `self` and adds into the gradient buffers
// of its parents. parent_grads[i] is null when parent i does not need a gradient.
using BackwardFn = std::function<void(const Node& self, const double* out_grad, double* const* parent_grads)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // accumulated by backward() on leaves only
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  BackwardFn backward;
};

/// Dense row-major tensor of doubles with reverse-mode autodiff.
///
/// A Tensor is a shared handle: copies alias the same storage and graph node.
/// Rank-0 and rank-1 tensors behave as (1,1) and (n,1) matrices in ops that
/// need two dimensions.
class Tensor {
 public:
  Tensor();
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> values);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->value; }
  // Mutating values is only meaningful on leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  double item() const;
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return !node_->backward; }

  // Accumulated gradient; all zeros when nothing has been accumulated yet.
  std::vector<double> grad() const;
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no graph attached.
  Tensor detach() const;
  Tensor clone_leaf(bool requires_grad) const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

using NamedTensor = std::pair<std::string, Tensor>;
using ParamList = std::vector<NamedTensor>;

void zero_grads(const ParamList& params);

/// Accumulates d(loss)/d(leaf) into every leaf that requires grad.
/// Throws ContractError when loss is not a scalar.
void backward(const Tensor& loss);

/// Gradients of a scalar with respect to the given tensors, without touching
/// any accumulated leaf gradient. Unreachable inputs get zeros.
std::vector<std::vector<double>> gradients(const Tensor& loss, const std::vector<Tensor>& inputs);

bool grad_enabled();

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Re-enables recording inside a NoGradGuard scope, e.g. for local Jacobian probes.
class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- elementwise (binary ops broadcast over size-1 rows/cols) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// axis 0 reduces over rows -> (1, C); axis 1 reduces over cols -> (R, 1).
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);

// ---- linear algebra / layout ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);

// ---- normalization / probabilities ----
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
// Zero-mean unit-variance along `axis` (0: each column, 1: each row).
Tensor normalize(const Tensor& x, int axis, double eps = 1e-5);

// ---- sequence ops on (channels, length) matrices ----
// weight is (C_out, C_in * kernel). Negative pads mean "same" padding.
Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor* bias, std::size_t kernel,
              std::size_t dilation = 1, long pad_left = -1, long pad_right = -1);
// weight is (C, kernel); one filter per channel.
Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor* bias, std::size_t kernel);
Tensor repeat_cols(const Tensor& x, std::size_t factor);
Tensor avg_pool_cols(const Tensor& x, std::size_t factor);

// ---- training helpers ----
// Identity forward; gradient multiplied by `coeff` on the way back.
Tensor grad_reverse(const Tensor& x, double coeff = -1.0);
// Mean binary cross-entropy on probabilities clamped to [eps, 1 - eps].
Tensor binary_cross_entropy(const Tensor& prob, const Tensor& target, double eps = 1e-7);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor mae(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }
inline Tensor operator-(const Tensor& x, double s) { return add_scalar(x, -s); }

/// Central-difference gradient of a scalar function, one coordinate at a time.
/// Evaluates f under NoGradGuard; x is not modified.
std::vector<double> finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                         double h = 1e-5);

bool all_finite(std::span<const double> v);

}  // namespace vs::num

#include "voiceshop/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "voiceshop/errors.hpp"

namespace vs::num {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

std::size_t rows_of(const Shape& s) {
  if (s.empty()) return 1;
  return s[0];
}

std::size_t cols_of(const Shape& s) {
  if (s.size() < 2) return 1;
  std::size_t c = 1;
  for (std::size_t i = 1; i < s.size(); ++i) c *= s[i];
  return c;
}

// Creates the result node; attaches parents/backward only when recording and
// some parent needs a gradient.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

// Broadcast geometry of a binary op on (R, C) views.
struct Broadcast {
  std::size_t R, C, ar, ac, br, bc;
  Shape out_shape;
  bool same;
};

Broadcast broadcast_of(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast g{};
  g.ar = a.rows();
  g.ac = a.cols();
  g.br = b.rows();
  g.bc = b.cols();
  auto dim = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw ContractError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
  };
  g.R = dim(g.ar, g.br);
  g.C = dim(g.ac, g.bc);
  g.same = (g.ar == g.br && g.ac == g.bc);
  if (g.ar == g.R && g.ac == g.C)
    g.out_shape = a.shape();
  else if (g.br == g.R && g.bc == g.C)
    g.out_shape = b.shape();
  else
    g.out_shape = {g.R, g.C};
  return g;
}

inline std::size_t bidx(std::size_t r, std::size_t c, std::size_t nr, std::size_t nc) {
  return (nr == 1 ? 0 : r) * nc + (nc == 1 ? 0 : c);
}

template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  Broadcast g = broadcast_of(a, b, name);
  std::vector<double> out(g.R * g.C);
  const auto& av = a.values();
  const auto& bv = b.values();
  if (g.same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t r = 0; r < g.R; ++r)
      for (std::size_t c = 0; c < g.C; ++c)
        out[r * g.C + c] = f(av[bidx(r, c, g.ar, g.ac)], bv[bidx(r, c, g.br, g.bc)]);
  }
  return make_result(g.out_shape, std::move(out), {a.node(), b.node()},
                     [g, da, db](const Node& self, const double* go, double* const* pg) {
                       const auto& av = self.parents[0]->value;
                       const auto& bv = self.parents[1]->value;
                       for (std::size_t r = 0; r < g.R; ++r) {
                         for (std::size_t c = 0; c < g.C; ++c) {
                           std::size_t o = r * g.C + c;
                           std::size_t ia = bidx(r, c, g.ar, g.ac);
                           std::size_t ib = bidx(r, c, g.br, g.bc);
                           if (pg[0]) pg[0][ia] += go[o] * da(av[ia], bv[ib], self.value[o]);
                           if (pg[1]) pg[1][ib] += go[o] * db(av[ia], bv[ib], self.value[o]);
                         }
                       }
                     });
}

// d(out)/d(x) expressed through (x, y=f(x)).
template <class F, class D>
Tensor unary(const Tensor& x, F f, D d) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), {x.node()}, [d](const Node& self, const double* go, double* const* pg) {
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) pg[0][i] += go[i] * d(xv[i], self.value[i]);
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor() : node_(std::make_shared<Node>()) { node_->value.assign(1, 0.0); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double v) {
  auto node = std::make_shared<Node>();
  node->value.assign(shape_numel(shape), v);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size())
    throw ContractError("Tensor::from: shape " + shape_str(shape) + " does not match " +
                        std::to_string(values.size()) + " values");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v) { return from({}, {v}); }

Tensor Tensor::vector(std::vector<double> values) {
  std::size_t n = values.size();
  return from({n}, std::move(values));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return from(std::move(shape), std::move(v));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return from(std::move(shape), std::move(v));
}

std::size_t Tensor::rows() const { return rows_of(node_->shape); }
std::size_t Tensor::cols() const { return cols_of(node_->shape); }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
  return *this;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const { return from(shape(), values()); }

Tensor Tensor::clone_leaf(bool requires_grad) const {
  Tensor t = detach();
  t.node_->requires_grad = requires_grad;
  return t;
}

void zero_grads(const ParamList& params) {
  for (const auto& [name, t] : params) t.node()->grad.clear();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------- backward

namespace {

// Post-order over the nodes that require grad, iteratively (ODE tapes get deep).
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen[root] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen[p] = true;
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

// Runs the reverse sweep; returns per-node gradient buffers keyed by node.
std::unordered_map<Node*, std::vector<double>> reverse_sweep(const Tensor& loss,
                                                             const std::vector<Tensor>* keep = nullptr) {
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  std::unordered_map<Node*, std::vector<double>> grads;
  Node* root = loss.node().get();
  if (!root->requires_grad) return grads;
  std::vector<Node*> order = topo_order(root);
  grads[root] = {1.0};
  std::vector<double*> pg;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    pg.assign(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      Node* p = node->parents[i].get();
      if (!p->requires_grad) continue;
      auto& buf = grads[p];
      if (buf.empty()) buf.assign(p->value.size(), 0.0);
      pg[i] = buf.data();
    }
    // grads[] may rehash above; look the output buffer up again.
    const std::vector<double>& go = grads[node];
    node->backward(*node, go.data(), pg.data());
    bool kept = false;
    if (keep)
      for (const auto& k : *keep) kept = kept || k.node().get() == node;
    if (!kept) grads.erase(node);
  }
  return grads;
}

}  // namespace

void backward(const Tensor& loss) {
  auto grads = reverse_sweep(loss);
  for (auto& [node, g] : grads) {
    if (node->backward || !node->requires_grad) continue;
    if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
  }
}

std::vector<std::vector<double>> gradients(const Tensor& loss, const std::vector<Tensor>& inputs) {
  auto grads = reverse_sweep(loss, &inputs);
  std::vector<std::vector<double>> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = grads.find(in.node().get());
    if (it == grads.end())
      out.emplace_back(in.numel(), 0.0);
    else
      out.push_back(it->second);
  }
  return out;
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double s) {
  return unary(
      x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 30 ? v : std::log1p(std::exp(v)); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sin(const Tensor& x) {
  return unary(
      x, [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); });
}

Tensor cos(const Tensor& x) {
  return unary(
      x, [](double v) { return std::cos(v); }, [](double v, double) { return -std::sin(v); });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.values()) s += v;
  return make_result({}, {s}, {x.node()}, [](const Node& self, const double* go, double* const* pg) {
    std::size_t n = self.parents[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) pg[0][i] += go[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum(const Tensor& x, int axis) {
  const std::size_t R = x.rows(), C = x.cols();
  const auto& xv = x.values();
  if (axis == 0) {
    std::vector<double> out(C, 0.0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) out[c] += xv[r * C + c];
    return make_result({1, C}, std::move(out), {x.node()}, [R, C](const Node&, const double* go, double* const* pg) {
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) pg[0][r * C + c] += go[c];
    });
  }
  if (axis == 1) {
    std::vector<double> out(R, 0.0);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) out[r] += xv[r * C + c];
    return make_result({R, 1}, std::move(out), {x.node()}, [R, C](const Node&, const double* go, double* const* pg) {
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) pg[0][r * C + c] += go[r];
    });
  }
  throw ContractError("sum: axis must be 0 or 1");
}

Tensor mean(const Tensor& x, int axis) {
  double n = static_cast<double>(axis == 0 ? x.rows() : x.cols());
  return scale(sum(x, axis), 1.0 / n);
}

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ContractError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  MapMat(out.data(), m, n).noalias() = CMapMat(a.values().data(), m, k) * CMapMat(b.values().data(), k, n);
  Shape shape = b.rank() == 1 ? Shape{m} : Shape{m, n};
  return make_result(shape, std::move(out), {a.node(), b.node()},
                     [m, k, n](const Node& self, const double* go, double* const* pg) {
                       CMapMat G(go, m, n);
                       if (pg[0]) {
                         MapMat(pg[0], m, k).noalias() += G * CMapMat(self.parents[1]->value.data(), k, n).transpose();
                       }
                       if (pg[1]) {
                         MapMat(pg[1], k, n).noalias() += CMapMat(self.parents[0]->value.data(), m, k).transpose() * G;
                       }
                     });
}

Tensor transpose(const Tensor& x) {
  const std::size_t R = x.rows(), C = x.cols();
  std::vector<double> out(R * C);
  MapMat(out.data(), C, R) = CMapMat(x.values().data(), R, C).transpose();
  return make_result({C, R}, std::move(out), {x.node()}, [R, C](const Node&, const double* go, double* const* pg) {
    MapMat(pg[0], R, C) += CMapMat(go, C, R).transpose();
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ContractError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  return make_result(std::move(shape), x.values(), {x.node()}, [](const Node& self, const double* go, double* const* pg) {
    std::size_t n = self.value.size();
    for (std::size_t i = 0; i < n; ++i) pg[0][i] += go[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  std::vector<NodePtr> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(p.node());
  if (axis == 0) {
    const std::size_t C = parts[0].cols();
    std::size_t R = 0;
    bool all_vec = true;
    for (const auto& p : parts) {
      if (p.cols() != C) throw ContractError("concat(axis 0): column counts differ");
      R += p.rows();
      all_vec = all_vec && p.rank() == 1;
    }
    std::vector<double> out;
    out.reserve(R * C);
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    Shape shape = all_vec ? Shape{R} : Shape{R, C};
    return make_result(shape, std::move(out), std::move(nodes), [](const Node& self, const double* go, double* const* pg) {
      std::size_t off = 0;
      for (std::size_t i = 0; i < self.parents.size(); ++i) {
        std::size_t n = self.parents[i]->value.size();
        if (pg[i])
          for (std::size_t j = 0; j < n; ++j) pg[i][j] += go[off + j];
        off += n;
      }
    });
  }
  if (axis == 1) {
    const std::size_t R = parts[0].rows();
    std::size_t C = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      if (p.rows() != R) throw ContractError("concat(axis 1): row counts differ");
      widths.push_back(p.cols());
      C += p.cols();
    }
    std::vector<double> out(R * C);
    std::size_t c0 = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const auto& v = parts[i].values();
      for (std::size_t r = 0; r < R; ++r)
        std::copy_n(v.begin() + r * widths[i], widths[i], out.begin() + r * C + c0);
      c0 += widths[i];
    }
    return make_result({R, C}, std::move(out), std::move(nodes),
                       [R, C, widths](const Node&, const double* go, double* const* pg) {
                         std::size_t c0 = 0;
                         for (std::size_t i = 0; i < widths.size(); ++i) {
                           if (pg[i])
                             for (std::size_t r = 0; r < R; ++r)
                               for (std::size_t c = 0; c < widths[i]; ++c) pg[i][r * widths[i] + c] += go[r * C + c0 + c];
                           c0 += widths[i];
                         }
                       });
  }
  throw ContractError("concat: axis must be 0 or 1");
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t R = x.rows(), C = x.cols();
  const auto& xv = x.values();
  if (axis == 0) {
    if (begin > end || end > R) throw ContractError("slice(axis 0): range out of bounds");
    std::vector<double> out(xv.begin() + begin * C, xv.begin() + end * C);
    Shape shape = x.rank() == 1 ? Shape{end - begin} : Shape{end - begin, C};
    return make_result(shape, std::move(out), {x.node()}, [begin, C](const Node& self, const double* go, double* const* pg) {
      std::size_t n = self.value.size();
      for (std::size_t i = 0; i < n; ++i) pg[0][begin * C + i] += go[i];
    });
  }
  if (axis == 1) {
    if (begin > end || end > C) throw ContractError("slice(axis 1): range out of bounds");
    const std::size_t W = end - begin;
    std::vector<double> out(R * W);
    for (std::size_t r = 0; r < R; ++r) std::copy_n(xv.begin() + r * C + begin, W, out.begin() + r * W);
    return make_result({R, W}, std::move(out), {x.node()}, [R, C, W, begin](const Node&, const double* go, double* const* pg) {
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < W; ++c) pg[0][r * C + begin + c] += go[r * W + c];
    });
  }
  throw ContractError("slice: axis must be 0 or 1");
}

// ---------------------------------------------------------------- normalization

namespace {

// Iterates groups along an axis: group g has `len` elements at base + i*stride.
struct AxisGroups {
  std::size_t groups, len, group_step, stride;
};

AxisGroups axis_groups(const Tensor& x, int axis) {
  const std::size_t R = x.rows(), C = x.cols();
  if (axis == 0) return {C, R, 1, C};
  if (axis == 1) return {R, C, C, 1};
  throw ContractError("axis must be 0 or 1");
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  AxisGroups g = axis_groups(x, axis);
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t k = 0; k < g.groups; ++k) {
    std::size_t base = k * g.group_step;
    double mx = -INFINITY;
    for (std::size_t i = 0; i < g.len; ++i) mx = std::max(mx, xv[base + i * g.stride]);
    double s = 0;
    for (std::size_t i = 0; i < g.len; ++i) s += (out[base + i * g.stride] = std::exp(xv[base + i * g.stride] - mx));
    for (std::size_t i = 0; i < g.len; ++i) out[base + i * g.stride] /= s;
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [g](const Node& self, const double* go, double* const* pg) {
    const auto& y = self.value;
    for (std::size_t k = 0; k < g.groups; ++k) {
      std::size_t base = k * g.group_step;
      double dot = 0;
      for (std::size_t i = 0; i < g.len; ++i) dot += go[base + i * g.stride] * y[base + i * g.stride];
      for (std::size_t i = 0; i < g.len; ++i) {
        std::size_t j = base + i * g.stride;
        pg[0][j] += y[j] * (go[j] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  AxisGroups g = axis_groups(x, axis);
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t k = 0; k < g.groups; ++k) {
    std::size_t base = k * g.group_step;
    double mx = -INFINITY;
    for (std::size_t i = 0; i < g.len; ++i) mx = std::max(mx, xv[base + i * g.stride]);
    double s = 0;
    for (std::size_t i = 0; i < g.len; ++i) s += std::exp(xv[base + i * g.stride] - mx);
    double lse = mx + std::log(s);
    for (std::size_t i = 0; i < g.len; ++i) out[base + i * g.stride] = xv[base + i * g.stride] - lse;
  }
  return make_result(x.shape(), std::move(out), {x.node()}, [g](const Node& self, const double* go, double* const* pg) {
    const auto& y = self.value;
    for (std::size_t k = 0; k < g.groups; ++k) {
      std::size_t base = k * g.group_step;
      double total = 0;
      for (std::size_t i = 0; i < g.len; ++i) total += go[base + i * g.stride];
      for (std::size_t i = 0; i < g.len; ++i) {
        std::size_t j = base + i * g.stride;
        pg[0][j] += go[j] - std::exp(y[j]) * total;
      }
    }
  });
}

Tensor normalize(const Tensor& x, int axis, double eps) {
  AxisGroups g = axis_groups(x, axis);
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> inv_std(g.groups);
  const double n = static_cast<double>(g.len);
  for (std::size_t k = 0; k < g.groups; ++k) {
    std::size_t base = k * g.group_step;
    double m = 0;
    for (std::size_t i = 0; i < g.len; ++i) m += xv[base + i * g.stride];
    m /= n;
    double var = 0;
    for (std::size_t i = 0; i < g.len; ++i) {
      double d = xv[base + i * g.stride] - m;
      var += d * d;
    }
    var /= n;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[k] = is;
    for (std::size_t i = 0; i < g.len; ++i) out[base + i * g.stride] = (xv[base + i * g.stride] - m) * is;
  }
  return make_result(x.shape(), std::move(out), {x.node()},
                     [g, n, inv_std = std::move(inv_std)](const Node& self, const double* go, double* const* pg) {
                       const auto& y = self.value;
                       for (std::size_t k = 0; k < g.groups; ++k) {
                         std::size_t base = k * g.group_step;
                         double mg = 0, mgy = 0;
                         for (std::size_t i = 0; i < g.len; ++i) {
                           std::size_t j = base + i * g.stride;
                           mg += go[j];
                           mgy += go[j] * y[j];
                         }
                         mg /= n;
                         mgy /= n;
                         for (std::size_t i = 0; i < g.len; ++i) {
                           std::size_t j = base + i * g.stride;
                           pg[0][j] += inv_std[k] * (go[j] - mg - y[j] * mgy);
                         }
                       }
                     });
}

// ---------------------------------------------------------------- sequence ops

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor* bias, std::size_t kernel, std::size_t dilation,
              long pad_left, long pad_right) {
  const std::size_t Cin = x.rows(), L = x.cols();
  const std::size_t Cout = weight.rows();
  if (kernel == 0 || weight.numel() != Cout * Cin * kernel)
    throw ContractError("conv1d: weight " + shape_str(weight.shape()) + " does not match C_in=" + std::to_string(Cin) +
                        " kernel=" + std::to_string(kernel));
  if (bias && bias->numel() != Cout) throw ContractError("conv1d: bias size mismatch");
  const long span = static_cast<long>(dilation * (kernel - 1));
  if (pad_left < 0) pad_left = span / 2;
  if (pad_right < 0) pad_right = span - span / 2;
  const long Lout_l = static_cast<long>(L) + pad_left + pad_right - span;
  if (Lout_l <= 0) throw ContractError("conv1d: input too short for kernel");
  const std::size_t Lout = static_cast<std::size_t>(Lout_l);
  const std::size_t CK = Cin * kernel;

  // im2col: cols[(c*K + k), t] = x[c, t + k*d - pad_left]
  std::vector<double> cols(CK * Lout, 0.0);
  const auto& xv = x.values();
  for (std::size_t c = 0; c < Cin; ++c)
    for (std::size_t k = 0; k < kernel; ++k) {
      long shift = static_cast<long>(k * dilation) - pad_left;
      double* row = cols.data() + (c * kernel + k) * Lout;
      for (std::size_t t = 0; t < Lout; ++t) {
        long src = static_cast<long>(t) + shift;
        if (src >= 0 && src < static_cast<long>(L)) row[t] = xv[c * L + static_cast<std::size_t>(src)];
      }
    }
  std::vector<double> out(Cout * Lout);
  MapMat Y(out.data(), Cout, Lout);
  Y.noalias() = CMapMat(weight.values().data(), Cout, CK) * CMapMat(cols.data(), CK, Lout);
  if (bias)
    for (std::size_t o = 0; o < Cout; ++o) Y.row(o).array() += bias->values()[o];

  std::vector<NodePtr> parents{x.node(), weight.node()};
  if (bias) parents.push_back(bias->node());
  return make_result({Cout, Lout}, std::move(out), std::move(parents),
                     [=, cols = std::move(cols)](const Node& self, const double* go, double* const* pg) {
                       CMapMat G(go, Cout, Lout);
                       if (pg[1]) MapMat(pg[1], Cout, CK).noalias() += G * CMapMat(cols.data(), CK, Lout).transpose();
                       if (self.parents.size() > 2 && pg[2])
                         for (std::size_t o = 0; o < Cout; ++o) pg[2][o] += G.row(o).sum();
                       if (pg[0]) {
                         RowMat dcols = CMapMat(self.parents[1]->value.data(), Cout, CK).transpose() * G;
                         for (std::size_t c = 0; c < Cin; ++c)
                           for (std::size_t k = 0; k < kernel; ++k) {
                             long shift = static_cast<long>(k * dilation) - pad_left;
                             for (std::size_t t = 0; t < Lout; ++t) {
                               long src = static_cast<long>(t) + shift;
                               if (src >= 0 && src < static_cast<long>(L))
                                 pg[0][c * L + static_cast<std::size_t>(src)] += dcols(c * kernel + k, t);
                             }
                           }
                       }
                     });
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor* bias, std::size_t kernel) {
  const std::size_t C = x.rows(), L = x.cols();
  if (weight.numel() != C * kernel) throw ContractError("depthwise_conv1d: weight size mismatch");
  if (bias && bias->numel() != C) throw ContractError("depthwise_conv1d: bias size mismatch");
  const long pad = static_cast<long>(kernel - 1) / 2;
  const auto& xv = x.values();
  const auto& wv = weight.values();
  std::vector<double> out(C * L, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < L; ++t) {
      double s = bias ? bias->values()[c] : 0.0;
      for (std::size_t k = 0; k < kernel; ++k) {
        long src = static_cast<long>(t + k) - pad;
        if (src >= 0 && src < static_cast<long>(L)) s += wv[c * kernel + k] * xv[c * L + static_cast<std::size_t>(src)];
      }
      out[c * L + t] = s;
    }
  std::vector<NodePtr> parents{x.node(), weight.node()};
  if (bias) parents.push_back(bias->node());
  return make_result(x.shape(), std::move(out), std::move(parents),
                     [C, L, kernel, pad](const Node& self, const double* go, double* const* pg) {
                       const auto& xv = self.parents[0]->value;
                       const auto& wv = self.parents[1]->value;
                       for (std::size_t c = 0; c < C; ++c)
                         for (std::size_t t = 0; t < L; ++t) {
                           double g = go[c * L + t];
                           if (self.parents.size() > 2 && pg[2]) pg[2][c] += g;
                           for (std::size_t k = 0; k < kernel; ++k) {
                             long src = static_cast<long>(t + k) - pad;
                             if (src < 0 || src >= static_cast<long>(L)) continue;
                             std::size_t s = c * L + static_cast<std::size_t>(src);
                             if (pg[0]) pg[0][s] += g * wv[c * kernel + k];
                             if (pg[1]) pg[1][c * kernel + k] += g * xv[s];
                           }
                         }
                     });
}

Tensor repeat_cols(const Tensor& x, std::size_t factor) {
  const std::size_t R = x.rows(), C = x.cols();
  const auto& xv = x.values();
  std::vector<double> out(R * C * factor);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C * factor; ++c) out[r * C * factor + c] = xv[r * C + c / factor];
  return make_result({R, C * factor}, std::move(out), {x.node()}, [R, C, factor](const Node&, const double* go, double* const* pg) {
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C * factor; ++c) pg[0][r * C + c / factor] += go[r * C * factor + c];
  });
}

Tensor avg_pool_cols(const Tensor& x, std::size_t factor) {
  const std::size_t R = x.rows(), C = x.cols();
  if (factor == 0 || C % factor != 0)
    throw ContractError("avg_pool_cols: length " + std::to_string(C) + " not divisible by " + std::to_string(factor));
  const std::size_t Co = C / factor;
  const auto& xv = x.values();
  std::vector<double> out(R * Co, 0.0);
  const double inv = 1.0 / static_cast<double>(factor);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * Co + c / factor] += xv[r * C + c] * inv;
  return make_result({R, Co}, std::move(out), {x.node()}, [R, C, Co, factor, inv](const Node&, const double* go, double* const* pg) {
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) pg[0][r * C + c] += go[r * Co + c / factor] * inv;
  });
}

// ---------------------------------------------------------------- training helpers

Tensor grad_reverse(const Tensor& x, double coeff) {
  return make_result(x.shape(), x.values(), {x.node()}, [coeff](const Node& self, const double* go, double* const* pg) {
    std::size_t n = self.value.size();
    for (std::size_t i = 0; i < n; ++i) pg[0][i] += coeff * go[i];
  });
}

Tensor binary_cross_entropy(const Tensor& prob, const Tensor& target, double eps) {
  if (prob.numel() != target.numel()) throw ContractError("binary_cross_entropy: size mismatch");
  const auto& pv = prob.values();
  const auto& yv = target.values();
  const double n = static_cast<double>(pv.size());
  double total = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    double p = std::clamp(pv[i], eps, 1.0 - eps);
    total -= yv[i] * std::log(p) + (1.0 - yv[i]) * std::log(1.0 - p);
  }
  return make_result({}, {total / n}, {prob.node(), target.node()}, [eps, n](const Node& self, const double* go, double* const* pg) {
    const auto& pv = self.parents[0]->value;
    const auto& yv = self.parents[1]->value;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      bool clamped = pv[i] < eps || pv[i] > 1.0 - eps;
      double p = std::clamp(pv[i], eps, 1.0 - eps);
      if (pg[0] && !clamped) pg[0][i] += go[0] * (-(yv[i] / p) + (1.0 - yv[i]) / (1.0 - p)) / n;
      if (pg[1]) pg[1][i] += go[0] * (-std::log(p) + std::log(1.0 - p)) / n;
    }
  });
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }
Tensor mae(const Tensor& a, const Tensor& b) { return mean(abs(sub(a, b))); }

// ---------------------------------------------------------------- utilities

std::vector<double> finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  NoGradGuard guard;
  Tensor probe = x.detach();
  std::vector<double> g(x.numel());
  auto data = probe.mutable_data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    double orig = data[i];
    data[i] = orig + h;
    double fp = f(probe);
    data[i] = orig - h;
    double fm = f(probe);
    data[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace vs::num

#include "voiceshop/layers.hpp"

#include <cmath>

#include "voiceshop/errors.hpp"

namespace vs::nn {

using namespace vs::num;

void append(ParamList& out, const std::string& prefix, const ParamList& inner) {
  for (const auto& [name, t] : inner) out.emplace_back(prefix + "." + name, t);
}

namespace {

Tensor param(Shape shape, Rng& rng, double bound) {
  Tensor t = bound > 0 ? Tensor::uniform(std::move(shape), rng, -bound, bound) : Tensor::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

Tensor constant_param(Shape shape, double v) {
  Tensor t = Tensor::full(std::move(shape), v);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

// ---- Linear

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init)
    : weight(param({out, in}, rng, zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in)))),
      bias(param({out, 1}, rng, 0.0)) {}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.rows() != weight.cols())
    throw ContractError("Linear: expected " + std::to_string(weight.cols()) + " input features, got " +
                        std::to_string(x.rows()));
  return add(matmul(weight, x), bias);
}

ParamList Linear::params() const { return {{"weight", weight}, {"bias", bias}}; }

// ---- Conv1d

Conv1d::Conv1d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng, std::size_t dilation, bool zero_init)
    : weight(param({out, in * kernel}, rng, zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in * kernel)))),
      bias(param({out, 1}, rng, 0.0)),
      kernel(kernel),
      dilation(dilation) {}

Tensor Conv1d::operator()(const Tensor& x) const { return conv1d(x, weight, &bias, kernel, dilation); }

ParamList Conv1d::params() const { return {{"weight", weight}, {"bias", bias}}; }

// ---- norms

LayerNorm::LayerNorm(std::size_t dim) : gamma(constant_param({dim, 1}, 1.0)), beta(constant_param({dim, 1}, 0.0)) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return add(mul(normalize(x, 0), gamma), beta); }

ParamList LayerNorm::params() const { return {{"gamma", gamma}, {"beta", beta}}; }

GroupNorm::GroupNorm(std::size_t channels, std::size_t groups)
    : gamma(constant_param({channels, 1}, 1.0)), beta(constant_param({channels, 1}, 0.0)), groups(groups) {
  if (groups == 0 || channels % groups != 0) throw ContractError("GroupNorm: channels not divisible by groups");
}

Tensor GroupNorm::operator()(const Tensor& x) const {
  const std::size_t C = x.rows(), L = x.cols();
  Tensor g = reshape(x, {groups, (C / groups) * L});
  Tensor n = reshape(normalize(g, 1), {C, L});
  return add(mul(n, gamma), beta);
}

ParamList GroupNorm::params() const { return {{"gamma", gamma}, {"beta", beta}}; }

// ---- recurrent cells

LstmCell::LstmCell(std::size_t in, std::size_t hidden, Rng& rng)
    : weight(param({4 * hidden, in + hidden}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)))),
      bias(param({4 * hidden, 1}, rng, 0.0)),
      hidden(hidden) {
  // forget-gate bias starts at 1
  auto b = bias.mutable_data();
  for (std::size_t i = hidden; i < 2 * hidden; ++i) b[i] = 1.0;
}

LstmState LstmCell::initial(std::size_t batch) const {
  return {Tensor::zeros({hidden, batch}), Tensor::zeros({hidden, batch})};
}

LstmState LstmCell::operator()(const Tensor& x, const LstmState& s) const {
  Tensor gates = add(matmul(weight, concat({x, s.h}, 0)), bias);
  const std::size_t H = hidden;
  Tensor i = sigmoid(slice(gates, 0, 0, H));
  Tensor f = sigmoid(slice(gates, 0, H, 2 * H));
  Tensor g = tanh(slice(gates, 0, 2 * H, 3 * H));
  Tensor o = sigmoid(slice(gates, 0, 3 * H, 4 * H));
  Tensor c = add(mul(f, s.c), mul(i, g));
  return {mul(o, tanh(c)), c};
}

ParamList LstmCell::params() const { return {{"weight", weight}, {"bias", bias}}; }

GruCell::GruCell(std::size_t in, std::size_t hidden, Rng& rng)
    : w_in(param({3 * hidden, in}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)))),
      w_hidden(param({3 * hidden, hidden}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)))),
      b_in(param({3 * hidden, 1}, rng, 0.0)),
      b_hidden(param({3 * hidden, 1}, rng, 0.0)),
      hidden(hidden) {}

Tensor GruCell::operator()(const Tensor& x, const Tensor& h) const {
  const std::size_t H = hidden;
  Tensor gi = add(matmul(w_in, x), b_in);
  Tensor gh = add(matmul(w_hidden, h), b_hidden);
  Tensor r = sigmoid(add(slice(gi, 0, 0, H), slice(gh, 0, 0, H)));
  Tensor z = sigmoid(add(slice(gi, 0, H, 2 * H), slice(gh, 0, H, 2 * H)));
  Tensor n = tanh(add(slice(gi, 0, 2 * H, 3 * H), mul(r, slice(gh, 0, 2 * H, 3 * H))));
  // h' = (1 - z) * n + z * h
  return add(n, mul(z, sub(h, n)));
}

ParamList GruCell::params() const {
  return {{"w_in", w_in}, {"w_hidden", w_hidden}, {"b_in", b_in}, {"b_hidden", b_hidden}};
}

// ---- attention

SelfAttention::SelfAttention(std::size_t dim, std::size_t heads, Rng& rng, bool zero_out)
    : qkv(dim, 3 * dim, rng), out(dim, dim, rng, zero_out), heads(heads) {
  if (heads == 0 || dim % heads != 0) throw ContractError("SelfAttention: dim not divisible by heads");
}

Tensor SelfAttention::operator()(const Tensor& x) const {
  const std::size_t D = x.rows();
  const std::size_t dh = D / heads;
  Tensor proj = qkv(x);  // (3D, T)
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor q = slice(proj, 0, h * dh, (h + 1) * dh);
    Tensor k = slice(proj, 0, D + h * dh, D + (h + 1) * dh);
    Tensor v = slice(proj, 0, 2 * D + h * dh, 2 * D + (h + 1) * dh);
    Tensor scores = scale(matmul(transpose(q), k), inv);  // (T_query, T_key)
    Tensor attn = softmax(scores, 1);
    outs.push_back(matmul(v, transpose(attn)));  // (dh, T_query)
  }
  return out(concat(outs, 0));
}

ParamList SelfAttention::params() const {
  ParamList p;
  append(p, "qkv", qkv.params());
  append(p, "out", out.params());
  return p;
}

}  // namespace vs::nn

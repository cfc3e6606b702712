#pragma once

#include <string>
#include <utility>
#include <vector>

#include "voiceshop/rng.hpp"
#include "voiceshop/tensor.hpp"

// Building blocks shared by the trainable models. Every layer works on
// (features, length) matrices: one column per frame / batch element.
namespace vs::nn {

using num::ParamList;
using num::Rng;
using num::Tensor;

void append(ParamList& out, const std::string& prefix, const ParamList& inner);

struct Linear {
  Tensor weight;  // (out, in)
  Tensor bias;    // (out, 1)

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init = false);
  Tensor operator()(const Tensor& x) const;
  ParamList params() const;
  std::size_t in_features() const { return weight.cols(); }
  std::size_t out_features() const { return weight.rows(); }
};

struct Conv1d {
  Tensor weight;  // (out, in * kernel)
  Tensor bias;    // (out, 1)
  std::size_t kernel = 1;
  std::size_t dilation = 1;

  Conv1d() = default;
  Conv1d(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng, std::size_t dilation = 1,
         bool zero_init = false);
  Tensor operator()(const Tensor& x) const;
  ParamList params() const;
};

// Normalizes each column (frame) over its features.
struct LayerNorm {
  Tensor gamma, beta;  // (dim, 1)

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);
  Tensor operator()(const Tensor& x) const;
  ParamList params() const;
};

struct GroupNorm {
  Tensor gamma, beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(std::size_t channels, std::size_t groups);
  Tensor operator()(const Tensor& x) const;
  ParamList params() const;
};

struct LstmState {
  Tensor h, c;
};

struct LstmCell {
  Tensor weight;  // (4H, in + H), gate order i, f, g, o
  Tensor bias;    // (4H, 1)
  std::size_t hidden = 0;

  LstmCell() = default;
  LstmCell(std::size_t in, std::size_t hidden, Rng& rng);
  LstmState initial(std::size_t batch = 1) const;
  LstmState operator()(const Tensor& x, const LstmState& s) const;
  ParamList params() const;
};

struct GruCell {
  Tensor w_in, w_hidden;  // (3H, in), (3H, H), gate order r, z, n
  Tensor b_in, b_hidden;
  std::size_t hidden = 0;

  GruCell() = default;
  GruCell(std::size_t in, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& h) const;
  ParamList params() const;
};

struct SelfAttention {
  Linear qkv, out;
  std::size_t heads = 1;

  SelfAttention() = default;
  SelfAttention(std::size_t dim, std::size_t heads, Rng& rng, bool zero_out = false);
  Tensor operator()(const Tensor& x) const;
  ParamList params() const;
};

}  // namespace vs::nn

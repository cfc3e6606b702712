#include "voiceshop/bn2bn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "voiceshop/checkpoint.hpp"
#include "voiceshop/errors.hpp"
#include "voiceshop/optim.hpp"

namespace vs::bn2bn {

using namespace vs::num;
using json = nlohmann::json;

namespace {

Tensor leaf_uniform(Shape s, Rng& rng, double bound) {
  Tensor t = Tensor::uniform(std::move(s), rng, -bound, bound);
  t.set_requires_grad(true);
  return t;
}

Tensor dropout(const Tensor& x, double p, Rng* rng) {
  if (!rng || p <= 0) return x;
  std::vector<double> mask(x.numel());
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : mask) m = rng->uniform() < p ? 0.0 : keep;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor column(const Tensor& x, std::size_t t) { return slice(x, 1, t, t + 1); }

}  // namespace

// ---- configuration

void DcaConfig::validate() const {
  if (static_kernel % 2 == 0 || dynamic_kernel % 2 == 0) throw ConfigError("dca: kernels must be odd");
  if (static_channels == 0 || dynamic_channels == 0 || attention_dim == 0)
    throw ConfigError("dca: channels and attention_dim must be positive");
  if (!(alpha > 0) || !(beta > 0)) throw ConfigError("dca: prior shapes must be positive");
}

std::vector<double> beta_binomial_prior(std::size_t n, double alpha, double beta) {
  auto lbeta = [](double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); };
  std::vector<double> p(n + 1);
  const double N = static_cast<double>(n);
  for (std::size_t k = 0; k <= n; ++k) {
    const double K = static_cast<double>(k);
    double lchoose = std::lgamma(N + 1) - std::lgamma(K + 1) - std::lgamma(N - K + 1);
    p[k] = std::exp(lchoose + lbeta(K + alpha, N - K + beta) - lbeta(alpha, beta));
  }
  return p;
}

void Bn2BnConfig::validate() const {
  dca.validate();
  if (accents.empty()) throw ConfigError("bn2bn: at least one accent required");
  for (std::size_t i = 0; i < accents.size(); ++i)
    for (std::size_t j = i + 1; j < accents.size(); ++j)
      if (accents[i] == accents[j]) throw ConfigError("bn2bn: duplicate accent " + accents[i]);
  if (content_dim == 0 || l18_dim == 0 || encoder_dim == 0 || decoder_dim == 0 || prenet_dim == 0)
    throw ConfigError("bn2bn: dimensions must be positive");
  if (heads == 0 || encoder_dim % heads != 0) throw ConfigError("bn2bn: encoder_dim must be divisible by heads");
  if (conv_kernel % 2 == 0 || postnet_kernel % 2 == 0) throw ConfigError("bn2bn: kernels must be odd");
  if (postnet_layers < 1) throw ConfigError("bn2bn: post net needs at least one layer");
  if (prenet_dropout < 0 || prenet_dropout >= 1) throw ConfigError("bn2bn: prenet_dropout must be in [0, 1)");
  if (!(max_len_factor >= 1)) throw ConfigError("bn2bn: max_len_factor must be at least 1");
  if (adversarial && n_languages < 2) throw ConfigError("bn2bn: adversarial training needs two or more languages");
  if (adversarial && classifier_channels.empty()) throw ConfigError("bn2bn: classifier needs a convolution layer");
}

Bn2BnConfig Bn2BnConfig::paper_scale(std::vector<std::string> accents) {
  Bn2BnConfig c;
  c.accents = std::move(accents);
  c.content_dim = 512;
  c.l18_dim = 512;
  c.encoder_dim = 512;
  c.encoder_blocks = 12;
  c.heads = 8;
  c.decoder_dim = 512;
  c.prenet_dim = 256;
  c.postnet_channels = 512;
  c.predictor_blocks = 3;
  c.dca.attention_dim = 512;
  c.classifier_channels = {32, 32, 64, 64, 128, 128};
  c.classifier_gru = 128;
  c.classifier_mlp = 256;
  return c;
}

std::string Bn2BnConfig::to_json() const {
  json j{{"accents", accents},
         {"content_dim", content_dim},
         {"l18_dim", l18_dim},
         {"encoder_dim", encoder_dim},
         {"encoder_blocks", encoder_blocks},
         {"heads", heads},
         {"ff_expansion", ff_expansion},
         {"conv_expansion", conv_expansion},
         {"conv_kernel", conv_kernel},
         {"decoder_dim", decoder_dim},
         {"prenet_dim", prenet_dim},
         {"prenet_dropout", prenet_dropout},
         {"postnet_channels", postnet_channels},
         {"postnet_layers", postnet_layers},
         {"postnet_kernel", postnet_kernel},
         {"predictor_blocks", predictor_blocks},
         {"dca",
          {{"prior_length", dca.prior_length},
           {"alpha", dca.alpha},
           {"beta", dca.beta},
           {"dynamic_channels", dca.dynamic_channels},
           {"dynamic_kernel", dca.dynamic_kernel},
           {"static_channels", dca.static_channels},
           {"static_kernel", dca.static_kernel},
           {"attention_dim", dca.attention_dim}}},
         {"max_len_factor", max_len_factor},
         {"adversarial", adversarial},
         {"n_languages", n_languages},
         {"classifier_channels", classifier_channels},
         {"classifier_gru", classifier_gru},
         {"classifier_mlp", classifier_mlp},
         {"reversal", reversal}};
  return j.dump(2);
}

Bn2BnConfig Bn2BnConfig::from_json(const std::string& text) {
  Bn2BnConfig c;
  try {
    json j = json::parse(text);
    auto get = [&](const json& obj, const char* key, auto& field) {
      if (obj.contains(key)) obj.at(key).get_to(field);
    };
    get(j, "accents", c.accents);
    get(j, "content_dim", c.content_dim);
    get(j, "l18_dim", c.l18_dim);
    get(j, "encoder_dim", c.encoder_dim);
    get(j, "encoder_blocks", c.encoder_blocks);
    get(j, "heads", c.heads);
    get(j, "ff_expansion", c.ff_expansion);
    get(j, "conv_expansion", c.conv_expansion);
    get(j, "conv_kernel", c.conv_kernel);
    get(j, "decoder_dim", c.decoder_dim);
    get(j, "prenet_dim", c.prenet_dim);
    get(j, "prenet_dropout", c.prenet_dropout);
    get(j, "postnet_channels", c.postnet_channels);
    get(j, "postnet_layers", c.postnet_layers);
    get(j, "postnet_kernel", c.postnet_kernel);
    get(j, "predictor_blocks", c.predictor_blocks);
    if (j.contains("dca")) {
      const json& d = j.at("dca");
      get(d, "prior_length", c.dca.prior_length);
      get(d, "alpha", c.dca.alpha);
      get(d, "beta", c.dca.beta);
      get(d, "dynamic_channels", c.dca.dynamic_channels);
      get(d, "dynamic_kernel", c.dca.dynamic_kernel);
      get(d, "static_channels", c.dca.static_channels);
      get(d, "static_kernel", c.dca.static_kernel);
      get(d, "attention_dim", c.dca.attention_dim);
    }
    get(j, "max_len_factor", c.max_len_factor);
    get(j, "adversarial", c.adversarial);
    get(j, "n_languages", c.n_languages);
    get(j, "classifier_channels", c.classifier_channels);
    get(j, "classifier_gru", c.classifier_gru);
    get(j, "classifier_mlp", c.classifier_mlp);
    get(j, "reversal", c.reversal);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bn2bn config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- conformer

ConformerBlock::ConformerBlock(std::size_t dim, std::size_t heads, std::size_t ff_exp, std::size_t conv_exp,
                               std::size_t k, Rng& rng)
    : ff1_norm(dim),
      attn_norm(dim),
      conv_norm(dim),
      ff2_norm(dim),
      out_norm(dim),
      ff1_in(dim, dim * ff_exp, rng),
      ff1_out(dim * ff_exp, dim, rng),
      ff2_in(dim, dim * ff_exp, rng),
      ff2_out(dim * ff_exp, dim, rng),
      attn(dim, heads, rng),
      pw_in(dim, dim * conv_exp, rng),
      pw_out(dim * conv_exp / 2, dim, rng),
      dw_weight(leaf_uniform({dim * conv_exp / 2, k}, rng, 1.0 / std::sqrt(static_cast<double>(k)))),
      dw_bias(Tensor::zeros({dim * conv_exp / 2, 1}).set_requires_grad(true)),
      dw_norm(dim * conv_exp / 2, 1),
      kernel(k) {
  if (conv_exp < 2 || conv_exp % 2 != 0) throw ConfigError("conformer: conv_expansion must be a positive even number");
}

Tensor ConformerBlock::operator()(const Tensor& x) const {
  Tensor h = add(x, scale(ff1_out(silu(ff1_in(ff1_norm(x)))), 0.5));
  h = add(h, attn(attn_norm(h)));
  Tensor c = pw_in(conv_norm(h));
  const std::size_t half = c.rows() / 2;
  c = mul(slice(c, 0, 0, half), sigmoid(slice(c, 0, half, 2 * half)));  // GLU
  c = silu(dw_norm(depthwise_conv1d(c, dw_weight, &dw_bias, kernel)));
  h = add(h, pw_out(c));
  h = add(h, scale(ff2_out(silu(ff2_in(ff2_norm(h)))), 0.5));
  return out_norm(h);
}

ParamList ConformerBlock::params() const {
  ParamList p;
  nn::append(p, "ff1_norm", ff1_norm.params());
  nn::append(p, "attn_norm", attn_norm.params());
  nn::append(p, "conv_norm", conv_norm.params());
  nn::append(p, "ff2_norm", ff2_norm.params());
  nn::append(p, "out_norm", out_norm.params());
  nn::append(p, "ff1_in", ff1_in.params());
  nn::append(p, "ff1_out", ff1_out.params());
  nn::append(p, "ff2_in", ff2_in.params());
  nn::append(p, "ff2_out", ff2_out.params());
  nn::append(p, "attn", attn.params());
  nn::append(p, "pw_in", pw_in.params());
  nn::append(p, "pw_out", pw_out.params());
  p.emplace_back("dw.weight", dw_weight);
  p.emplace_back("dw.bias", dw_bias);
  nn::append(p, "dw_norm", dw_norm.params());
  return p;
}

ConformerStack::ConformerStack(std::size_t in, std::size_t dim, std::size_t out, std::size_t n_blocks,
                               const Bn2BnConfig& cfg, Rng& rng)
    : input(in, dim, rng), output(dim, out, rng) {
  for (std::size_t i = 0; i < n_blocks; ++i)
    blocks.emplace_back(dim, cfg.heads, cfg.ff_expansion, cfg.conv_expansion, cfg.conv_kernel, rng);
}

Tensor ConformerStack::operator()(const Tensor& x) const {
  Tensor h = input(x);
  for (const auto& b : blocks) h = b(h);
  return output(h);
}

ParamList ConformerStack::params() const {
  ParamList p;
  nn::append(p, "input", input.params());
  for (std::size_t i = 0; i < blocks.size(); ++i) nn::append(p, "block" + std::to_string(i), blocks[i].params());
  nn::append(p, "output", output.params());
  return p;
}

// ---- attention

Tensor initial_alignment(std::size_t length) {
  if (length == 0) throw ContractError("attention: empty memory");
  Tensor a = Tensor::zeros({1, length});
  a.mutable_data()[0] = 1.0;
  return a;
}

DynamicConvAttention::DynamicConvAttention(std::size_t query_dim, const DcaConfig& c, Rng& rng)
    : cfg(c),
      static_filter(leaf_uniform({c.static_channels, c.static_kernel}, rng,
                                 1.0 / std::sqrt(static_cast<double>(c.static_kernel)))),
      static_proj(c.static_channels, c.attention_dim, rng),
      dyn_hidden(query_dim, c.attention_dim, rng),
      dyn_filters(c.attention_dim, c.dynamic_channels * c.dynamic_kernel, rng),
      dyn_proj(leaf_uniform({c.attention_dim, c.dynamic_channels}, rng,
                            1.0 / std::sqrt(static_cast<double>(c.dynamic_channels)))),
      energy(leaf_uniform({1, c.attention_dim}, rng, 1.0 / std::sqrt(static_cast<double>(c.attention_dim)))) {
  c.validate();
  auto pmf = beta_binomial_prior(c.prior_length, c.alpha, c.beta);
  std::reverse(pmf.begin(), pmf.end());  // conv1d correlates; reversed taps look backwards
  prior = Tensor::from({1, pmf.size()}, pmf);
}

Attention DynamicConvAttention::operator()(const Tensor& query, const Tensor& previous, const Tensor& memory) const {
  if (previous.rows() != 1 || previous.cols() != memory.cols())
    throw ContractError("attention: previous weights must be (1, T_in)");
  Tensor f = conv1d(previous, static_filter, nullptr, cfg.static_kernel);
  Tensor filters = reshape(dyn_filters(tanh(dyn_hidden(query))), {cfg.dynamic_channels, cfg.dynamic_kernel});
  Tensor g = conv1d(previous, filters, nullptr, cfg.dynamic_kernel);
  Tensor e = matmul(energy, tanh(add(static_proj(f), matmul(dyn_proj, g))));
  const long P = static_cast<long>(cfg.prior_length);
  Tensor p = conv1d(previous, prior, nullptr, cfg.prior_length + 1, 1, P, 0);
  e = add(e, log(add_scalar(relu(p), 1e-6)));
  Tensor w = softmax(e, 1);
  return {w, matmul(memory, transpose(w))};
}

ParamList DynamicConvAttention::params() const {
  ParamList p{{"static_filter", static_filter}};
  nn::append(p, "static_proj", static_proj.params());
  nn::append(p, "dyn_hidden", dyn_hidden.params());
  nn::append(p, "dyn_filters", dyn_filters.params());
  p.emplace_back("dyn_proj", dyn_proj);
  p.emplace_back("energy", energy);
  return p;
}

// ---- decoder

PostNet::PostNet(std::size_t dim, std::size_t channels, std::size_t layers, std::size_t kernel, Rng& rng) {
  for (std::size_t i = 0; i < layers; ++i) {
    std::size_t in = i == 0 ? dim : channels;
    std::size_t out = i + 1 == layers ? dim : channels;
    convs.emplace_back(in, out, kernel, rng, 1, i + 1 == layers);
  }
}

Tensor PostNet::operator()(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    h = convs[i](h);
    if (i + 1 < convs.size()) h = tanh(h);
  }
  return add(x, h);
}

ParamList PostNet::params() const {
  ParamList p;
  for (std::size_t i = 0; i < convs.size(); ++i) nn::append(p, "conv" + std::to_string(i), convs[i].params());
  return p;
}

AccentDecoder::AccentDecoder(const Bn2BnConfig& cfg, Rng& rng)
    : prenet1(cfg.content_dim, cfg.prenet_dim, rng),
      prenet2(cfg.prenet_dim, cfg.prenet_dim, rng),
      attention_rnn(cfg.prenet_dim + cfg.encoder_dim, cfg.decoder_dim, rng),
      decoder_rnn(cfg.decoder_dim + cfg.encoder_dim, cfg.decoder_dim, rng),
      attention(cfg.decoder_dim, cfg.dca, rng),
      frame_proj(cfg.decoder_dim + cfg.encoder_dim, cfg.content_dim, rng),
      gate_proj(cfg.decoder_dim + cfg.encoder_dim, 1, rng),
      postnet(cfg.content_dim, cfg.postnet_channels, cfg.postnet_layers, cfg.postnet_kernel, rng),
      content_dim(cfg.content_dim),
      prenet_dropout(cfg.prenet_dropout) {}

namespace {

struct StepState {
  nn::LstmState attn, dec;
  Tensor weights, context;
};

struct StepOut {
  Tensor frame, gate;
};

StepOut decoder_step(const AccentDecoder& d, const Tensor& prenet_out, const Tensor& memory, StepState& s) {
  s.attn = d.attention_rnn(concat({prenet_out, s.context}, 0), s.attn);
  Attention a = d.attention(s.attn.h, s.weights, memory);
  s.weights = a.weights;
  s.context = a.context;
  s.dec = d.decoder_rnn(concat({s.attn.h, s.context}, 0), s.dec);
  Tensor features = concat({s.dec.h, s.context}, 0);
  return {d.frame_proj(features), d.gate_proj(features)};
}

StepState start(const AccentDecoder& d, const Tensor& memory) {
  return {d.attention_rnn.initial(), d.decoder_rnn.initial(), initial_alignment(memory.cols()),
          Tensor::zeros({memory.rows(), 1})};
}

void record(Matrix& alignment, std::size_t row, const Tensor& w) {
  for (std::size_t i = 0; i < w.cols(); ++i) alignment(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(i)) = w.at(i);
}

}  // namespace

DecoderOutput AccentDecoder::teacher_force(const Tensor& memory, const Tensor& target, Rng* rng) const {
  if (memory.cols() == 0) throw ContractError("decoder: empty memory");
  if (target.rows() != content_dim || target.cols() == 0) throw ContractError("decoder: target must be (D1, T>0)");
  const std::size_t T = target.cols();
  Tensor prev = T == 1 ? Tensor::zeros({content_dim, 1})
                       : concat({Tensor::zeros({content_dim, 1}), slice(target, 1, 0, T - 1)}, 1);
  Tensor pre_all = dropout(relu(prenet2(dropout(relu(prenet1(prev)), prenet_dropout, rng))), prenet_dropout, rng);
  StepState s = start(*this, memory);
  std::vector<Tensor> frames, gates;
  DecoderOutput out;
  out.alignment = Matrix::Zero(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(memory.cols()));
  for (std::size_t t = 0; t < T; ++t) {
    StepOut o = decoder_step(*this, column(pre_all, t), memory, s);
    frames.push_back(o.frame);
    gates.push_back(o.gate);
    record(out.alignment, t, s.weights);
  }
  out.pre = concat(frames, 1);
  out.gate_logits = concat(gates, 1);
  out.post = postnet(out.pre);
  return out;
}

DecoderOutput AccentDecoder::generate(const Tensor& memory, std::size_t max_len) const {
  if (memory.cols() == 0) throw ContractError("decoder: empty memory");
  if (max_len == 0) throw ContractError("decoder: max_len must be positive");
  StepState s = start(*this, memory);
  Tensor prev = Tensor::zeros({content_dim, 1});
  std::vector<Tensor> frames, gates;
  std::vector<std::vector<double>> weights;
  DecoderOutput out;
  out.truncated = true;
  for (std::size_t t = 0; t < max_len; ++t) {
    StepOut o = decoder_step(*this, relu(prenet2(relu(prenet1(prev)))), memory, s);
    frames.push_back(o.frame);
    gates.push_back(o.gate);
    weights.emplace_back(s.weights.values());
    prev = o.frame;
    if (o.gate.item() > 0.0) {  // sigmoid > 0.5
      out.truncated = false;
      break;
    }
  }
  out.pre = concat(frames, 1);
  out.gate_logits = concat(gates, 1);
  out.post = postnet(out.pre);
  out.alignment.resize(static_cast<Eigen::Index>(weights.size()), static_cast<Eigen::Index>(memory.cols()));
  for (std::size_t t = 0; t < weights.size(); ++t)
    for (std::size_t i = 0; i < memory.cols(); ++i)
      out.alignment(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)) = weights[t][i];
  return out;
}

ParamList AccentDecoder::params() const {
  ParamList p;
  nn::append(p, "prenet1", prenet1.params());
  nn::append(p, "prenet2", prenet2.params());
  nn::append(p, "attention_rnn", attention_rnn.params());
  nn::append(p, "decoder_rnn", decoder_rnn.params());
  nn::append(p, "attention", attention.params());
  nn::append(p, "frame_proj", frame_proj.params());
  nn::append(p, "gate_proj", gate_proj.params());
  nn::append(p, "postnet", postnet.params());
  return p;
}

// ---- adversary

LanguageClassifier::LanguageClassifier(const Bn2BnConfig& cfg, Rng& rng)
    : gru(cfg.classifier_channels.back(), cfg.classifier_gru, rng),
      mlp1(cfg.classifier_gru, cfg.classifier_mlp, rng),
      mlp2(cfg.classifier_mlp, cfg.n_languages, rng) {
  std::size_t in = cfg.encoder_dim;
  for (std::size_t ch : cfg.classifier_channels) {
    convs.emplace_back(in, ch, 3, rng);
    in = ch;
  }
}

Tensor LanguageClassifier::operator()(const Tensor& z) const {
  Tensor h = z;
  for (const auto& c : convs) {
    h = relu(c(h));
    // Stride 2 as average pooling over pairs; odd tails are dropped.
    if (h.cols() >= 2) {
      std::size_t even = h.cols() - h.cols() % 2;
      h = avg_pool_cols(even == h.cols() ? h : slice(h, 1, 0, even), 2);
    }
  }
  Tensor state = Tensor::zeros({gru.hidden, 1});
  for (std::size_t t = 0; t < h.cols(); ++t) state = gru(column(h, t), state);
  return mlp2(relu(mlp1(state)));
}

ParamList LanguageClassifier::params() const {
  ParamList p;
  for (std::size_t i = 0; i < convs.size(); ++i) nn::append(p, "conv" + std::to_string(i), convs[i].params());
  nn::append(p, "gru", gru.params());
  nn::append(p, "mlp1", mlp1.params());
  nn::append(p, "mlp2", mlp2.params());
  return p;
}

// ---- loss

Tensor gate_targets(std::size_t length, std::size_t padding) {
  if (length == 0) throw ContractError("gate_targets: empty sequence");
  Tensor g = Tensor::zeros({1, length + padding});
  for (std::size_t t = length - 1; t < length + padding; ++t) g.mutable_data()[t] = 1.0;
  return g;
}

LossParts bn2bn_loss(const Tensor& pre, const Tensor& post, const Tensor& l18, const Tensor& gate_prob,
                     const Tensor& target, const Tensor& target_l18, const Tensor& gate_target) {
  if (pre.shape() != target.shape() || post.shape() != target.shape())
    throw ContractError("bn2bn_loss: L10 predictions " + shape_str(pre.shape()) + " / " + shape_str(post.shape()) +
                        " do not match target " + shape_str(target.shape()));
  if (l18.shape() != target_l18.shape()) throw ContractError("bn2bn_loss: L18 length mismatch");
  if (gate_prob.numel() != gate_target.numel() || gate_prob.numel() < target.cols())
    throw ContractError("bn2bn_loss: gate length mismatch");
  Tensor a = mae(pre, target), b = mae(post, target), c = mae(l18, target_l18);
  Tensor d = binary_cross_entropy(gate_prob, gate_target);
  LossParts out;
  out.total = add(add(a, b), add(c, d));
  out.pre = a.item();
  out.post = b.item();
  out.l18 = c.item();
  out.gate = d.item();
  return out;
}

// ---- model

Bn2BnModel::Bn2BnModel(const Bn2BnConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  encoder_ = ConformerStack(cfg.content_dim, cfg.encoder_dim, cfg.encoder_dim, cfg.encoder_blocks, cfg, rng);
  for (std::size_t j = 0; j < cfg.accents.size(); ++j) decoders_.emplace_back(cfg, rng);
  l18_ = ConformerStack(cfg.content_dim, cfg.encoder_dim, cfg.l18_dim, cfg.predictor_blocks, cfg, rng);
  if (cfg.adversarial) classifier_ = LanguageClassifier(cfg, rng);
}

std::size_t Bn2BnModel::accent_index(const std::string& name) const {
  for (std::size_t j = 0; j < cfg_.accents.size(); ++j)
    if (cfg_.accents[j] == name) return j;
  throw LookupError("bn2bn: unknown accent '" + name + "'");
}

Tensor Bn2BnModel::encode(const Tensor& x) const {
  if (x.rows() != cfg_.content_dim || x.cols() == 0 || x.rank() != 2)
    throw ContractError("bn2bn encode: expected (" + std::to_string(cfg_.content_dim) + ", T>0), got " +
                        shape_str(x.shape()));
  return encoder_(x);
}

DecoderOutput Bn2BnModel::decode(std::size_t accent, const Tensor& memory, std::size_t max_len) const {
  if (accent >= decoders_.size()) throw LookupError("bn2bn: accent index " + std::to_string(accent) + " out of range");
  return decoders_[accent].generate(memory, max_len);
}

Tensor Bn2BnModel::predict_l18(const Tensor& l10) const {
  if (l10.rows() != cfg_.content_dim) throw ContractError("predict_l18: channel mismatch");
  return l18_(l10);
}

Tensor Bn2BnModel::classify_language(const Tensor& z) const {
  if (!cfg_.adversarial) throw ContractError("bn2bn: model has no language classifier");
  return classifier_(grad_reverse(z, cfg_.reversal));
}

Conversion Bn2BnModel::convert(const Matrix& x, const std::string& target, bool with_l18) const {
  const std::size_t j = accent_index(target);
  NoGradGuard guard;
  Tensor z = encode(to_tensor(x));
  auto max_len = static_cast<std::size_t>(std::ceil(cfg_.max_len_factor * static_cast<double>(x.cols())));
  DecoderOutput d = decoders_[j].generate(z, max_len);
  Conversion c;
  c.l10 = to_matrix(d.post);
  if (with_l18) c.l18 = to_matrix(l18_(d.post));
  c.alignment = std::move(d.alignment);
  c.truncated = d.truncated;
  return c;
}

ParamList Bn2BnModel::params() const {
  ParamList p;
  nn::append(p, "encoder", encoder_.params());
  for (std::size_t j = 0; j < decoders_.size(); ++j) nn::append(p, "decoder." + cfg_.accents[j], decoders_[j].params());
  nn::append(p, "l18", l18_.params());
  if (cfg_.adversarial) nn::append(p, "adversary", classifier_.params());
  return p;
}

ParamList Bn2BnModel::adversary_params() const { return cfg_.adversarial ? classifier_.params() : ParamList{}; }

void Bn2BnModel::save(const std::filesystem::path& path) const { save_checkpoint(path, params()); }
void Bn2BnModel::load(const std::filesystem::path& path) { load_checkpoint(path, params()); }

// ---- data and training

std::vector<ParallelGroup> groups_from_world(const toy::World& world, const toy::ParallelManifest& manifest,
                                             const std::vector<int>& speakers, const std::vector<int>& contents) {
  std::vector<ParallelGroup> groups;
  const auto& accents = world.accents();
  for (int c : contents) {
    const auto& content = world.content(c);
    for (int s : speakers) {
      ParallelGroup g;
      g.speaker = s;
      g.content = c;
      g.language = content.language;
      g.l10.resize(accents.size());
      g.l18.resize(accents.size());
      for (std::size_t a = 0; a < accents.size(); ++a) {
        if (accents[a].language != content.language) continue;
        manifest.find(accents[a].name, s, c);  // raises on a hole
        g.l10[a] = world.content_features(c, static_cast<int>(a), s);
        g.l18[a] = world.l18_features(g.l10[a]);
      }
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

Bn2BnTrainLog train_bn2bn(Bn2BnModel& model, const std::vector<ParallelGroup>& groups, const Bn2BnTrainConfig& cfg,
                          const std::function<void(int, double)>& progress) {
  const auto& mc = model.config();
  const std::size_t M = mc.accents.size();
  if (groups.empty()) throw ContractError("train_bn2bn: no training groups");
  std::vector<std::vector<std::size_t>> available(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].l10.size() != M || groups[i].l18.size() != M)
      throw ContractError("train_bn2bn: group accent slots must match the model's accents");
    for (std::size_t j = 0; j < M; ++j)
      if (groups[i].l10[j].size() > 0) available[i].push_back(j);
    if (available[i].empty()) throw ContractError("train_bn2bn: group without any recording");
    if (mc.adversarial && (groups[i].language < 0 || static_cast<std::size_t>(groups[i].language) >= mc.n_languages))
      throw ContractError("train_bn2bn: language label out of range");
  }

  Rng rng(cfg.seed);
  Adam opt(model.params(), {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  Bn2BnTrainLog log;
  double window = 0, window_adv = 0;
  int count = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    double frac = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 1.0;
    opt.set_lr(cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * frac)));
    const std::size_t gi = rng.below(groups.size());
    const auto& g = groups[gi];
    const std::size_t src = available[gi][rng.below(available[gi].size())];
    Tensor z = model.encode(to_tensor(g.l10[src]));

    Tensor loss;
    for (std::size_t j : available[gi]) {
      Tensor target = to_tensor(g.l10[j]);
      const std::size_t T = target.cols();
      const auto& dec = model.decoder(j);
      Tensor padded = cfg.gate_padding ? concat({target, Tensor::zeros({target.rows(), cfg.gate_padding})}, 1) : target;
      DecoderOutput out = dec.teacher_force(z, padded, &rng);
      Tensor pre = cfg.gate_padding ? slice(out.pre, 1, 0, T) : out.pre;
      Tensor post = cfg.gate_padding ? dec.postnet(pre) : out.post;
      Tensor l18 = model.predict_l18(cfg.joint_l18 ? post : post.detach());
      LossParts parts = bn2bn_loss(pre, post, l18, sigmoid(out.gate_logits), target, to_tensor(g.l18[j]),
                                   gate_targets(T, cfg.gate_padding));
      loss = loss.numel() ? add(loss, parts.total) : parts.total;
    }
    loss = scale(loss, 1.0 / static_cast<double>(available[gi].size()));
    double value = loss.item();
    if (mc.adversarial) {
      Tensor logp = log_softmax(model.classify_language(z), 0);
      Tensor ce = neg(slice(logp, 0, static_cast<std::size_t>(g.language), static_cast<std::size_t>(g.language) + 1));
      window_adv += ce.item();
      loss = add(loss, scale(reshape(ce, {}), cfg.adversarial_weight));
    }
    if (!std::isfinite(loss.item())) throw TrainingError("train_bn2bn: non-finite loss at step " + std::to_string(step));
    backward(loss);
    clip_grad_norm(opt.params(), cfg.clip_norm);
    opt.step();

    window += value;
    ++count;
    if (progress) progress(step + 1, value);
    if (count == cfg.log_every || step + 1 == cfg.steps) {
      log.losses.push_back(window / count);
      log.adversary.push_back(window_adv / count);
      window = window_adv = 0;
      count = 0;
    }
  }
  log.final_loss = log.losses.empty() ? 0.0 : log.losses.back();
  return log;
}

}  // namespace vs::bn2bn

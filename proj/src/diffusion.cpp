#include "voiceshop/diffusion.hpp"

#include <cmath>
#include <numbers>

#include "voiceshop/checkpoint.hpp"
#include "voiceshop/errors.hpp"
#include "voiceshop/optim.hpp"

namespace vs::diffusion {

using namespace vs::num;

std::pair<double, double> alpha_beta(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("alpha_beta: t=" + std::to_string(t) + " outside [0, 1]");
  if (t == 0.0) return {1.0, 0.0};
  if (t == 1.0) return {0.0, 1.0};
  const double a = t * std::numbers::pi / 2.0;
  return {std::cos(a), std::sin(a)};
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add_noise(const Tensor& x0, const Tensor& eps, double t) {
  require_same_shape(x0, eps, "add_noise");
  auto [a, b] = alpha_beta(t);
  return add(scale(x0, a), scale(eps, b));
}

Tensor v_target(const Tensor& x0, const Tensor& eps, double t) {
  require_same_shape(x0, eps, "v_target");
  auto [a, b] = alpha_beta(t);
  return sub(scale(eps, a), scale(x0, b));
}

Recovered recover(const Tensor& x_t, const Tensor& v_hat, double t) {
  require_same_shape(x_t, v_hat, "recover");
  auto [a, b] = alpha_beta(t);
  return {sub(scale(x_t, a), scale(v_hat, b)), add(scale(x_t, b), scale(v_hat, a))};
}

Tensor ddim_step(const Tensor& x_t, const Tensor& v_hat, double t, double t_prev, SampleMode mode, Rng& rng) {
  if (!(t_prev < t)) throw ContractError("ddim_step: t_prev must be < t");
  auto [a_prev, b_prev] = alpha_beta(t_prev);
  Recovered r = recover(x_t, v_hat, t);
  Tensor eps = mode == SampleMode::noise_replace ? Tensor::randn(x_t.shape(), rng) : r.eps;
  return add(scale(r.x0, a_prev), scale(eps, b_prev));
}

Tensor sample(const VPredictor& predictor, const Shape& shape, int steps, SampleMode mode, Rng& rng) {
  if (steps < 1) throw ContractError("sample: steps must be >= 1");
  Tensor x = Tensor::randn(shape, rng);
  for (int i = steps; i >= 1; --i) {
    double t = static_cast<double>(i) / steps;
    double t_prev = static_cast<double>(i - 1) / steps;
    Tensor v = predictor(x, t);
    if (!all_finite(v.data())) throw NumericError("sample: non-finite velocity at t=" + std::to_string(t));
    x = ddim_step(x, v, t, t_prev, mode, rng);
  }
  return x;
}

// ---- config

void DenoiserConfig::validate() const {
  if (channels.empty() || channels.size() != downsample.size())
    throw ConfigError("denoiser: channels and downsample factors must have the same length");
  for (auto c : channels)
    if (c == 0 || c % resnet_groups != 0) throw ConfigError("denoiser: channels must be divisible by resnet_groups");
  if (downsample.front() != 1) throw ConfigError("denoiser: first block must not downsample");
  for (auto d : downsample)
    if (d == 0) throw ConfigError("denoiser: downsample factors must be positive");
  if (channels.back() % attention_heads != 0) throw ConfigError("denoiser: attention heads must divide channels");
  if (time_dim % 2 != 0) throw ConfigError("denoiser: time_dim must be even");
}

DenoiserConfig DenoiserConfig::paper_scale() {
  DenoiserConfig c;
  c.mel_bins = 80;
  c.speaker_dim = 512;
  c.channels = {256, 512, 1024};
  c.attention_heads = 8;
  c.resnet_groups = 8;
  c.cond_hidden = 512;
  c.local_hidden = 256;
  c.encoder_channels = 512;
  return c;
}

std::size_t DenoiserConfig::total_downsample() const {
  std::size_t f = 1;
  for (auto d : downsample) f *= d;
  return f;
}

Tensor time_embedding(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> v(dim);
  for (std::size_t k = 0; k < half; ++k) {
    double freq = std::exp(-std::log(1000.0) * static_cast<double>(k) / static_cast<double>(half));
    v[k] = std::sin(100.0 * t * freq);
    v[half + k] = std::cos(100.0 * t * freq);
  }
  return Tensor::from({dim, 1}, std::move(v));
}

// ---- speaker encoder

SpeakerEncoder::SpeakerEncoder(const DenoiserConfig& cfg, Rng& rng)
    : c1_(cfg.mel_bins, cfg.encoder_channels, 3, rng),
      c2_(cfg.encoder_channels, cfg.encoder_channels, 3, rng, 2),
      c3_(cfg.encoder_channels, 2 * cfg.encoder_channels, 1, rng),
      att_hidden_(2 * cfg.encoder_channels, cfg.encoder_channels, rng),
      att_score_(cfg.encoder_channels, 1, rng),
      out_(4 * cfg.encoder_channels + 2 * cfg.mel_bins, cfg.speaker_dim, rng) {}

Tensor SpeakerEncoder::operator()(const Tensor& mel) const {
  if (mel.numel() == 0 || mel.cols() == 0) throw ContractError("encode_speaker: empty mel");
  Tensor h = relu(c1_(mel));
  h = relu(c2_(h));
  h = relu(c3_(h));
  Tensor w = softmax(att_score_(tanh(att_hidden_(h))), 1);  // (1, L)
  Tensor mu = sum(mul(h, w), 1);
  Tensor var = sub(sum(mul(square(h), w), 1), square(mu));
  Tensor sd = sqrt(add_scalar(relu(var), 1e-5));
  // Per-bin statistics of the input itself, next to the pooled features.
  Tensor in_mu = mean(mel, 1);
  Tensor in_sd = sqrt(add_scalar(relu(sub(mean(square(mel), 1), square(in_mu))), 1e-5));
  return out_(concat({mu, sd, in_mu, in_sd}, 0));
}

ParamList SpeakerEncoder::params() const {
  ParamList p;
  nn::append(p, "c1", c1_.params());
  nn::append(p, "c2", c2_.params());
  nn::append(p, "c3", c3_.params());
  nn::append(p, "att_hidden", att_hidden_.params());
  nn::append(p, "att_score", att_score_.params());
  nn::append(p, "out", out_.params());
  return p;
}

// ---- U-Net

UNetBlock::UNetBlock(std::size_t in, std::size_t out, const DenoiserConfig& cfg, bool attention, Rng& rng)
    : gn1(in, cfg.resnet_groups),
      gn2(out, cfg.resnet_groups),
      conv1(in, out, 3, rng),
      conv2(out, out, 3, rng),
      has_skip(in != out),
      modulation(cfg.cond_hidden, 2 * out, rng),
      merge_add(cfg.local_hidden, out, 1, rng),
      has_attention(attention) {
  if (has_skip) skip = nn::Conv1d(in, out, 1, rng);
  if (attention) {
    gn_att = nn::GroupNorm(out, cfg.resnet_groups);
    this->attention = nn::SelfAttention(out, cfg.attention_heads, rng);
  }
}

Tensor UNetBlock::operator()(const Tensor& x, const Tensor& global, const Tensor& local) const {
  // ResNet item
  Tensor r = conv1(silu(gn1(x)));
  // modulation item: scale and shift after normalization so the condition survives it
  const std::size_t C = r.rows();
  Tensor ss = modulation(global);
  r = add(mul(gn2(r), add_scalar(slice(ss, 0, 0, C), 1.0)), slice(ss, 0, C, 2 * C));
  // MergeAdd item
  r = add(r, merge_add(local));
  r = conv2(silu(r));
  Tensor out = add(r, has_skip ? skip(x) : x);
  // self-attention item
  if (has_attention) out = add(out, attention(gn_att(out)));
  return out;
}

ParamList UNetBlock::params() const {
  ParamList p;
  nn::append(p, "gn1", gn1.params());
  nn::append(p, "gn2", gn2.params());
  nn::append(p, "conv1", conv1.params());
  nn::append(p, "conv2", conv2.params());
  if (has_skip) nn::append(p, "skip", skip.params());
  nn::append(p, "modulation", modulation.params());
  nn::append(p, "merge_add", merge_add.params());
  if (has_attention) {
    nn::append(p, "gn_att", gn_att.params());
    nn::append(p, "attention", attention.params());
  }
  return p;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  cond1_ = nn::Linear(cfg.speaker_dim + cfg.time_dim, cfg.cond_hidden, rng);
  cond2_ = nn::Linear(cfg.cond_hidden, cfg.cond_hidden, rng);
  local1_ = nn::Conv1d(cfg.content_dim, cfg.local_hidden, 3, rng);
  local2_ = nn::Conv1d(cfg.local_hidden, cfg.local_hidden, 3, rng);
  in_conv_ = nn::Conv1d(cfg.mel_bins, cfg.channels[0], 3, rng);
  const std::size_t n = cfg.channels.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t in = i == 0 ? cfg.channels[0] : cfg.channels[i - 1];
    down_.emplace_back(in, cfg.channels[i], cfg, i + 1 == n, rng);
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    merge_concat_.emplace_back(cfg.channels[i + 1] + cfg.channels[i], cfg.channels[i], 1, rng);
    up_.emplace_back(cfg.channels[i], cfg.channels[i], cfg, false, rng);
  }
  out_conv_ = nn::Conv1d(cfg.channels[0], cfg.mel_bins, 3, rng, 1, true);
}

Tensor Denoiser::operator()(const Tensor& x_t, double t, const Tensor& speaker, const Tensor& content) const {
  if (x_t.rows() != cfg_.mel_bins) throw ContractError("denoise: expected " + std::to_string(cfg_.mel_bins) + " mel bins");
  if (speaker.numel() != cfg_.speaker_dim) throw ContractError("denoise: speaker embedding dimension mismatch");
  if (content.rows() != cfg_.content_dim) throw ContractError("denoise: content dimension mismatch");
  const std::size_t L = x_t.cols();
  if (content.cols() * 4 != L)
    throw ContractError("denoise: content of " + std::to_string(content.cols()) + " frames upsamples to " +
                        std::to_string(content.cols() * 4) + ", mel has " + std::to_string(L));
  if (L % cfg_.total_downsample() != 0)
    throw ContractError("denoise: length " + std::to_string(L) + " not divisible by total downsampling");

  Tensor spk = reshape(speaker, {cfg_.speaker_dim, 1});
  Tensor g = silu(cond2_(silu(cond1_(concat({spk, time_embedding(t, cfg_.time_dim)}, 0)))));
  Tensor local = local2_(silu(local1_(repeat_cols(content, 4))));

  const std::size_t n = cfg_.channels.size();
  std::vector<Tensor> skips, locals;
  Tensor h = in_conv_(x_t);
  for (std::size_t i = 0; i < n; ++i) {
    if (cfg_.downsample[i] > 1) {
      h = avg_pool_cols(h, cfg_.downsample[i]);
      local = avg_pool_cols(local, cfg_.downsample[i]);
    }
    h = down_[i](h, g, local);
    skips.push_back(h);
    locals.push_back(local);
  }
  for (std::size_t i = n - 1; i-- > 0;) {
    h = repeat_cols(h, cfg_.downsample[i + 1]);
    h = merge_concat_[i](concat({h, skips[i]}, 0));  // MergeConcat
    h = up_[i](h, g, locals[i]);
  }
  return out_conv_(silu(h));
}

ParamList Denoiser::params() const {
  ParamList p;
  nn::append(p, "cond1", cond1_.params());
  nn::append(p, "cond2", cond2_.params());
  nn::append(p, "local1", local1_.params());
  nn::append(p, "local2", local2_.params());
  nn::append(p, "in_conv", in_conv_.params());
  for (std::size_t i = 0; i < down_.size(); ++i) nn::append(p, "down" + std::to_string(i), down_[i].params());
  for (std::size_t i = 0; i < up_.size(); ++i) {
    nn::append(p, "merge" + std::to_string(i), merge_concat_[i].params());
    nn::append(p, "up" + std::to_string(i), up_[i].params());
  }
  nn::append(p, "out_conv", out_conv_.params());
  return p;
}

// ---- backbone

Backbone::Backbone(const DenoiserConfig& cfg, Rng& rng) : config(cfg), encoder(cfg, rng), denoiser(cfg, rng) {}

ParamList Backbone::params() const {
  ParamList p;
  nn::append(p, "encoder", encoder.params());
  nn::append(p, "denoiser", denoiser.params());
  return p;
}

Vector Backbone::encode_speaker(const Matrix& mel) const {
  NoGradGuard guard;
  return to_vector(encoder(to_tensor(mel)));
}

Matrix Backbone::sample(const Vector& speaker, const Matrix& content, int steps, SampleMode mode, Rng& rng) const {
  NoGradGuard guard;
  Tensor spk = to_tensor(speaker);
  Tensor con = to_tensor(content);
  auto predictor = [&](const Tensor& x, double t) { return denoiser(x, t, spk, con); };
  Shape shape{config.mel_bins, static_cast<std::size_t>(content.cols()) * 4};
  return to_matrix(diffusion::sample(predictor, shape, steps, mode, rng));
}

void Backbone::save(const std::filesystem::path& path) const { save_checkpoint(path, params()); }
void Backbone::load(const std::filesystem::path& path) { load_checkpoint(path, params()); }

// ---- training

TrainLog train_diffusion(Backbone& model, const std::vector<TrainingPair>& data, const DiffusionTrainConfig& cfg,
                         const std::function<void(int, double)>& progress) {
  if (data.empty()) throw TrainingError("train_diffusion: empty dataset");
  if (cfg.steps < 1 || cfg.batch < 1 || cfg.crop_content_frames < 1) throw ConfigError("train_diffusion: bad config");
  const std::size_t unit = model.config.total_downsample();
  for (const auto& d : data) {
    if (d.mel.cols() != 4 * d.content.cols()) throw ContractError("train_diffusion: mel/content length mismatch");
    if (static_cast<std::size_t>(d.mel.rows()) != model.config.mel_bins)
      throw ContractError("train_diffusion: mel bin mismatch");
  }

  Rng rng(cfg.seed);
  Adam opt(model.params(), {.lr = cfg.lr});
  TrainLog log;
  double window = 0;
  int window_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    double frac = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 1.0;
    opt.set_lr(cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * frac)));
    std::vector<Tensor> losses;
    for (int b = 0; b < cfg.batch; ++b) {
      const TrainingPair& d = data[rng.below(data.size())];
      const auto lc = static_cast<std::size_t>(d.content.cols());
      std::size_t crop = std::min<std::size_t>(cfg.crop_content_frames, lc);
      crop -= (4 * crop) % unit / 4;  // keep the mel crop divisible by the U-Net downsampling
      if (crop == 0) throw TrainingError("train_diffusion: content too short to crop");
      std::size_t start = rng.below(lc - crop + 1);
      Tensor x0 = to_tensor(Matrix(d.mel.middleCols(4 * start, 4 * crop)));
      Tensor content = to_tensor(Matrix(d.content.middleCols(start, crop)));
      Tensor spk = model.encoder(to_tensor(d.mel));
      double t = rng.uniform();
      Tensor eps = Tensor::randn(x0.shape(), rng);
      Tensor v = v_target(x0, eps, t);
      Tensor v_hat = model.denoiser(add_noise(x0, eps, t), t, spk, content);
      losses.push_back(mse(v_hat, v));
    }
    Tensor loss = scale(sum(concat(losses, 0)), 1.0 / cfg.batch);
    double value = loss.item();
    if (!std::isfinite(value))
      throw TrainingError("train_diffusion: loss became non-finite at step " + std::to_string(step) +
                          " (lr " + std::to_string(opt.lr()) + ")");
    backward(loss);
    clip_grad_norm(opt.params(), cfg.clip_norm);
    opt.step();
    if (step == 0) log.initial_loss = value;
    window += value;
    ++window_n;
    if (window_n == cfg.log_every || step + 1 == cfg.steps) {
      log.losses.push_back(window / window_n);
      if (progress) progress(step + 1, window / window_n);
      window = 0;
      window_n = 0;
    }
  }
  log.final_loss = log.losses.back();
  return log;
}

}  // namespace vs::diffusion

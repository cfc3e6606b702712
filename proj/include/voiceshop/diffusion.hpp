#pragma once

#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include "voiceshop/layers.hpp"
#include "voiceshop/matrix.hpp"

namespace vs::diffusion {

using num::Rng;
using num::Tensor;

// ---- schedule and sampler algebra

// (cos(t*pi/2), sin(t*pi/2)); DomainError outside [0, 1].
std::pair<double, double> alpha_beta(double t);

Tensor add_noise(const Tensor& x0, const Tensor& eps, double t);
Tensor v_target(const Tensor& x0, const Tensor& eps, double t);

struct Recovered {
  Tensor x0;
  Tensor eps;
};
Recovered recover(const Tensor& x_t, const Tensor& v_hat, double t);

enum class SampleMode { deterministic, noise_replace };

Tensor ddim_step(const Tensor& x_t, const Tensor& v_hat, double t, double t_prev, SampleMode mode, Rng& rng);

// v-prediction for a state at time t.
using VPredictor = std::function<Tensor(const Tensor& x_t, double t)>;

// Starts from N(0, I) of the given shape and walks the uniform grid 1 -> 0.
Tensor sample(const VPredictor& predictor, const num::Shape& shape, int steps, SampleMode mode, Rng& rng);

// ---- networks

struct DenoiserConfig {
  std::size_t mel_bins = 20;
  std::size_t content_dim = 8;
  std::size_t speaker_dim = 32;  // D_S
  std::size_t time_dim = 16;
  std::size_t cond_hidden = 64;
  std::size_t local_hidden = 32;
  std::vector<std::size_t> channels{32, 32, 64};
  std::vector<std::size_t> downsample{1, 2, 2};
  std::size_t attention_heads = 2;
  std::size_t resnet_groups = 4;
  std::size_t encoder_channels = 32;

  void validate() const;
  // Paper-scale preset (channels 256/512/1024, 8 heads, 8 groups, 512-d speaker embedding).
  static DenoiserConfig paper_scale();
  std::size_t total_downsample() const;
};

// Sinusoidal embedding of t in [0, 1]; (dim, 1).
Tensor time_embedding(double t, std::size_t dim);

// Convolutional stack with attentive statistics pooling.
class SpeakerEncoder {
 public:
  SpeakerEncoder() = default;
  SpeakerEncoder(const DenoiserConfig& cfg, Rng& rng);

  // mel (F, L) -> (D_S, 1)
  Tensor operator()(const Tensor& mel) const;
  num::ParamList params() const;

 private:
  nn::Conv1d c1_, c2_, c3_;
  nn::Linear att_hidden_, att_score_, out_;
};

struct UNetBlock {
  nn::GroupNorm gn1, gn2;
  nn::Conv1d conv1, conv2, skip;
  bool has_skip = false;
  nn::Linear modulation;  // -> (2C, 1): scale, shift
  nn::Conv1d merge_add;   // local condition -> C
  bool has_attention = false;
  nn::GroupNorm gn_att;
  nn::SelfAttention attention;

  UNetBlock() = default;
  UNetBlock(std::size_t in, std::size_t out, const DenoiserConfig& cfg, bool attention, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& global, const Tensor& local) const;
  num::ParamList params() const;
};

class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, Rng& rng);

  // x_t (F, L), speaker (D_S, 1), content (D_C, L/4) -> v_hat (F, L)
  Tensor operator()(const Tensor& x_t, double t, const Tensor& speaker, const Tensor& content) const;
  num::ParamList params() const;
  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  nn::Linear cond1_, cond2_;
  nn::Conv1d local1_, local2_;
  nn::Conv1d in_conv_;
  std::vector<UNetBlock> down_;
  std::vector<nn::Conv1d> merge_concat_;
  std::vector<UNetBlock> up_;
  nn::Conv1d out_conv_;
};

// Denoiser plus jointly trained speaker encoder.
struct Backbone {
  DenoiserConfig config;
  SpeakerEncoder encoder;
  Denoiser denoiser;

  Backbone() = default;
  Backbone(const DenoiserConfig& cfg, Rng& rng);
  num::ParamList params() const;

  Vector encode_speaker(const Matrix& mel) const;
  Matrix sample(const Vector& speaker, const Matrix& content, int steps, SampleMode mode, Rng& rng) const;
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);
};

struct TrainingPair {
  Matrix mel;      // (F, L), normalized to [-4, 4]
  Matrix content;  // (D_C, L/4)
  int speaker = -1;  // world speaker id; -1 for prior speakers outside the world
};

struct DiffusionTrainConfig {
  int steps = 12000;
  int batch = 4;
  int crop_content_frames = 8;
  double lr = 2e-3;
  double lr_final = 2e-4;
  double clip_norm = 100.0;  // loose: tight clipping stalls learning of the conditional mean
  int log_every = 100;
  std::uint64_t seed = 1;
};

struct TrainLog {
  std::vector<double> losses;  // mean loss per logging window
  double initial_loss = 0;
  double final_loss = 0;
};

TrainLog train_diffusion(Backbone& model, const std::vector<TrainingPair>& data, const DiffusionTrainConfig& cfg,
                         const std::function<void(int, double)>& progress = {});

}  // namespace vs::diffusion

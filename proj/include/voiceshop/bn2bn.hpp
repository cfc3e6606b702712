#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "voiceshop/layers.hpp"
#include "voiceshop/matrix.hpp"
#include "voiceshop/toyworld.hpp"

// Many-to-many content conversion: one universal encoder, one autoregressive
// decoder per accent. Sequences are (channels, frames) matrices.
namespace vs::bn2bn {

using num::ParamList;
using num::Rng;
using num::Tensor;

struct DcaConfig {
  std::size_t prior_length = 10;
  double alpha = 0.1;
  double beta = 0.9;
  std::size_t dynamic_channels = 8;
  std::size_t dynamic_kernel = 21;
  std::size_t static_channels = 8;
  std::size_t static_kernel = 21;
  std::size_t attention_dim = 64;

  void validate() const;
};

// Beta-binomial pmf over 0..n with shape (alpha, beta).
std::vector<double> beta_binomial_prior(std::size_t n, double alpha, double beta);

struct Bn2BnConfig {
  std::vector<std::string> accents;  // one decoder each
  std::size_t content_dim = 8;       // D1
  std::size_t l18_dim = 8;
  std::size_t encoder_dim = 32;      // D2
  std::size_t encoder_blocks = 2;
  std::size_t heads = 2;
  std::size_t ff_expansion = 3;
  std::size_t conv_expansion = 2;
  std::size_t conv_kernel = 9;
  std::size_t decoder_dim = 32;
  std::size_t prenet_dim = 32;
  double prenet_dropout = 0.5;  // training only
  std::size_t postnet_channels = 32;
  std::size_t postnet_layers = 3;
  std::size_t postnet_kernel = 5;
  std::size_t predictor_blocks = 1;
  DcaConfig dca{};
  double max_len_factor = 2.0;
  // Adversarial language classifier behind a gradient reversal.
  bool adversarial = false;
  std::size_t n_languages = 1;
  std::vector<std::size_t> classifier_channels{16, 32};
  std::size_t classifier_gru = 32;
  std::size_t classifier_mlp = 32;
  double reversal = -1.0;

  void validate() const;
  static Bn2BnConfig paper_scale(std::vector<std::string> accents);
  std::string to_json() const;
  static Bn2BnConfig from_json(const std::string& text);
};

// Encoder block: half feed-forward, self-attention, convolution module, half feed-forward.
struct ConformerBlock {
  nn::LayerNorm ff1_norm, attn_norm, conv_norm, ff2_norm, out_norm;
  nn::Linear ff1_in, ff1_out, ff2_in, ff2_out;
  nn::SelfAttention attn;
  nn::Linear pw_in, pw_out;  // pointwise convolutions
  Tensor dw_weight, dw_bias;
  nn::GroupNorm dw_norm;
  std::size_t kernel = 9;

  ConformerBlock() = default;
  ConformerBlock(std::size_t dim, std::size_t heads, std::size_t ff_exp, std::size_t conv_exp, std::size_t kernel,
                 Rng& rng);
  Tensor operator()(const Tensor& x) const;
  ParamList params() const;
};

struct ConformerStack {
  nn::Linear input;
  std::vector<ConformerBlock> blocks;
  nn::Linear output;  // identity-free projection to the output width

  ConformerStack() = default;
  ConformerStack(std::size_t in, std::size_t dim, std::size_t out, std::size_t n_blocks, const Bn2BnConfig& cfg,
                 Rng& rng);
  Tensor operator()(const Tensor& x) const;
  ParamList params() const;
};

struct Attention {
  Tensor weights;  // (1, T_in), nonnegative, sums to 1
  Tensor context;  // (D2, 1)
};

// Location-only additive attention: static filters, query-predicted dynamic
// filters and a causal prior filter, all applied to the previous weights.
struct DynamicConvAttention {
  DcaConfig cfg;
  Tensor static_filter;       // (static_channels, static_kernel)
  nn::Linear static_proj;     // static_channels -> attention_dim (bias is the energy bias)
  nn::Linear dyn_hidden, dyn_filters;
  Tensor dyn_proj;            // (attention_dim, dynamic_channels)
  Tensor energy;              // (1, attention_dim)
  Tensor prior;               // fixed (1, prior_length + 1), reversed taps

  DynamicConvAttention() = default;
  DynamicConvAttention(std::size_t query_dim, const DcaConfig& cfg, Rng& rng);
  Attention operator()(const Tensor& query, const Tensor& previous, const Tensor& memory) const;
  ParamList params() const;
};

Tensor initial_alignment(std::size_t length);  // one-hot at frame 0

struct PostNet {
  std::vector<nn::Conv1d> convs;  // last one zero-initialized

  PostNet() = default;
  PostNet(std::size_t dim, std::size_t channels, std::size_t layers, std::size_t kernel, Rng& rng);
  Tensor operator()(const Tensor& x) const;  // x + residual
  ParamList params() const;
};

struct DecoderOutput {
  Tensor pre;          // (D1, T_out)
  Tensor post;         // (D1, T_out)
  Tensor gate_logits;  // (1, T_out)
  Matrix alignment;    // (T_out, T_in)
  bool truncated = false;
};

struct AccentDecoder {
  nn::Linear prenet1, prenet2;
  nn::LstmCell attention_rnn, decoder_rnn;
  DynamicConvAttention attention;
  nn::Linear frame_proj, gate_proj;
  PostNet postnet;
  std::size_t content_dim = 0;
  double prenet_dropout = 0;

  AccentDecoder() = default;
  AccentDecoder(const Bn2BnConfig& cfg, Rng& rng);
  // Teacher-forced pass; dropout rng only used when non-null.
  DecoderOutput teacher_force(const Tensor& memory, const Tensor& target, Rng* dropout) const;
  // Free-running generation; halts at the first gate above 0.5 or at max_len.
  DecoderOutput generate(const Tensor& memory, std::size_t max_len) const;
  ParamList params() const;
};

struct LanguageClassifier {
  std::vector<nn::Conv1d> convs;
  nn::GruCell gru;
  nn::Linear mlp1, mlp2;

  LanguageClassifier() = default;
  LanguageClassifier(const Bn2BnConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& z) const;  // (n_languages, 1) logits
  ParamList params() const;
};

struct LossParts {
  Tensor total;
  double pre = 0, post = 0, l18 = 0, gate = 0;
};

// Three MAE reconstruction terms plus gate BCE, summed without weights.
// gate_prob and gate_target are (1, T) or longer when trained past the end.
LossParts bn2bn_loss(const Tensor& pre, const Tensor& post, const Tensor& l18, const Tensor& gate_prob,
                     const Tensor& target, const Tensor& target_l18, const Tensor& gate_target);

// Zeros with ones from the last frame through `padding` frames past the end.
Tensor gate_targets(std::size_t length, std::size_t padding = 0);

struct Conversion {
  Matrix l10;  // post-net output
  Matrix l18;  // empty unless requested
  Matrix alignment;
  bool truncated = false;
};

class Bn2BnModel {
 public:
  Bn2BnModel() = default;
  Bn2BnModel(const Bn2BnConfig& cfg, Rng& rng);

  const Bn2BnConfig& config() const { return cfg_; }
  std::size_t accent_index(const std::string& name) const;  // LookupError when unknown

  Tensor encode(const Tensor& x) const;  // (D2, T)
  DecoderOutput decode(std::size_t accent, const Tensor& memory, std::size_t max_len) const;
  Tensor predict_l18(const Tensor& l10) const;
  Tensor classify_language(const Tensor& z) const;  // through the gradient reversal
  Conversion convert(const Matrix& x, const std::string& target, bool with_l18 = false) const;

  const AccentDecoder& decoder(std::size_t j) const { return decoders_.at(j); }
  AccentDecoder& decoder(std::size_t j) { return decoders_.at(j); }
  const LanguageClassifier& language_classifier() const { return classifier_; }

  ParamList params() const;
  ParamList adversary_params() const;
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  Bn2BnConfig cfg_;
  ConformerStack encoder_;
  std::vector<AccentDecoder> decoders_;
  ConformerStack l18_;
  LanguageClassifier classifier_;
};

// Parallel recordings of one (speaker, content): per accent L10 and L18
// sequences; accents without a recording hold empty matrices.
struct ParallelGroup {
  int speaker = 0;
  int content = 0;
  int language = 0;
  std::vector<Matrix> l10;
  std::vector<Matrix> l18;
};

// Every manifest cell for the given speakers and contents, restricted to the
// accents of each content's language. Missing cells raise ManifestError.
std::vector<ParallelGroup> groups_from_world(const toy::World& world, const toy::ParallelManifest& manifest,
                                             const std::vector<int>& speakers, const std::vector<int>& contents);

struct Bn2BnTrainConfig {
  int steps = 3000;
  double lr = 2e-3;
  double lr_final = 2e-4;
  double clip_norm = 1.0;
  double weight_decay = 1e-6;
  // Frames decoded past the end with gate target 1, as zero padding does in
  // batched training; otherwise each sequence has a single positive.
  std::size_t gate_padding = 4;
  bool joint_l18 = true;  // false: the predictor sees detached post-net output
  double adversarial_weight = 1.0;
  int log_every = 100;
  std::uint64_t seed = 2;
};

struct Bn2BnTrainLog {
  std::vector<double> losses;     // mean seq2seq loss per logging window
  std::vector<double> adversary;  // mean language CE per logging window
  double final_loss = 0;
};

// Samples (group, source accent) uniformly; each step trains every decoder
// that has a target for that group.
Bn2BnTrainLog train_bn2bn(Bn2BnModel& model, const std::vector<ParallelGroup>& groups, const Bn2BnTrainConfig& cfg,
                          const std::function<void(int, double)>& progress = {});

}  // namespace vs::bn2bn

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "voiceshop/matrix.hpp"
#include "voiceshop/rng.hpp"

// Synthetic world with known generative maps: speakers (timbre, age, gender),
// contents as token sequences, accents as invertible transforms of content
// features, and a fixed renderer from (speaker, content) to mel-like matrices.
namespace vs::toy {

struct WorldConfig {
  int n_speakers = 32;
  int m_accents = 3;
  int k_contents = 16;
  int n_targets = 8;          // timbre-matched target speakers P (taken from the front of the speaker list)
  int n_languages = 1;        // accents and contents are assigned to languages round-robin
  int utts_per_speaker = 10;  // random (content, accent) utterances per speaker for backbone training
  std::uint64_t seed = 7;

  int timbre_dim = 8;
  int speaker_dim = 16;  // D_w
  int content_dim = 8;   // D1 (L10 features)
  int l18_dim = 8;
  int vocab = 16;
  int mel_bins = 20;
  int hidden = 16;
  int min_len = 20;
  int max_len = 60;
  int min_token_frames = 4;
  int max_token_frames = 7;
  double age_min = 20;
  double age_max = 90;
  double embed_noise = 0.15;
  double leakage = 0.02;
  double rate_min = 0.75;
  double rate_max = 1.33;
  double prosody_amp = 0.3;

  void validate() const;
  std::string to_json() const;
  static WorldConfig from_json(const std::string& text);
};

inline double age_normalize(double years) { return (years - 55.0) / 20.0; }
inline double age_denormalize(double n) { return 55.0 + 20.0 * n; }

struct ToySpeaker {
  int id = -1;
  Vector u;  // timbre latent
  double age = 55;
  int gender_class = 1;  // +1 / -1
  double gender_latent = 1;  // sign equals gender_class
  Vector w_star;             // ground-truth speaker embedding
};

struct AccentTransform {
  int id = 0;
  std::string name;
  int language = 0;
  Matrix mixer;  // orthogonal (D1, D1)
  double rate = 1.0;
  Vector bias_amp;    // per channel
  Vector bias_phase;  // per channel
  double bias_period = 24.0;  // frames

  static AccentTransform identity(int dim);
};

struct Content {
  int id = 0;
  int language = 0;
  std::vector<int> tokens;  // one per frame
  Matrix base;              // (D1, T)
};

struct Utterance {
  int speaker = 0;
  int content = 0;
  int accent = 0;
};

struct OracleEstimate {
  int speaker_id = -1;
  double age = 0;
  double gender_latent = 0;
  Vector timbre;
  double distance = 0;    // to the nearest known timbre
  double confidence = 0;  // in (0, 1]; below kRejectThreshold means "no known speaker"
};

inline constexpr double kRejectThreshold = 0.5;

struct ManifestItem {
  std::string accent;
  int speaker = 0;
  int content = 0;
  std::string features_path;
};

struct ParallelManifest {
  std::vector<std::string> accents;
  std::vector<int> speakers;  // original speakers O
  std::vector<int> targets;   // timbre-matched target speakers P
  std::vector<int> contents;
  std::vector<ManifestItem> items;

  std::string to_json() const;
  static ParallelManifest from_json(const std::string& text);
  const ManifestItem& find(const std::string& accent, int speaker, int content) const;
};

// Channel mix, resample to round(T*rate) frames, add the prosody bias.
Matrix apply_accent(const Matrix& base, const AccentTransform& accent);
// Undoes apply_accent, resampling back to `base_len` frames.
Matrix invert_accent(const Matrix& accented, const AccentTransform& accent, int base_len);
// Linear interpolation with both endpoints aligned.
Matrix resample(const Matrix& x, int out_len);
// Nearest-frame resampling for label sequences.
std::vector<int> resample_labels(const std::vector<int>& labels, int out_len);

class World {
 public:
  // Regenerates with a new sub-seed until attributes are linearly decodable
  // from w* (R^2 >= 0.95); attempts() reports how many tries were needed.
  static World generate(const WorldConfig& cfg);

  const WorldConfig& config() const { return cfg_; }
  int attempts() const { return attempts_; }
  const std::vector<ToySpeaker>& speakers() const { return speakers_; }
  const std::vector<AccentTransform>& accents() const { return accents_; }
  const std::vector<Content>& contents() const { return contents_; }
  const std::vector<Utterance>& utterances() const { return utterances_; }
  const ToySpeaker& speaker(int id) const;
  const Content& content(int id) const;
  const AccentTransform& accent(int id) const;
  int accent_index(const std::string& name) const;

  // A fresh speaker drawn from the world prior (id -1).
  ToySpeaker sample_speaker(num::Rng& rng) const;
  ToySpeaker make_speaker(const Vector& u, double age, double gender_latent, num::Rng& noise) const;
  Vector embed(const Vector& u, double age, double gender_latent) const;

  // Accented content features with the per-item leakage noise; (D1, round(T*rate)).
  Matrix content_features(int content, int accent, int speaker) const;
  // Frame-level token labels aligned with content_features.
  std::vector<int> content_labels(int content, int accent) const;
  Matrix l18_features(const Matrix& l10) const;
  Matrix render_mel(const Vector& w_star, const Matrix& content) const;
  Matrix render_mel(const ToySpeaker& s, const Matrix& content) const { return render_mel(s.w_star, content); }

  OracleEstimate oracle_decode_w(const Vector& w) const;
  OracleEstimate oracle_decode_mel(const Matrix& mel) const;

  // R^2 of the least-squares decode of age and gender latent over the world speakers.
  std::pair<double, double> attribute_r2() const;

 private:
  World() = default;
  void build(std::uint64_t seed);
  OracleEstimate finish_decode(const Vector& latents) const;
  Vector mel_stats(const Matrix& mel) const;

  WorldConfig cfg_;
  int attempts_ = 1;
  std::vector<ToySpeaker> speakers_;
  std::vector<AccentTransform> accents_;
  std::vector<Content> contents_;
  std::vector<Utterance> utterances_;
  Matrix token_embed_;   // (D1, vocab)
  Matrix attr_map_;      // (D_w, 2 + timbre) columns: age, gender, timbre
  Matrix attr_pinv_;
  Matrix l18_map_;
  Matrix render_s_, render_g_, render_b_, render_a_;
  Vector render_bias_;
  Matrix mel_decoder_;  // ridge map from mel stats to latents
  double w_noise_scale_ = 1;
  std::uint64_t gen_seed_ = 0;
};

ParallelManifest build_timbre_matched(const World& world, const std::vector<int>& targets);

// Raw feature files: u64 rows | u64 cols | f64 values, little-endian.
void write_matrix(const std::filesystem::path& path, const Matrix& m);
Matrix read_matrix(const std::filesystem::path& path);

// World directory: world.json, manifest.json, features/*.bin, mels/*.bin.
void save_world(const World& world, const std::filesystem::path& dir);
World load_world(const std::filesystem::path& dir);

}  // namespace vs::toy

#include "voiceshop/toyworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "voiceshop/errors.hpp"

namespace vs::toy {

using json = nlohmann::json;
using num::Rng;

namespace {

Matrix randn(int rows, int cols, Rng& rng, double sd) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

Vector randn(int n, Rng& rng, double sd) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = sd * rng.normal();
  return v;
}

Matrix random_orthogonal(int n, Rng& rng) {
  Matrix g = randn(n, n, rng, 1.0);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < n; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  return q;
}

std::uint64_t item_seed(std::uint64_t base, int a, int b, int c) {
  std::uint64_t h = base ^ 0x9E3779B97F4A7C15ULL;
  for (std::uint64_t v : {std::uint64_t(a), std::uint64_t(b), std::uint64_t(c)}) {
    h ^= v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    h *= 0xBF58476D1CE4E5B9ULL;
  }
  return h;
}

constexpr int kMelStatsPerBin = 5;

Matrix prosody(const AccentTransform& a, int len) {
  Matrix b(a.bias_amp.size(), len);
  for (Eigen::Index c = 0; c < b.rows(); ++c)
    for (int t = 0; t < len; ++t)
      b(c, t) = a.bias_amp[c] * std::sin(2.0 * std::numbers::pi * t / a.bias_period + a.bias_phase[c]);
  return b;
}

double r_squared(const std::vector<double>& truth, const std::vector<double>& pred) {
  double mean = 0;
  for (double v : truth) mean += v;
  mean /= truth.size();
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  return ss_tot > 0 ? 1.0 - ss_res / ss_tot : 0.0;
}

}  // namespace

// ---- config ----

void WorldConfig::validate() const {
  if (n_speakers < 1 || m_accents < 1 || k_contents < 1) throw ConfigError("world: counts must be >= 1");
  if (n_targets < 1 || n_targets > n_speakers) throw ConfigError("world: n_targets must be in [1, n_speakers]");
  if (n_languages < 1 || n_languages > m_accents || n_languages > k_contents)
    throw ConfigError("world: n_languages must be in [1, min(accents, contents)]");
  if (speaker_dim < timbre_dim + 2) throw ConfigError("world: speaker_dim must be >= timbre_dim + 2");
  if (min_len < 1 || max_len < min_len) throw ConfigError("world: bad content length range");
  if (min_token_frames < 1 || max_token_frames < min_token_frames) throw ConfigError("world: bad token duration range");
  if (rate_min <= 0 || rate_max < rate_min) throw ConfigError("world: bad rate range");
  if (vocab < 2 || mel_bins < 1 || content_dim < 1 || hidden < 1) throw ConfigError("world: bad dimensions");
}

std::string WorldConfig::to_json() const {
  json j = {{"n_speakers", n_speakers},
            {"m_accents", m_accents},
            {"k_contents", k_contents},
            {"n_targets", n_targets},
            {"n_languages", n_languages},
            {"utts_per_speaker", utts_per_speaker},
            {"seed", seed},
            {"timbre_dim", timbre_dim},
            {"speaker_dim", speaker_dim},
            {"content_dim", content_dim},
            {"l18_dim", l18_dim},
            {"vocab", vocab},
            {"mel_bins", mel_bins},
            {"hidden", hidden},
            {"min_len", min_len},
            {"max_len", max_len},
            {"min_token_frames", min_token_frames},
            {"max_token_frames", max_token_frames},
            {"age_min", age_min},
            {"age_max", age_max},
            {"embed_noise", embed_noise},
            {"leakage", leakage},
            {"rate_min", rate_min},
            {"rate_max", rate_max},
            {"prosody_amp", prosody_amp}};
  return j.dump(2);
}

WorldConfig WorldConfig::from_json(const std::string& text) {
  WorldConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("world config: ") + e.what());
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("n_speakers", c.n_speakers);
  get("m_accents", c.m_accents);
  get("k_contents", c.k_contents);
  get("n_targets", c.n_targets);
  get("n_languages", c.n_languages);
  get("utts_per_speaker", c.utts_per_speaker);
  get("seed", c.seed);
  get("timbre_dim", c.timbre_dim);
  get("speaker_dim", c.speaker_dim);
  get("content_dim", c.content_dim);
  get("l18_dim", c.l18_dim);
  get("vocab", c.vocab);
  get("mel_bins", c.mel_bins);
  get("hidden", c.hidden);
  get("min_len", c.min_len);
  get("max_len", c.max_len);
  get("min_token_frames", c.min_token_frames);
  get("max_token_frames", c.max_token_frames);
  get("age_min", c.age_min);
  get("age_max", c.age_max);
  get("embed_noise", c.embed_noise);
  get("leakage", c.leakage);
  get("rate_min", c.rate_min);
  get("rate_max", c.rate_max);
  get("prosody_amp", c.prosody_amp);
  c.validate();
  return c;
}

// ---- accents ----

AccentTransform AccentTransform::identity(int dim) {
  AccentTransform a;
  a.name = "identity";
  a.mixer = Matrix::Identity(dim, dim);
  a.bias_amp = Vector::Zero(dim);
  a.bias_phase = Vector::Zero(dim);
  return a;
}

Matrix resample(const Matrix& x, int out_len) {
  if (out_len < 1) throw ContractError("resample: output length must be >= 1");
  const Eigen::Index in_len = x.cols();
  if (in_len < 1) throw ContractError("resample: empty input");
  Matrix out(x.rows(), out_len);
  for (int i = 0; i < out_len; ++i) {
    double pos = out_len == 1 ? 0.0 : static_cast<double>(i) * (in_len - 1) / (out_len - 1);
    auto lo = static_cast<Eigen::Index>(std::floor(pos));
    Eigen::Index hi = std::min(lo + 1, in_len - 1);
    double frac = pos - lo;
    out.col(i) = (1 - frac) * x.col(lo) + frac * x.col(hi);
  }
  return out;
}

std::vector<int> resample_labels(const std::vector<int>& labels, int out_len) {
  if (labels.empty() || out_len < 1) throw ContractError("resample_labels: empty input");
  std::vector<int> out(out_len);
  const auto in_len = static_cast<long>(labels.size());
  for (int i = 0; i < out_len; ++i) {
    double pos = out_len == 1 ? 0.0 : static_cast<double>(i) * (in_len - 1) / (out_len - 1);
    out[i] = labels[std::clamp(std::lround(pos), 0L, in_len - 1)];
  }
  return out;
}

Matrix apply_accent(const Matrix& base, const AccentTransform& accent) {
  if (base.rows() != accent.mixer.rows()) throw ContractError("apply_accent: channel mismatch");
  int out_len = std::max(1, static_cast<int>(std::lround(base.cols() * accent.rate)));
  Matrix mixed = accent.mixer * base;
  Matrix out = out_len == base.cols() ? mixed : resample(mixed, out_len);
  return out + prosody(accent, out_len);
}

Matrix invert_accent(const Matrix& accented, const AccentTransform& accent, int base_len) {
  Matrix x = accented - prosody(accent, static_cast<int>(accented.cols()));
  if (base_len != accented.cols()) x = resample(x, base_len);
  return accent.mixer.transpose() * x;
}

// ---- world ----

World World::generate(const WorldConfig& cfg) {
  cfg.validate();
  World w;
  w.cfg_ = cfg;
  for (int attempt = 0; attempt < 16; ++attempt) {
    w.attempts_ = attempt + 1;
    w.build(item_seed(cfg.seed, attempt, 0, 0));
    auto [r2_age, r2_gender] = w.attribute_r2();
    if (r2_age >= 0.95 && r2_gender >= 0.95) return w;
  }
  throw TrainingError("world generation: attributes not decodable after 16 sub-seeds");
}

void World::build(std::uint64_t seed) {
  gen_seed_ = seed;
  const auto& c = cfg_;
  Rng root(seed);
  Rng maps = root.fork(), spk_rng = root.fork(), acc_rng = root.fork(), con_rng = root.fork(), utt_rng = root.fork(),
      cal_rng = root.fork();

  const int n_lat = 2 + c.timbre_dim;
  attr_map_ = randn(c.speaker_dim, n_lat, maps, 1.0 / std::sqrt(static_cast<double>(n_lat)) * 1.6);
  // Age and gender are the most salient directions, as in real speaker embeddings.
  attr_map_.col(0) *= 2.0;
  attr_map_.col(1) *= 1.5;
  attr_pinv_ = attr_map_.completeOrthogonalDecomposition().pseudoInverse();
  token_embed_ = randn(c.content_dim, c.vocab, maps, 1.0);
  l18_map_ = randn(c.l18_dim, c.content_dim, maps, 1.0 / std::sqrt(static_cast<double>(c.content_dim)));
  render_s_ = randn(c.mel_bins, c.speaker_dim, maps, 0.75 / std::sqrt(static_cast<double>(c.speaker_dim)));
  render_g_ = randn(c.mel_bins, c.hidden, maps, 1.5 / std::sqrt(static_cast<double>(c.hidden)));
  render_b_ = randn(c.hidden, c.content_dim, maps, 1.0 / std::sqrt(static_cast<double>(c.content_dim)));
  render_a_ = randn(c.hidden, c.speaker_dim, maps, 0.3 / std::sqrt(static_cast<double>(c.speaker_dim)));
  render_bias_ = randn(c.hidden, maps, 0.3);
  w_noise_scale_ = c.embed_noise;

  speakers_.clear();
  for (int i = 0; i < c.n_speakers; ++i) {
    ToySpeaker s = sample_speaker(spk_rng);
    // Alternate classes so both genders are always present.
    s.gender_class = i % 2 == 0 ? 1 : -1;
    s.gender_latent = s.gender_class * std::fabs(s.gender_latent);
    s = make_speaker(s.u, s.age, s.gender_latent, spk_rng);
    s.id = i;
    speakers_.push_back(std::move(s));
  }

  accents_.clear();
  for (int a = 0; a < c.m_accents; ++a) {
    AccentTransform t;
    t.id = a;
    t.name = "accent" + std::to_string(a);
    t.language = a % c.n_languages;
    t.mixer = random_orthogonal(c.content_dim, acc_rng);
    t.rate = a == 0 ? 1.0 : acc_rng.uniform(c.rate_min, c.rate_max);
    t.bias_amp = Vector(c.content_dim);
    t.bias_phase = Vector(c.content_dim);
    for (int d = 0; d < c.content_dim; ++d) {
      t.bias_amp[d] = c.prosody_amp * acc_rng.uniform(0.5, 1.0);
      t.bias_phase[d] = acc_rng.uniform(0, 2 * std::numbers::pi);
    }
    t.bias_period = acc_rng.uniform(16, 40);
    accents_.push_back(std::move(t));
  }

  contents_.clear();
  for (int k = 0; k < c.k_contents; ++k) {
    Content ct;
    ct.id = k;
    ct.language = k % c.n_languages;
    int len = c.min_len + static_cast<int>(con_rng.below(c.max_len - c.min_len + 1));
    int prev = -1;
    while (static_cast<int>(ct.tokens.size()) < len) {
      int tok;
      do tok = static_cast<int>(con_rng.below(c.vocab));
      while (tok == prev);
      prev = tok;
      int dur = c.min_token_frames + static_cast<int>(con_rng.below(c.max_token_frames - c.min_token_frames + 1));
      for (int d = 0; d < dur && static_cast<int>(ct.tokens.size()) < len; ++d) ct.tokens.push_back(tok);
    }
    Matrix raw(c.content_dim, len);
    for (int t = 0; t < len; ++t) raw.col(t) = token_embed_.col(ct.tokens[t]);
    // Light temporal smoothing so resampling stays close to invertible.
    ct.base = raw;
    for (int t = 0; t < len; ++t) {
      Eigen::VectorXd acc = 0.5 * raw.col(t);
      acc += 0.25 * raw.col(std::max(t - 1, 0));
      acc += 0.25 * raw.col(std::min(t + 1, len - 1));
      ct.base.col(t) = acc;
    }
    contents_.push_back(std::move(ct));
  }

  utterances_.clear();
  for (int s = 0; s < c.n_speakers; ++s) {
    for (int u = 0; u < c.utts_per_speaker; ++u) {
      Utterance ut;
      ut.speaker = s;
      ut.content = static_cast<int>(utt_rng.below(c.k_contents));
      // Only accents of the content's language are realized.
      std::vector<int> allowed;
      for (const auto& a : accents_)
        if (a.language == contents_[ut.content].language) allowed.push_back(a.id);
      ut.accent = allowed[utt_rng.below(allowed.size())];
      utterances_.push_back(ut);
    }
  }

  // Ridge decoder from mel statistics to latents, calibrated on prior speakers.
  const int n_cal = 1500;
  const int n_feat = kMelStatsPerBin * c.mel_bins + 1;
  Matrix feats(n_cal, n_feat), targets(n_cal, n_lat);
  for (int i = 0; i < n_cal; ++i) {
    ToySpeaker s = sample_speaker(cal_rng);
    int k = static_cast<int>(cal_rng.below(c.k_contents));
    std::vector<int> allowed;
    for (const auto& a : accents_)
      if (a.language == contents_[k].language) allowed.push_back(a.id);
    int a = allowed[cal_rng.below(allowed.size())];
    Matrix mel = render_mel(s.w_star, apply_accent(contents_[k].base, accents_[a]));
    feats.row(i) = mel_stats(mel).transpose();
    targets(i, 0) = age_normalize(s.age);
    targets(i, 1) = s.gender_latent;
    targets.row(i).tail(c.timbre_dim) = s.u.transpose();
  }
  Eigen::MatrixXd xtx = feats.transpose() * feats;
  xtx.diagonal().array() += 1e-3 * n_cal;
  xtx(n_feat - 1, n_feat - 1) -= 1e-3 * n_cal;  // leave the intercept unpenalized
  mel_decoder_ = xtx.ldlt().solve(Eigen::MatrixXd(feats.transpose() * targets)).transpose();
}

const ToySpeaker& World::speaker(int id) const {
  if (id < 0 || id >= static_cast<int>(speakers_.size())) throw LookupError("unknown speaker id " + std::to_string(id));
  return speakers_[id];
}

const Content& World::content(int id) const {
  if (id < 0 || id >= static_cast<int>(contents_.size())) throw LookupError("unknown content id " + std::to_string(id));
  return contents_[id];
}

const AccentTransform& World::accent(int id) const {
  if (id < 0 || id >= static_cast<int>(accents_.size())) throw LookupError("unknown accent id " + std::to_string(id));
  return accents_[id];
}

int World::accent_index(const std::string& name) const {
  for (const auto& a : accents_)
    if (a.name == name) return a.id;
  throw LookupError("unknown accent '" + name + "'");
}

Vector World::embed(const Vector& u, double age, double gender_latent) const {
  Vector lat(2 + cfg_.timbre_dim);
  lat[0] = age_normalize(age);
  lat[1] = gender_latent;
  lat.tail(cfg_.timbre_dim) = u;
  return attr_map_ * lat;
}

ToySpeaker World::make_speaker(const Vector& u, double age, double gender_latent, Rng& noise) const {
  ToySpeaker s;
  s.u = u;
  s.age = age;
  s.gender_latent = gender_latent;
  s.gender_class = gender_latent >= 0 ? 1 : -1;
  s.w_star = embed(u, age, gender_latent) + randn(cfg_.speaker_dim, noise, w_noise_scale_);
  return s;
}

ToySpeaker World::sample_speaker(Rng& rng) const {
  Vector u = randn(cfg_.timbre_dim, rng, 1.0);
  double age = rng.uniform(cfg_.age_min, cfg_.age_max);
  int cls = rng.uniform() < 0.5 ? -1 : 1;
  double g = cls * rng.uniform(0.6, 1.4);
  return make_speaker(u, age, g, rng);
}

Matrix World::content_features(int content_id, int accent_id, int speaker_id) const {
  const Content& ct = content(content_id);
  const AccentTransform& a = accent(accent_id);
  Matrix x = apply_accent(ct.base, a);
  Rng leak(item_seed(gen_seed_, content_id + 1, accent_id + 1, speaker_id + 1));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += cfg_.leakage * leak.normal();
  return x;
}

std::vector<int> World::content_labels(int content_id, int accent_id) const {
  const Content& ct = content(content_id);
  const AccentTransform& a = accent(accent_id);
  int out_len = std::max(1, static_cast<int>(std::lround(ct.tokens.size() * a.rate)));
  return resample_labels(ct.tokens, out_len);
}

Matrix World::l18_features(const Matrix& l10) const {
  if (l10.rows() != l18_map_.cols()) throw ContractError("l18_features: channel mismatch");
  return l18_map_ * l10;
}

Matrix World::render_mel(const Vector& w_star, const Matrix& content) const {
  if (w_star.size() != cfg_.speaker_dim || content.rows() != cfg_.content_dim)
    throw ContractError("render_mel: dimension mismatch");
  const Eigen::Index frames = content.cols() * 4;
  Vector spk = render_s_ * w_star;
  Vector hid_bias = render_a_ * w_star + render_bias_;
  Matrix hidden = (render_b_ * content).colwise() + hid_bias;
  Matrix per_content = render_g_ * hidden.array().tanh().matrix();
  Matrix mel(cfg_.mel_bins, frames);
  for (Eigen::Index t = 0; t < frames; ++t) mel.col(t) = (spk + per_content.col(t / 4)).cwiseMax(-4.0).cwiseMin(4.0);
  return mel;
}

Vector World::mel_stats(const Matrix& mel) const {
  const Eigen::Index f = mel.rows();
  Vector out(kMelStatsPerBin * f + 1);
  std::vector<double> row(mel.cols());
  for (Eigen::Index b = 0; b < f; ++b) {
    double mean = mel.row(b).mean();
    double var = (mel.row(b).array() - mean).square().mean();
    for (Eigen::Index t = 0; t < mel.cols(); ++t) row[t] = mel(b, t);
    std::sort(row.begin(), row.end());
    auto q = [&](double p) { return row[static_cast<std::size_t>(p * (row.size() - 1))]; };
    out[b] = mean;
    out[f + b] = std::sqrt(var);
    out[2 * f + b] = q(0.1);
    out[3 * f + b] = q(0.5);
    out[4 * f + b] = q(0.9);
  }
  out[kMelStatsPerBin * f] = 1.0;
  return out;
}

OracleEstimate World::finish_decode(const Vector& lat) const {
  OracleEstimate e;
  e.age = age_denormalize(lat[0]);
  e.gender_latent = lat[1];
  e.timbre = lat.tail(cfg_.timbre_dim);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : speakers_) {
    double d = (s.u - e.timbre).norm();
    if (d < best) {
      best = d;
      e.speaker_id = s.id;
    }
  }
  e.distance = best;
  return e;
}

OracleEstimate World::oracle_decode_w(const Vector& w) const {
  if (w.size() != cfg_.speaker_dim) throw ContractError("oracle_decode_w: dimension mismatch");
  Vector lat = attr_pinv_ * w;
  OracleEstimate e = finish_decode(lat);
  double residual = (w - attr_map_ * lat).squaredNorm();
  // Clean embeddings carry noise of squared norm ~ speaker_dim * noise^2.
  double tau2 = 4.0 * cfg_.speaker_dim * w_noise_scale_ * w_noise_scale_;
  e.confidence = std::exp(-(residual + e.distance * e.distance) / (2.0 * tau2));
  return e;
}

OracleEstimate World::oracle_decode_mel(const Matrix& mel) const {
  if (mel.rows() != cfg_.mel_bins || mel.cols() < 1) throw ContractError("oracle_decode_mel: shape mismatch");
  Vector lat = mel_decoder_ * mel_stats(mel);
  OracleEstimate e = finish_decode(lat);
  e.confidence = std::exp(-e.distance * e.distance / 2.0);
  return e;
}

std::pair<double, double> World::attribute_r2() const {
  std::vector<double> age, age_hat, g, g_hat;
  for (const auto& s : speakers_) {
    Vector lat = attr_pinv_ * s.w_star;
    age.push_back(age_normalize(s.age));
    age_hat.push_back(lat[0]);
    g.push_back(s.gender_latent);
    g_hat.push_back(lat[1]);
  }
  return {r_squared(age, age_hat), r_squared(g, g_hat)};
}

// ---- manifest ----

std::string ParallelManifest::to_json() const {
  json items_j = json::array();
  for (const auto& it : items)
    items_j.push_back({{"accent", it.accent}, {"speaker", it.speaker}, {"content", it.content}, {"features_path", it.features_path}});
  json j = {{"accents", accents}, {"speakers", speakers}, {"targets", targets}, {"contents", contents}, {"items", items_j}};
  return j.dump(2);
}

ParallelManifest ParallelManifest::from_json(const std::string& text) {
  ParallelManifest m;
  try {
    json j = json::parse(text);
    m.accents = j.at("accents").get<std::vector<std::string>>();
    m.speakers = j.at("speakers").get<std::vector<int>>();
    if (j.contains("targets")) m.targets = j.at("targets").get<std::vector<int>>();
    m.contents = j.at("contents").get<std::vector<int>>();
    for (const auto& it : j.at("items"))
      m.items.push_back({it.at("accent").get<std::string>(), it.at("speaker").get<int>(), it.at("content").get<int>(),
                         it.at("features_path").get<std::string>()});
  } catch (const json::exception& e) {
    throw ManifestError(std::string("manifest: ") + e.what());
  }
  return m;
}

const ManifestItem& ParallelManifest::find(const std::string& accent, int speaker, int content) const {
  for (const auto& it : items)
    if (it.accent == accent && it.speaker == speaker && it.content == content) return it;
  throw ManifestError("manifest hole: no item for accent '" + accent + "', speaker " + std::to_string(speaker) +
                      ", content " + std::to_string(content));
}

ParallelManifest build_timbre_matched(const World& world, const std::vector<int>& targets) {
  ParallelManifest m;
  for (const auto& a : world.accents()) m.accents.push_back(a.name);
  for (const auto& s : world.speakers()) m.speakers.push_back(s.id);
  m.targets = targets;
  for (const auto& c : world.contents()) m.contents.push_back(c.id);
  for (const auto& a : world.accents())
    for (const auto& c : world.contents()) {
      if (a.language != c.language) continue;
      for (int p : targets) {
        world.speaker(p);
        m.items.push_back({a.name, p, c.id,
                           "features/" + a.name + "_s" + std::to_string(p) + "_c" + std::to_string(c.id) + ".bin"});
      }
    }
  return m;
}

// ---- files ----

void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  auto put64 = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
  };
  put64(static_cast<std::uint64_t>(m.rows()));
  put64(static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits;
    double v = m.data()[i];
    std::memcpy(&bits, &v, 8);
    put64(bits);
  }
}

Matrix read_matrix(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("feature file not found: " + path.string());
  auto get64 = [&]() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      int c = is.get();
      if (c == EOF) throw ManifestError("truncated feature file: " + path.string());
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
  };
  auto rows = get64(), cols = get64();
  if (rows * cols > (1ULL << 32)) throw ManifestError("implausible matrix size in " + path.string());
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits = get64();
    std::memcpy(m.data() + i, &bits, 8);
  }
  return m;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("missing " + path.string() + " (run `voiceshop world` first)");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

void save_world(const World& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "features");
  std::filesystem::create_directories(dir / "mels");
  write_text(dir / "world.json", world.config().to_json());
  std::vector<int> targets;
  for (int i = 0; i < world.config().n_targets; ++i) targets.push_back(i);
  auto manifest = build_timbre_matched(world, targets);
  write_text(dir / "manifest.json", manifest.to_json());
  for (const auto& it : manifest.items) {
    int a = world.accent_index(it.accent);
    Matrix feat = world.content_features(it.content, a, it.speaker);
    write_matrix(dir / it.features_path, feat);
    auto mel_path = dir / "mels" / std::filesystem::path(it.features_path).filename();
    write_matrix(mel_path, world.render_mel(world.speaker(it.speaker), feat));
  }
}

World load_world(const std::filesystem::path& dir) {
  return World::generate(WorldConfig::from_json(read_text(dir / "world.json")));
}

}  // namespace vs::toy

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "voiceshop/errors.hpp"
#include "voiceshop/toyworld.hpp"

using namespace vs;
using namespace vs::toy;

namespace {

const World& default_world() {
  static const World w = World::generate(WorldConfig{});
  return w;
}

}  // namespace

TEST(GenWorld, SameSeedSameWorld) {
  World a = World::generate(WorldConfig{}), b = World::generate(WorldConfig{});
  ASSERT_EQ(a.speakers().size(), b.speakers().size());
  for (std::size_t i = 0; i < a.speakers().size(); ++i) EXPECT_EQ(a.speakers()[i].w_star, b.speakers()[i].w_star);
  for (std::size_t i = 0; i < a.contents().size(); ++i) EXPECT_EQ(a.contents()[i].base, b.contents()[i].base);
  EXPECT_EQ(a.render_mel(a.speaker(3), a.content_features(2, 1, 3)), b.render_mel(b.speaker(3), b.content_features(2, 1, 3)));
  WorldConfig other;
  other.seed = 8;
  EXPECT_NE(World::generate(other).speakers()[0].w_star, a.speakers()[0].w_star);
}

TEST(GenWorld, SmallGridCount) {
  WorldConfig c;
  c.n_speakers = 2;
  c.m_accents = 2;
  c.k_contents = 3;
  c.n_targets = 2;
  World w = World::generate(c);
  EXPECT_EQ(build_timbre_matched(w, {0, 1}).items.size(), 12u);
}

TEST(GenWorld, AttributesDecodable) {
  auto [age, gender] = default_world().attribute_r2();
  EXPECT_GE(age, 0.95);
  EXPECT_GE(gender, 0.95);
  EXPECT_THROW(World::generate(WorldConfig{.n_speakers = 0}), ConfigError);
}

TEST(SynthContent, DeterministicDistinctAndBounded) {
  const auto& w = default_world();
  EXPECT_EQ(w.content(3).base, World::generate(WorldConfig{}).content(3).base);
  std::size_t differ = 0, total = 0;
  for (const auto& a : w.contents()) {
    EXPECT_GE(a.base.cols(), 20);
    EXPECT_LE(a.base.cols(), 60);
    for (const auto& b : w.contents()) {
      if (a.id >= b.id) continue;
      auto n = std::min(a.tokens.size(), b.tokens.size());
      for (std::size_t t = 0; t < n; ++t) differ += (a.base.col(t) - b.base.col(t)).norm() > 1e-9;
      total += n;
    }
  }
  EXPECT_GE(static_cast<double>(differ) / total, 0.9);
  EXPECT_THROW(w.content(99), LookupError);
}

TEST(ApplyAccent, IdentityRateAndInverse) {
  const auto& w = default_world();
  const Matrix& base = w.content(0).base;
  EXPECT_EQ(apply_accent(base, AccentTransform::identity(8)), base);
  AccentTransform slow = AccentTransform::identity(8);
  slow.rate = 0.8;
  EXPECT_EQ(apply_accent(Matrix::Ones(8, 50), slow).cols(), 40);
  for (const auto& a : w.accents()) {
    Matrix q = a.mixer;
    EXPECT_LE((q.transpose() * q - Matrix::Identity(8, 8)).norm(), 1e-8);
    EXPECT_GE(a.rate, 0.75);
    EXPECT_LE(a.rate, 1.33);
    for (const auto& c : w.contents()) {
      Matrix back = invert_accent(apply_accent(c.base, a), a, static_cast<int>(c.base.cols()));
      EXPECT_LE((back - c.base).cwiseAbs().mean(), 0.05) << a.name << " content " << c.id;
    }
  }
}

TEST(RenderMel, DeterministicSpeakerSensitiveAndShaped) {
  const auto& w = default_world();
  Matrix c = w.content_features(1, 0, 0);
  Matrix m1 = w.render_mel(w.speaker(0), c);
  EXPECT_EQ(m1, w.render_mel(w.speaker(0), c));
  EXPECT_EQ(m1.cols(), 4 * c.cols());
  EXPECT_EQ(m1.rows(), 20);
  EXPECT_LE(m1.cwiseAbs().maxCoeff(), 4.0);
  for (int s = 1; s < 6; ++s) EXPECT_GE((m1 - w.render_mel(w.speaker(s), c)).cwiseAbs().mean(), 0.1);
}

TEST(TimbreMatched, CompleteGridVaryingLengthsAndJsonRoundTrip) {
  const auto& w = default_world();
  std::vector<int> targets{0, 1, 2, 3};
  auto m = build_timbre_matched(w, targets);
  EXPECT_EQ(m.items.size(), w.accents().size() * w.contents().size() * targets.size());
  std::set<std::tuple<std::string, int, int>> cells;
  for (const auto& it : m.items) cells.insert({it.accent, it.speaker, it.content});
  EXPECT_EQ(cells.size(), m.items.size());
  std::set<long> lengths;
  for (const auto& a : w.accents()) lengths.insert(w.content_features(0, a.id, 0).cols());
  EXPECT_GT(lengths.size(), 1u);
  std::string text = m.to_json();
  EXPECT_EQ(ParallelManifest::from_json(text).to_json(), text);
  EXPECT_THROW(m.find("accent0", 31, 0), ManifestError);
}

TEST(OracleDecode, WorldSpeakersAgesAndRejection) {
  const auto& w = default_world();
  double age_err = 0;
  for (const auto& s : w.speakers()) {
    auto e = w.oracle_decode_w(s.w_star);
    EXPECT_EQ(e.speaker_id, s.id);
    EXPECT_GE(e.confidence, kRejectThreshold);
    EXPECT_EQ(e.gender_latent > 0, s.gender_class > 0);
    age_err += std::fabs(e.age - s.age);
  }
  EXPECT_LE(age_err / w.speakers().size(), 2.0);
  num::Rng rng(123);
  int rejected = 0;
  for (int i = 0; i < 200; ++i) {
    Vector v(16);
    for (int d = 0; d < 16; ++d) v[d] = rng.normal() * 1.5;
    rejected += w.oracle_decode_w(v).confidence < kRejectThreshold;
  }
  EXPECT_GE(rejected, 190);
}

TEST(OracleDecode, MelDecoderRecoversSpeakersFromRenderedAudio) {
  const auto& w = default_world();
  int hits = 0, n = 0;
  double age_err = 0;
  for (const auto& u : w.utterances()) {
    Matrix mel = w.render_mel(w.speaker(u.speaker), w.content_features(u.content, u.accent, u.speaker));
    auto e = w.oracle_decode_mel(mel);
    hits += e.speaker_id == u.speaker;
    age_err += std::fabs(e.age - w.speaker(u.speaker).age);
    ++n;
  }
  std::cout << "mel speaker id " << double(hits) / n << " age MAE " << age_err / n << "\n";
  EXPECT_GE(static_cast<double>(hits) / n, 0.95);
}

TEST(WorldDirectory, SaveAndLoad) {
  auto dir = std::filesystem::temp_directory_path() / "vs_world_test";
  std::filesystem::remove_all(dir);
  WorldConfig c;
  c.n_speakers = 4;
  c.n_targets = 2;
  c.k_contents = 3;
  World w = World::generate(c);
  save_world(w, dir);
  World back = load_world(dir);
  EXPECT_EQ(back.speakers()[1].w_star, w.speakers()[1].w_star);
  std::ifstream is(dir / "manifest.json");
  std::stringstream ss;
  ss << is.rdbuf();
  auto m = ParallelManifest::from_json(ss.str());
  ASSERT_FALSE(m.items.empty());
  Matrix f = read_matrix(dir / m.items[0].features_path);
  EXPECT_EQ(f, w.content_features(m.items[0].content, w.accent_index(m.items[0].accent), m.items[0].speaker));
  EXPECT_THROW(load_world(dir / "nope"), MissingArtifactError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "voiceshop/errors.hpp"
#include "voiceshop/rng.hpp"
#include "voiceshop/signal.hpp"

using namespace vs;
using namespace vs::signal;

namespace {

Waveform sine(double hz, double amp, double seconds) {
  Waveform w;
  auto n = static_cast<std::size_t>(seconds * w.sample_rate);
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) w.samples[i] = amp * std::sin(2 * std::numbers::pi * hz * i / w.sample_rate);
  return w;
}

}  // namespace

TEST(StftMel, OneSecondGivesOneHundredFrames) {
  auto mel = stft_mel(sine(440, 0.3, 1.0));
  EXPECT_EQ(mel.values.rows(), 80);
  EXPECT_EQ(mel.frames(), 100);
}

TEST(StftMel, DoublingDurationDoublesFrames) {
  EXPECT_EQ(stft_mel(sine(440, 0.3, 0.5)).frames() * 2, stft_mel(sine(440, 0.3, 1.0)).frames());
}

TEST(StftMel, SinePeaksAtNearestCenterBin) {
  MelConfig cfg;
  auto centers = mel_center_frequencies(cfg);
  int expected = 0;
  for (int i = 1; i < cfg.mel_bins; ++i)
    if (std::fabs(centers[i] - 1000) < std::fabs(centers[expected] - 1000)) expected = i;
  auto mel = stft_mel(sine(1000, 0.5, 1.0), cfg);
  for (int f = 10; f < mel.frames() - 10; ++f) {
    Eigen::Index arg;
    mel.values.col(f).maxCoeff(&arg);
    EXPECT_EQ(arg, expected) << "frame " << f;
  }
}

TEST(StftMel, SilenceMapsToFloor) {
  Waveform w;
  w.samples.assign(4800, 0.0);
  auto mel = stft_mel(w);
  EXPECT_EQ(mel.values.minCoeff(), -4.0);
  EXPECT_EQ(mel.values.maxCoeff(), -4.0);
}

TEST(StftMel, ValuesStayInRangeForLoudNoise) {
  num::Rng rng(4);
  Waveform w;
  for (int i = 0; i < 6000; ++i) w.samples.push_back(rng.uniform(-1, 1));
  auto mel = stft_mel(w);
  EXPECT_LE(mel.values.maxCoeff(), 4.0);
  EXPECT_GE(mel.values.minCoeff(), -4.0);
}

TEST(StftMel, ShortSignalsUseRepeatedReflection) {
  Waveform w;
  w.samples = {0.1, -0.2, 0.3};
  auto mel = stft_mel(w);
  EXPECT_EQ(mel.frames(), 1);
  EXPECT_TRUE(mel.values.allFinite());
}

TEST(StftMel, RateMismatchIsConfigError) {
  Waveform w;
  w.sample_rate = 16000;
  w.samples.assign(100, 0.0);
  EXPECT_THROW(stft_mel(w), ConfigError);
  MelConfig bad;
  bad.window = 4096;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(StftMel, FilterbankIsAreaNormalized) {
  MelConfig cfg;
  Matrix fb = mel_filterbank(cfg);
  auto pts = mel_center_frequencies(cfg);
  double df = static_cast<double>(cfg.sample_rate) / cfg.fft_size;
  // A triangle of height 2/(right-left) has unit area; sampled on the FFT grid.
  for (int m = 40; m < 80; ++m) EXPECT_NEAR(fb.row(m).sum() * df, 1.0, 0.02) << m;
  EXPECT_NEAR(hz_to_mel(mel_to_hz(1234.5)), 1234.5, 1e-9);
}

TEST(VocoderLosses, HandExamples) {
  std::vector<double> ones{1, 1}, zeros{0, 0};
  EXPECT_DOUBLE_EQ(energy_loss(ones, zeros), 1.0);
  EXPECT_DOUBLE_EQ(energy_loss(std::vector<double>{1, -1}, std::vector<double>{-1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(time_loss(ones, zeros), 1.0);
  EXPECT_DOUBLE_EQ(phase_loss(std::vector<double>{0, 1, 0}, std::vector<double>{0, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(f0_loss(std::vector<double>{100}, std::vector<double>{200}), std::log(2.0));
  EXPECT_DOUBLE_EQ(f0_loss(std::vector<double>{100}, std::vector<double>{200}),
                   f0_loss(std::vector<double>{300}, std::vector<double>{600}));
  Matrix one = Matrix::Ones(1, 2), zero = Matrix::Zero(1, 2);
  EXPECT_DOUBLE_EQ(feature_matching_loss({one, one}, {zero, zero}), 1.0);
  EXPECT_DOUBLE_EQ(vocoder_total_loss({0, 0, 0, 0, 0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(vocoder_total_loss({1, 0, 0, 0, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(vocoder_total_loss({0, 0, 1, 1, 1, 0}), 400.0);
}

TEST(VocoderLosses, ZeroOnIdenticalAndNonnegative) {
  num::Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(50), y(50), f(10), g(10);
    for (auto& v : x) v = rng.uniform(-1, 1);
    for (auto& v : y) v = rng.uniform(-1, 1);
    for (auto& v : f) v = rng.uniform(80, 300);
    for (auto& v : g) v = rng.uniform(80, 300);
    EXPECT_EQ(energy_loss(x, x), 0.0);
    EXPECT_EQ(time_loss(x, x), 0.0);
    EXPECT_EQ(phase_loss(x, x), 0.0);
    EXPECT_EQ(f0_loss(f, f), 0.0);
    EXPECT_GE(energy_loss(x, y), 0.0);
    EXPECT_GE(time_loss(x, y), 0.0);
    EXPECT_GE(phase_loss(x, y), 0.0);
    EXPECT_GE(f0_loss(f, g), 0.0);
    // Constant offset on both signals leaves the phase term unchanged.
    auto xo = x, yo = y;
    for (auto& v : xo) v += 0.3;
    for (auto& v : yo) v += 0.3;
    EXPECT_NEAR(phase_loss(xo, yo), phase_loss(x, y), 1e-12);
  }
}

TEST(VocoderLosses, ContractErrors) {
  EXPECT_THROW(energy_loss(std::vector<double>{1}, std::vector<double>{1, 2}), ContractError);
  EXPECT_THROW(phase_loss(std::vector<double>{1}, std::vector<double>{1}), ContractError);
  EXPECT_THROW(f0_loss(std::vector<double>{0}, std::vector<double>{1}), DomainError);
  EXPECT_THROW(feature_matching_loss({Matrix::Ones(1, 2)}, {Matrix::Ones(2, 1)}), ContractError);
}

TEST(MelLoss, ZeroOnIdenticalAndMonotoneInAmplitudeGap) {
  auto ref = sine(500, 0.4, 0.3);
  EXPECT_EQ(mel_loss(ref, ref), 0.0);
  double prev = 0;
  for (double amp : {0.3, 0.1, 0.01}) {
    double l = mel_loss(ref, sine(500, amp, 0.3));
    EXPECT_GT(l, prev);
    prev = l;
  }
}

TEST(Wav, RoundTrip) {
  auto path = std::filesystem::temp_directory_path() / "vs_sig_test.wav";
  auto w = sine(300, 0.5, 0.05);
  write_wav(path, w);
  auto r = read_wav(path);
  EXPECT_EQ(r.sample_rate, 24000);
  ASSERT_EQ(r.samples.size(), w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) EXPECT_NEAR(r.samples[i], w.samples[i], 1.0 / 32767);
  auto csv = std::filesystem::temp_directory_path() / "vs_sig_test.csv";
  write_mel_csv(csv, stft_mel(w));
  EXPECT_TRUE(std::filesystem::exists(csv));
}

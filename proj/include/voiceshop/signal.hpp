#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "voiceshop/matrix.hpp"

namespace vs::signal {

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 24000;
};

struct MelConfig {
  int sample_rate = 24000;
  double fmin = 0.0;
  double fmax = 12000.0;
  int mel_bins = 80;
  int fft_size = 2048;
  int hop = 240;
  int window = 1200;
  bool normalize = true;
  bool symmetric = true;
  double max_abs = 4.0;
  double min_db = -115.0;

  void validate() const;
};

struct MelSpectrogram {
  Matrix values;  // (mel_bins, frames)
  MelConfig config;

  int frames() const { return static_cast<int>(values.cols()); }
};

// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular, area-normalized filters: (mel_bins, fft_size/2 + 1).
Matrix mel_filterbank(const MelConfig& cfg);
// Center frequency of each filter in Hz.
std::vector<double> mel_center_frequencies(const MelConfig& cfg);

MelSpectrogram stft_mel(const Waveform& wave, const MelConfig& cfg = {});

// ---- vocoder losses (mean reduction) ----
double energy_loss(std::span<const double> x, std::span<const double> y);
double time_loss(std::span<const double> x, std::span<const double> y);
double phase_loss(std::span<const double> x, std::span<const double> y);
double mel_loss(const Waveform& x, const Waveform& y, const MelConfig& cfg = {});
// Mean over layers of each layer's mean absolute difference.
double feature_matching_loss(const std::vector<Matrix>& x_maps, const std::vector<Matrix>& y_maps);
double f0_loss(std::span<const double> s, std::span<const double> s_hat);

struct VocoderLossWeights {
  std::array<double, 6> lambda{1, 1, 100, 200, 100, 1};
};

// Components in weight order: mel, feature matching, energy, time, phase, f0.
double vocoder_total_loss(const std::array<double, 6>& components, const VocoderLossWeights& weights = {});

// ---- I/O ----
void write_wav(const std::filesystem::path& path, const Waveform& wave);
Waveform read_wav(const std::filesystem::path& path);
// One row per frame, one column per mel bin.
void write_mel_csv(const std::filesystem::path& path, const MelSpectrogram& mel);

}  // namespace vs::signal

#include "voiceshop/signal.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <sstream>

#include "voiceshop/errors.hpp"

namespace vs::signal {

void MelConfig::validate() const {
  if (sample_rate <= 0 || fft_size <= 0 || hop <= 0 || window <= 0 || mel_bins <= 0)
    throw ConfigError("mel config: sizes must be positive");
  if (window > fft_size) throw ConfigError("mel config: window exceeds fft_size");
  if (hop > window) throw ConfigError("mel config: hop exceeds window");
  if (fmin < 0 || fmax <= fmin || fmax > sample_rate / 2.0) throw ConfigError("mel config: bad frequency range");
  if (max_abs <= 0 || min_db >= 0) throw ConfigError("mel config: bad normalization range");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace {

std::vector<double> mel_points(const MelConfig& cfg) {
  double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> hz(cfg.mel_bins + 2);
  for (int i = 0; i < cfg.mel_bins + 2; ++i) hz[i] = mel_to_hz(lo + (hi - lo) * i / (cfg.mel_bins + 1));
  return hz;
}

// FFTW plans are created once per size; executing a plan on new arrays is thread-safe.
fftw_plan plan_for(int n) {
  static std::mutex mu;
  static std::map<int, fftw_plan> plans;
  std::lock_guard lock(mu);
  auto it = plans.find(n);
  if (it != plans.end()) return it->second;
  double* in = fftw_alloc_real(n);
  fftw_complex* out = fftw_alloc_complex(n / 2 + 1);
  fftw_plan p = fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE);
  fftw_free(in);
  fftw_free(out);
  plans.emplace(n, p);
  return p;
}

struct FftwDeleter {
  void operator()(void* p) const { fftw_free(p); }
};

// Index into a signal of length n mirrored about its end samples (no edge repeat).
std::size_t reflect(long i, long n) {
  if (n == 1) return 0;
  long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

void require_same_length(std::span<const double> x, std::span<const double> y, const char* what) {
  if (x.size() != y.size()) throw ContractError(std::string(what) + ": length mismatch");
  if (x.empty()) throw ContractError(std::string(what) + ": empty input");
}

}  // namespace

Matrix mel_filterbank(const MelConfig& cfg) {
  cfg.validate();
  const int n_freq = cfg.fft_size / 2 + 1;
  auto pts = mel_points(cfg);
  Matrix fb = Matrix::Zero(cfg.mel_bins, n_freq);
  for (int m = 0; m < cfg.mel_bins; ++m) {
    double left = pts[m], center = pts[m + 1], right = pts[m + 2];
    double norm = 2.0 / (right - left);
    for (int k = 0; k < n_freq; ++k) {
      double f = static_cast<double>(k) * cfg.sample_rate / cfg.fft_size;
      double w = 0;
      if (f > left && f <= center) w = (f - left) / (center - left);
      else if (f > center && f < right) w = (right - f) / (right - center);
      fb(m, k) = w * norm;
    }
  }
  return fb;
}

std::vector<double> mel_center_frequencies(const MelConfig& cfg) {
  auto pts = mel_points(cfg);
  return {pts.begin() + 1, pts.end() - 1};
}

MelSpectrogram stft_mel(const Waveform& wave, const MelConfig& cfg) {
  cfg.validate();
  if (wave.sample_rate != cfg.sample_rate)
    throw ConfigError("stft_mel: waveform rate " + std::to_string(wave.sample_rate) + " Hz does not match config " +
                      std::to_string(cfg.sample_rate) + " Hz");
  if (wave.samples.empty()) throw ContractError("stft_mel: empty waveform");

  const long n = static_cast<long>(wave.samples.size());
  const int n_fft = cfg.fft_size;
  const int n_freq = n_fft / 2 + 1;
  const long frames = (n + cfg.hop - 1) / cfg.hop;
  const int win_offset = (n_fft - cfg.window) / 2;

  // Scaled by 1/sum(window) so a full-scale sinusoid stays below 0 dB.
  std::vector<double> window(cfg.window);
  double window_sum = 0;
  for (int i = 0; i < cfg.window; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / cfg.window);
    window_sum += window[i];
  }
  for (auto& w : window) w /= window_sum;

  static thread_local Matrix fb_cache;
  static thread_local MelConfig fb_cfg{.sample_rate = -1};
  if (fb_cfg.sample_rate != cfg.sample_rate || fb_cfg.fft_size != cfg.fft_size || fb_cfg.mel_bins != cfg.mel_bins ||
      fb_cfg.fmin != cfg.fmin || fb_cfg.fmax != cfg.fmax) {
    fb_cache = mel_filterbank(cfg);
    fb_cfg = cfg;
  }
  const Matrix& fb = fb_cache;

  fftw_plan plan = plan_for(n_fft);
  std::unique_ptr<double, FftwDeleter> in(fftw_alloc_real(n_fft));
  std::unique_ptr<fftw_complex, FftwDeleter> out(fftw_alloc_complex(n_freq));

  Matrix mag(n_freq, frames);
  for (long f = 0; f < frames; ++f) {
    // Frame f is centred on sample f*hop; the analysis window sits in the middle of the FFT buffer.
    long start = f * cfg.hop - n_fft / 2;
    std::fill(in.get(), in.get() + n_fft, 0.0);
    for (int i = 0; i < cfg.window; ++i) {
      long idx = start + win_offset + i;
      in.get()[win_offset + i] = wave.samples[reflect(idx, n)] * window[i];
    }
    fftw_execute_dft_r2c(plan, in.get(), out.get());
    for (int k = 0; k < n_freq; ++k) mag(k, f) = std::hypot(out.get()[k][0], out.get()[k][1]);
  }

  MelSpectrogram mel;
  mel.config = cfg;
  mel.values = fb * mag;
  const double floor = std::pow(10.0, cfg.min_db / 20.0);
  for (Eigen::Index i = 0; i < mel.values.size(); ++i) {
    double db = 20.0 * std::log10(std::max(mel.values.data()[i], floor));
    double v = db;
    if (cfg.normalize) {
      double unit = (db - cfg.min_db) / -cfg.min_db;
      v = cfg.symmetric ? std::clamp(2.0 * cfg.max_abs * unit - cfg.max_abs, -cfg.max_abs, cfg.max_abs)
                        : std::clamp(cfg.max_abs * unit, 0.0, cfg.max_abs);
    }
    mel.values.data()[i] = v;
  }
  return mel;
}

double energy_loss(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y, "energy_loss");
  double ex = 0, ey = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    ex += x[i] * x[i];
    ey += y[i] * y[i];
  }
  return std::fabs(ex - ey) / static_cast<double>(x.size());
}

double time_loss(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y, "time_loss");
  double d = 0;
  for (std::size_t i = 0; i < x.size(); ++i) d += x[i] - y[i];
  return std::fabs(d) / static_cast<double>(x.size());
}

double phase_loss(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y, "phase_loss");
  if (x.size() < 2) throw ContractError("phase_loss: need at least 2 samples");
  double s = 0;
  for (std::size_t i = 1; i < x.size(); ++i) s += std::fabs((x[i] - x[i - 1]) - (y[i] - y[i - 1]));
  return s / static_cast<double>(x.size() - 1);
}

double mel_loss(const Waveform& x, const Waveform& y, const MelConfig& cfg) {
  require_same_length(x.samples, y.samples, "mel_loss");
  Matrix a = stft_mel(x, cfg).values, b = stft_mel(y, cfg).values;
  return (a - b).cwiseAbs().mean();
}

double feature_matching_loss(const std::vector<Matrix>& x_maps, const std::vector<Matrix>& y_maps) {
  if (x_maps.size() != y_maps.size() || x_maps.empty())
    throw ContractError("feature_matching_loss: layer count mismatch");
  double total = 0;
  for (std::size_t i = 0; i < x_maps.size(); ++i) {
    if (x_maps[i].rows() != y_maps[i].rows() || x_maps[i].cols() != y_maps[i].cols() || x_maps[i].size() == 0)
      throw ContractError("feature_matching_loss: layer " + std::to_string(i) + " shape mismatch");
    total += (x_maps[i] - y_maps[i]).cwiseAbs().mean();
  }
  return total / static_cast<double>(x_maps.size());
}

double f0_loss(std::span<const double> s, std::span<const double> s_hat) {
  require_same_length(s, s_hat, "f0_loss");
  double total = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!(s[i] > 0) || !(s_hat[i] > 0)) throw DomainError("f0_loss: F0 values must be positive");
    total += std::fabs(std::log(s[i] / s_hat[i]));
  }
  return total / static_cast<double>(s.size());
}

double vocoder_total_loss(const std::array<double, 6>& components, const VocoderLossWeights& weights) {
  double total = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    if (weights.lambda[i] < 0) throw ContractError("vocoder_total_loss: negative weight");
    if (!std::isfinite(components[i])) throw NumericError("vocoder_total_loss: non-finite component");
    total += weights.lambda[i] * components[i];
  }
  return total;
}

// ---- WAV ----

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    int c = is.get();
    if (c == EOF) throw ContractError("wav: truncated file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

}  // namespace

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  auto data_bytes = static_cast<std::uint32_t>(wave.samples.size() * 2);
  os.write("RIFF", 4);
  put<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVEfmt ", 8);
  put<std::uint32_t>(os, 16);
  put<std::uint16_t>(os, 1);
  put<std::uint16_t>(os, 1);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(wave.sample_rate));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(wave.sample_rate * 2));
  put<std::uint16_t>(os, 2);
  put<std::uint16_t>(os, 16);
  os.write("data", 4);
  put<std::uint32_t>(os, data_bytes);
  for (double s : wave.samples) {
    auto q = static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0, 1.0) * 32767.0));
    put<std::uint16_t>(os, static_cast<std::uint16_t>(q));
  }
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("wav file not found: " + path.string());
  char tag[4];
  is.read(tag, 4);
  if (std::string(tag, 4) != "RIFF") throw ContractError("wav: not a RIFF file");
  get<std::uint32_t>(is);
  is.read(tag, 4);
  if (std::string(tag, 4) != "WAVE") throw ContractError("wav: not a WAVE file");
  Waveform w;
  bool have_fmt = false;
  while (is.read(tag, 4)) {
    std::string id(tag, 4);
    auto size = get<std::uint32_t>(is);
    if (id == "fmt ") {
      auto format = get<std::uint16_t>(is);
      auto channels = get<std::uint16_t>(is);
      w.sample_rate = static_cast<int>(get<std::uint32_t>(is));
      get<std::uint32_t>(is);
      get<std::uint16_t>(is);
      auto bits = get<std::uint16_t>(is);
      if (format != 1 || channels != 1 || bits != 16) throw ContractError("wav: only 16-bit PCM mono is supported");
      is.ignore(size - 16);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw ContractError("wav: data chunk before fmt chunk");
      w.samples.resize(size / 2);
      for (auto& s : w.samples) s = static_cast<std::int16_t>(get<std::uint16_t>(is)) / 32767.0;
      return w;
    } else {
      is.ignore(size + (size & 1));
    }
  }
  throw ContractError("wav: no data chunk");
}

void write_mel_csv(const std::filesystem::path& path, const MelSpectrogram& mel) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(9);
  for (Eigen::Index f = 0; f < mel.values.cols(); ++f) {
    for (Eigen::Index b = 0; b < mel.values.rows(); ++b) {
      if (b) os << ',';
      os << mel.values(b, f);
    }
    os << '\n';
  }
}

}  // namespace vs::signal

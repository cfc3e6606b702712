#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace vs::num {

/// Counter-based generator: draw k of a stream is splitmix64(seed, k), so
/// (seed, position) fully determines every subsequent draw.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t position = 0) : seed_(seed), position_(position) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return position_; }

  std::uint64_t next_u64() {
    std::uint64_t z = seed_ * 0xD1B54A32D192ED03ULL + (position_++) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  double normal() {
    // Box-Muller, one value per call so the position advance is fixed (2 draws).
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double rademacher() { return (next_u64() & 1ULL) ? 1.0 : -1.0; }

  // Independent child stream; does not disturb this stream beyond one draw.
  Rng fork() { return Rng(next_u64(), 0); }

 private:
  std::uint64_t seed_;
  std::uint64_t position_;
};

}  // namespace vs::num

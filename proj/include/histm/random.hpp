#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace histm {

/// Counter-based generator: draw k is a pure function of (seed, k), so
/// results do not depend on platform or on the order draws are consumed in.
/// The standard <random> distributions are implementation-defined, hence the
/// hand-rolled mapping to uniform/normal below.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Random 64-bit word at an explicit counter position (does not advance).
  std::uint64_t bits_at(std::uint64_t k) const noexcept {
    return mix(mix(seed_ ^ 0x9E3779B97F4A7C15ULL) + k * 0xD1B54A32D192ED03ULL);
  }
  /// Uniform in [0, 1) at an explicit counter position.
  double uniform_at(std::uint64_t k) const noexcept {
    return static_cast<double>(bits_at(k) >> 11) * 0x1.0p-53;
  }
  /// Standard normal at counter position k (consumes positions 2k, 2k+1).
  double normal_at(std::uint64_t k) const noexcept {
    const double u1 = 1.0 - uniform_at(2 * k);  // (0, 1]
    const double u2 = uniform_at(2 * k + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t next_bits() noexcept { return bits_at(counter_++); }
  double uniform() noexcept { return uniform_at(counter_++); }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  double normal() noexcept {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    // Multiply-shift; bias is < n / 2^64.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_bits()) * n) >> 64);
  }

  /// Independent stream derived from this seed and a label.
  RandomSource fork(std::uint64_t label) const noexcept {
    return RandomSource(mix(seed_ + 0x632BE59BD9B4E019ULL * (label + 1)));
  }

 private:
  static std::uint64_t mix(std::uint64_t z) noexcept {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace histm

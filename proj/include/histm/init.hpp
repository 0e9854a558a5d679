#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "histm/error.hpp"
#include "histm/random.hpp"
#include "histm/tensor.hpp"

namespace histm {

struct InitScheme {
  enum class Kind { kUniformFanIn, kNormal, kZeros, kOnes };
  Kind kind = Kind::kZeros;
  double sigma = 1.0;      // kNormal
  std::size_t fan_in = 0;  // kUniformFanIn

  static InitScheme uniform_fan_in(std::size_t fan_in) { return {Kind::kUniformFanIn, 1.0, fan_in}; }
  static InitScheme normal(double sigma) { return {Kind::kNormal, sigma, 0}; }
  static InitScheme zeros() { return {Kind::kZeros, 1.0, 0}; }
  static InitScheme ones() { return {Kind::kOnes, 1.0, 0}; }

  /// "uniform_fan_in:<n>", "normal:<sigma>", "zeros", "ones".
  static InitScheme parse(const std::string& text) {
    const auto colon = text.find(':');
    const std::string name = text.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
    try {
      if (name == "zeros" && arg.empty()) return zeros();
      if (name == "ones" && arg.empty()) return ones();
      if (name == "normal" && !arg.empty()) return normal(std::stod(arg));
      if (name == "uniform_fan_in" && !arg.empty()) return uniform_fan_in(std::stoul(arg));
    } catch (const std::logic_error&) {
    }
    throw ConfigError("unknown initialization scheme '" + text + "'");
  }
};

/// Deterministic initialization; advances `rng` by one draw per element
/// (two for normal).
template <class S>
Tensor<S> seeded_init(RandomSource& rng, const Shape& shape, const InitScheme& scheme) {
  std::vector<S> v(shape_numel(shape));
  switch (scheme.kind) {
    case InitScheme::Kind::kZeros:
      break;
    case InitScheme::Kind::kOnes:
      std::fill(v.begin(), v.end(), S(1));
      break;
    case InitScheme::Kind::kNormal:
      if (!(scheme.sigma >= 0)) throw ConfigError("normal init needs sigma >= 0");
      for (auto& x : v) x = static_cast<S>(scheme.sigma * rng.normal());
      break;
    case InitScheme::Kind::kUniformFanIn: {
      if (scheme.fan_in == 0) throw ConfigError("uniform_fan_in init needs fan_in >= 1");
      const double bound = 1.0 / std::sqrt(static_cast<double>(scheme.fan_in));
      for (auto& x : v) x = static_cast<S>(rng.uniform(-bound, bound));
      break;
    }
    default:
      throw ConfigError("unknown initialization scheme");
  }
  return Tensor<S>(shape, std::move(v), true);
}

}  // namespace histm

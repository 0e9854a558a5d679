#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "histm/data.hpp"

namespace histm {

inline std::vector<double> cell_series(const GridSeries& s, std::size_t i, std::size_t j) {
  if (i >= s.H || j >= s.W)
    throw ValidationError("cell (" + std::to_string(i) + "," + std::to_string(j) + ") outside " +
                          std::to_string(s.H) + "x" + std::to_string(s.W));
  std::vector<double> out(s.frames());
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = s.at(t, i, j);
  return out;
}

/// Sum over all cells per time step.
inline std::vector<double> aggregate_series(const GridSeries& s) {
  std::vector<double> out(s.frames(), 0.0);
  for (std::size_t t = 0; t < out.size(); ++t)
    for (double v : s.frame(t)) out[t] += v;
  return out;
}

inline double population_stddev(std::span<const double> x) {
  double m = 0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double ss = 0;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(x.size()));
}

/// Pincus approximate entropy, Chebyshev distance, self-matches counted.
inline double approximate_entropy(std::span<const double> x, std::size_t m, double r) {
  const std::size_t n = x.size();
  if (n <= m + 1) throw ValidationError("approximate_entropy: series of length " + std::to_string(n) +
                                        " too short for m = " + std::to_string(m));
  if (!(r > 0)) throw ValidationError("approximate_entropy: tolerance r must be positive");
  auto phi = [&](std::size_t len) {
    const std::size_t count = n - len + 1;
    double acc = 0;
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t matches = 0;
      for (std::size_t j = 0; j < count; ++j) {
        bool close = true;
        for (std::size_t k = 0; k < len && close; ++k) close = std::abs(x[i + k] - x[j + k]) <= r;
        matches += close;
      }
      acc += std::log(static_cast<double>(matches) / static_cast<double>(count));
    }
    return acc / static_cast<double>(count);
  };
  return phi(m) - phi(m + 1);
}

/// Default parameters m = 2, r = 0.2 * stddev. A constant series has entropy 0.
inline double approximate_entropy(std::span<const double> x) {
  const double sd = population_stddev(x);
  if (sd == 0.0) {
    if (x.size() <= 3) throw ValidationError("approximate_entropy: series too short");
    return 0.0;
  }
  return approximate_entropy(x, 2, 0.2 * sd);
}

/// Pearson correlation of (x_t, x_{t+lag}).
inline double lag_autocorrelation(std::span<const double> x, std::size_t lag) {
  if (x.size() <= lag + 1) throw ValidationError("lag_autocorrelation: series not longer than lag + 1");
  const std::size_t n = x.size() - lag;
  double ma = 0, mb = 0;
  for (std::size_t t = 0; t < n; ++t) ma += x[t], mb += x[t + lag];
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double a = x[t] - ma, b = x[t + lag] - mb;
    sab += a * b, saa += a * a, sbb += b * b;
  }
  if (saa == 0.0 || sbb == 0.0) throw ValidationError("lag_autocorrelation: zero variance, correlation undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace histm

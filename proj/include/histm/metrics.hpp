#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "histm/error.hpp"

namespace histm {

namespace detail {
inline void check_pair(std::span<const double> pred, std::span<const double> truth, const char* name) {
  if (pred.empty()) throw ValidationError(std::string(name) + ": empty input");
  if (pred.size() != truth.size()) throw ValidationError(std::string(name) + ": length mismatch");
}
}  // namespace detail

inline double mae(std::span<const double> pred, std::span<const double> truth) {
  detail::check_pair(pred, truth, "mae");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - truth[i]);
  return acc / static_cast<double>(pred.size());
}

inline double rmse(std::span<const double> pred, std::span<const double> truth) {
  detail::check_pair(pred, truth, "rmse");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

inline double r2(std::span<const double> pred, std::span<const double> truth) {
  detail::check_pair(pred, truth, "r2");
  double m = 0;
  for (double v : truth) m += v;
  m /= static_cast<double>(truth.size());
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ss_res += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    ss_tot += (truth[i] - m) * (truth[i] - m);
  }
  if (ss_tot == 0.0) throw ValidationError("r2: truth has zero variance, R^2 undefined");
  return 1.0 - ss_res / ss_tot;
}

/// Percentage error with the denominator floored at `floor`.
inline double mape(std::span<const double> pred, std::span<const double> truth, double floor = 1.0) {
  detail::check_pair(pred, truth, "mape");
  if (!(floor > 0)) throw ValidationError("mape: floor must be positive");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - truth[i]) / std::max(std::abs(truth[i]), floor);
  return 100.0 * acc / static_cast<double>(pred.size());
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

inline std::vector<double> gaussian_kernel_1d(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = (static_cast<double>(size) - 1) / 2;
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) total += g[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  for (auto& v : g) v /= total;
  return g;
}

/// Mean local SSIM over all fully-contained Gaussian windows (no padding).
/// Frames are row-major h x w. Filtering is separable: rows, then columns.
inline double ssim(std::span<const double> a, std::span<const double> b, std::size_t h, std::size_t w,
                   double dynamic_range, const SsimOptions& opt = {}) {
  if (a.size() != h * w || b.size() != h * w) throw ValidationError("ssim: frame size mismatch");
  if (h < opt.window || w < opt.window)
    throw ValidationError("ssim: frame " + std::to_string(h) + "x" + std::to_string(w) + " smaller than the " +
                          std::to_string(opt.window) + "x" + std::to_string(opt.window) + " window");
  if (!(dynamic_range > 0)) throw ValidationError("ssim: dynamic range must be positive");
  const auto g = gaussian_kernel_1d(opt.window, opt.sigma);
  const std::size_t ow = w - opt.window + 1, oh = h - opt.window + 1;
  const double c1 = (opt.k1 * dynamic_range) * (opt.k1 * dynamic_range);
  const double c2 = (opt.k2 * dynamic_range) * (opt.k2 * dynamic_range);

  // Row pass over the five moment images, then a column pass.
  auto filter = [&](auto value) {
    std::vector<double> rows(h * ow, 0.0), out(oh * ow, 0.0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0;
        for (std::size_t k = 0; k < opt.window; ++k) acc += g[k] * value(y * w + x + k);
        rows[y * ow + x] = acc;
      }
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0;
        for (std::size_t k = 0; k < opt.window; ++k) acc += g[k] * rows[(y + k) * ow + x];
        out[y * ow + x] = acc;
      }
    return out;
  };
  const auto mu_a = filter([&](std::size_t i) { return a[i]; });
  const auto mu_b = filter([&](std::size_t i) { return b[i]; });
  const auto aa = filter([&](std::size_t i) { return a[i] * a[i]; });
  const auto bb = filter([&](std::size_t i) { return b[i] * b[i]; });
  const auto ab = filter([&](std::size_t i) { return a[i] * b[i]; });

  double total = 0;
  for (std::size_t k = 0; k < oh * ow; ++k) {
    const double va = aa[k] - mu_a[k] * mu_a[k], vb = bb[k] - mu_b[k] * mu_b[k];
    const double cov = ab[k] - mu_a[k] * mu_b[k];
    total += ((2 * mu_a[k] * mu_b[k] + c1) * (2 * cov + c2)) /
             ((mu_a[k] * mu_a[k] + mu_b[k] * mu_b[k] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(oh * ow);
}

struct MetricsReport {
  double mae = 0, rmse = 0, mape = 0;
  std::optional<double> r2;    // absent when the truth has zero variance
  std::optional<double> ssim;  // absent when no complete frame was evaluated
  std::size_t n_predictions = 0;
};

struct MetricOptions {
  double mape_floor = 1.0;
  SsimOptions ssim;
};

/// Scalar metrics over paired predictions.
inline MetricsReport scalar_metrics(std::span<const double> pred, std::span<const double> truth,
                                    const MetricOptions& opt = {}) {
  MetricsReport r;
  r.mae = mae(pred, truth);
  r.rmse = rmse(pred, truth);
  if (std::any_of(truth.begin(), truth.end(), [&](double v) { return v != truth[0]; })) r.r2 = r2(pred, truth);
  r.mape = mape(pred, truth, opt.mape_floor);
  r.n_predictions = pred.size();
  return r;
}

}  // namespace histm

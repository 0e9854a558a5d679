#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "histm/checkpoint.hpp"
#include "histm/data.hpp"
#include "histm/metrics.hpp"

namespace histm {

/// Maps normalized windows (n x T x K x K) and their origins to normalized
/// predictions.
using Predictor =
    std::function<void(std::span<const float> inputs, std::span<const Origin> origins, std::span<double> out)>;

template <class S>
Predictor model_predictor(HiSTMParams<S> params, std::size_t batch = 512) {
  return [params = std::move(params), batch](std::span<const float> inputs, std::span<const Origin> origins,
                                             std::span<double> out) {
    const auto& c = params.config;
    const std::size_t ws = c.T * c.K * c.K;
    NoGradScope<S> no_grad;
    for (std::size_t start = 0; start < origins.size(); start += batch) {
      const std::size_t n = std::min(batch, origins.size() - start);
      std::vector<S> v(inputs.begin() + static_cast<std::ptrdiff_t>(start * ws),
                       inputs.begin() + static_cast<std::ptrdiff_t>((start + n) * ws));
      Tensor<S> y = predict_batch(Tensor<S>({n, c.T, c.K, c.K}, std::move(v)), params);
      for (std::size_t b = 0; b < n; ++b) out[start + b] = static_cast<double>(y[b]);
    }
  };
}

/// y_hat = most recent observed value of the center cell.
inline Predictor persistence_predictor(const WindowSpec& spec) {
  return [spec](std::span<const float> inputs, std::span<const Origin> origins, std::span<double> out) {
    const std::size_t ws = spec.window_size(), mid = (spec.K - 1) / 2;
    const std::size_t last = ((spec.T - 1) * spec.K + mid) * spec.K + mid;
    for (std::size_t k = 0; k < origins.size(); ++k) out[k] = inputs[k * ws + last];
  };
}

/// y_hat = mean of the whole T x K x K input window.
inline Predictor grid_mean_predictor(const WindowSpec& spec) {
  return [spec](std::span<const float> inputs, std::span<const Origin> origins, std::span<double> out) {
    const std::size_t ws = spec.window_size();
    for (std::size_t k = 0; k < origins.size(); ++k) {
      double acc = 0;
      for (std::size_t i = 0; i < ws; ++i) acc += inputs[k * ws + i];
      out[k] = acc / static_cast<double>(ws);
    }
  };
}

/// Emits the true normalized target read from `truth` (test fixture).
inline Predictor oracle_predictor(const GridSeries& truth, const ScalerParams& scaler, const WindowSpec& spec) {
  return [&truth, scaler, spec](std::span<const float>, std::span<const Origin> origins, std::span<double> out) {
    for (std::size_t k = 0; k < origins.size(); ++k) {
      const auto& o = origins[k];
      out[k] = scaler_apply(truth.at(o.t + spec.T, o.i, o.j), scaler);
    }
  };
}

struct EvalOptions {
  MetricOptions metrics;
};

struct EvalResult {
  MetricsReport report;
  std::vector<double> pred, truth;  // original units, sample order
};

namespace detail {

/// SSIM averaged over every target frame whose inner (cropped) region is
/// fully present. The window shrinks to the inner extent when the region is
/// smaller than the configured window.
inline std::optional<double> frame_ssim(const SampleSet& set, std::span<const double> pred, std::size_t H,
                                        std::size_t W, const SsimOptions& base) {
  const std::size_t K = set.spec.K, r = (K - 1) / 2;
  if (H < K || W < K) return std::nullopt;
  const std::size_t ih = H - K + 1, iw = W - K + 1;
  std::map<std::size_t, std::vector<std::size_t>> by_time;
  for (std::size_t k = 0; k < set.size(); ++k) by_time[set.origins[k].t].push_back(k);
  SsimOptions opt = base;
  std::size_t w = std::min({opt.window, ih, iw});
  if (w % 2 == 0) --w;
  opt.window = w;

  double total = 0;
  std::size_t frames = 0;
  std::vector<double> pf(ih * iw), tf(ih * iw);
  std::vector<bool> filled(ih * iw);
  for (const auto& [t, ids] : by_time) {
    if (ids.size() != ih * iw) continue;
    std::fill(filled.begin(), filled.end(), false);
    for (std::size_t k : ids) {
      const std::size_t c = (set.origins[k].i - r) * iw + (set.origins[k].j - r);
      pf[c] = pred[k];
      tf[c] = set.raw_targets[k];
      filled[c] = true;
    }
    if (std::find(filled.begin(), filled.end(), false) != filled.end()) continue;
    total += ssim(pf, tf, ih, iw, set.scaler.range(), opt);
    ++frames;
  }
  if (frames == 0) return std::nullopt;
  return total / static_cast<double>(frames);
}

}  // namespace detail

/// Single-step evaluation: every metric is computed after mapping
/// predictions back to original units.
inline EvalResult evaluate_single_step(const Predictor& predictor, const SampleSet& set, std::size_t grid_h,
                                       std::size_t grid_w, const EvalOptions& opt = {}) {
  if (set.size() == 0) throw ValidationError("evaluate_single_step: no samples");
  std::vector<double> norm(set.size());
  predictor(set.inputs, set.origins, norm);
  EvalResult r;
  r.pred.resize(set.size());
  for (std::size_t k = 0; k < set.size(); ++k) r.pred[k] = scaler_invert(norm[k], set.scaler);
  r.truth = set.raw_targets;
  r.report = scalar_metrics(r.pred, r.truth, opt.metrics);
  r.report.ssim = detail::frame_ssim(set, r.pred, grid_h, grid_w, opt.metrics.ssim);
  return r;
}

inline void check_compatible(const Checkpoint& ck, const SampleSet& set) {
  if (set.spec.T != ck.config.T || set.spec.K != ck.config.K)
    throw ValidationError("samples use T=" + std::to_string(set.spec.T) + ", K=" + std::to_string(set.spec.K) +
                          " but the checkpoint expects T=" + std::to_string(ck.config.T) +
                          ", K=" + std::to_string(ck.config.K));
  if (!(set.scaler == ck.scaler))
    throw ValidationError("samples were normalized with a different scaler than the checkpoint's");
}

inline EvalResult evaluate_single_step(const Checkpoint& ck, const SampleSet& set, std::size_t grid_h,
                                       std::size_t grid_w, const EvalOptions& opt = {}) {
  check_compatible(ck, set);
  return evaluate_single_step(model_predictor(ck.params), set, grid_h, grid_w, opt);
}

// ---------------------------------------------------------------------------
// Multi-step rollout

enum class BoundaryFill { kHoldLast, kTrueValues };

struct RolloutConfig {
  std::size_t steps = 6;
  BoundaryFill boundary_fill = BoundaryFill::kHoldLast;
};

struct RolloutReport {
  std::vector<MetricsReport> per_step;
  std::vector<std::size_t> frames;              // predicted frame index per step
  std::vector<std::vector<double>> pred_inner;  // per step, inner region row-major
};

/// Step s predicts frame start_t + T + s for every inner cell from the
/// working copy, writes the prediction back, and fills the boundary ring per
/// `boundary_fill`. Metrics are on the inner region in original units.
inline RolloutReport autoregressive_rollout(const Predictor& predictor, const GridSeries& series,
                                            const ScalerParams& scaler, const WindowSpec& spec, std::size_t start_t,
                                            const RolloutConfig& cfg, const EvalOptions& opt = {}) {
  if (cfg.steps < 1) throw ValidationError("rollout needs steps >= 1");
  if (start_t + spec.T + cfg.steps > series.frames())
    throw ValidationError("series too short for a " + std::to_string(cfg.steps) + "-step rollout from t=" +
                          std::to_string(start_t));
  if (series.H < spec.K || series.W < spec.K) throw ValidationError("grid smaller than the kernel");
  const std::size_t r = (spec.K - 1) / 2;
  const std::size_t last_observed = start_t + spec.T - 1;
  GridSeries work = series;
  RolloutReport rep;
  WindowSpec one = spec;
  one.stride_t = 1;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    std::vector<Origin> origins;
    for (std::size_t i = r; i + r < series.H; ++i)
      for (std::size_t j = r; j + r < series.W; ++j) origins.push_back({start_t + s, i, j});
    SampleSet set = build_samples(work, origins, one, scaler);
    const std::size_t frame = start_t + spec.T + s;
    for (std::size_t k = 0; k < set.size(); ++k) set.raw_targets[k] = series.at(frame, set.origins[k].i, set.origins[k].j);
    EvalResult er = evaluate_single_step(predictor, set, series.H, series.W, opt);
    for (std::size_t k = 0; k < set.size(); ++k) work.at(frame, set.origins[k].i, set.origins[k].j) = er.pred[k];
    if (cfg.boundary_fill == BoundaryFill::kHoldLast)
      for (std::size_t i = 0; i < series.H; ++i)
        for (std::size_t j = 0; j < series.W; ++j)
          if (i < r || j < r || i + r >= series.H || j + r >= series.W)
            work.at(frame, i, j) = series.at(last_observed, i, j);
    rep.per_step.push_back(er.report);
    rep.frames.push_back(frame);
    rep.pred_inner.push_back(er.pred);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Per-cell profile

struct CellProfile {
  std::vector<std::size_t> t;  // target frame index
  std::vector<double> truth, pred;
  double mape = 0;
};

/// Single-step predictions for one cell at every target frame in `targets`.
inline CellProfile cell_profile(const Predictor& predictor, const GridSeries& series, const ScalerParams& scaler,
                                const WindowSpec& spec, std::size_t i, std::size_t j, TimeRange targets,
                                double mape_floor = 1.0) {
  const std::size_t r = (spec.K - 1) / 2;
  if (i < r || j < r || i + r >= series.H || j + r >= series.W)
    throw ValidationError("cell (" + std::to_string(i) + "," + std::to_string(j) + ") outside crop bounds rows [" +
                          std::to_string(r) + ", " + std::to_string(series.H - r - 1) + "], cols [" +
                          std::to_string(r) + ", " + std::to_string(series.W - r - 1) + "]");
  if (targets.begin < spec.T || targets.end > series.frames() || targets.begin >= targets.end)
    throw ValidationError("target range must lie in [T, T_total) and be non-empty");
  std::vector<Origin> origins;
  for (std::size_t t = targets.begin; t < targets.end; ++t) origins.push_back({t - spec.T, i, j});
  WindowSpec one = spec;
  one.stride_t = 1;
  SampleSet set = build_samples(series, origins, one, scaler);
  std::vector<double> norm(set.size());
  predictor(set.inputs, set.origins, norm);
  CellProfile p;
  for (std::size_t k = 0; k < set.size(); ++k) {
    p.t.push_back(origins[k].t + spec.T);
    p.truth.push_back(set.raw_targets[k]);
    p.pred.push_back(scaler_invert(norm[k], scaler));
  }
  p.mape = mape(p.pred, p.truth, mape_floor);
  return p;
}

// ---------------------------------------------------------------------------
// Report formats

inline std::string format_metrics_csv(const MetricsReport& r) {
  std::string out = "metric,value\n";
  out += "mae," + io::format_double(r.mae) + "\n";
  out += "rmse," + io::format_double(r.rmse) + "\n";
  out += "r2," + (r.r2 ? io::format_double(*r.r2) : std::string("nan")) + "\n";
  out += "ssim," + (r.ssim ? io::format_double(*r.ssim) : std::string("nan")) + "\n";
  out += "mape," + io::format_double(r.mape) + "\n";
  out += "n_predictions," + std::to_string(r.n_predictions) + "\n";
  return out;
}

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json j = {{"mae", r.mae}, {"rmse", r.rmse}, {"mape", r.mape}, {"n_predictions", r.n_predictions}};
  j["r2"] = r.r2 ? nlohmann::json(*r.r2) : nlohmann::json(nullptr);
  j["ssim"] = r.ssim ? nlohmann::json(*r.ssim) : nlohmann::json(nullptr);
  return j;
}

/// `step,mae,rmse,ssim`
inline std::string format_rollout_csv(const RolloutReport& r) {
  std::string out = "step,mae,rmse,ssim\n";
  for (std::size_t s = 0; s < r.per_step.size(); ++s) {
    const auto& m = r.per_step[s];
    out += std::to_string(s + 1) + "," + io::format_double(m.mae) + "," + io::format_double(m.rmse) + "," +
           (m.ssim ? io::format_double(*m.ssim) : std::string("nan")) + "\n";
  }
  return out;
}

/// `t,truth,pred`
inline std::string format_trajectory_csv(std::span<const std::size_t> t, std::span<const double> truth,
                                         std::span<const double> pred) {
  std::string out = "t,truth,pred\n";
  for (std::size_t k = 0; k < t.size(); ++k)
    out += std::to_string(t[k]) + "," + io::format_double(truth[k]) + "," + io::format_double(pred[k]) + "\n";
  return out;
}

/// Least-squares slope of per-step MAE against step index.
inline double mae_slope(std::span<const MetricsReport> steps) {
  const double n = static_cast<double>(steps.size());
  if (steps.size() < 2) return 0.0;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t s = 0; s < steps.size(); ++s) {
    const double x = static_cast<double>(s + 1), y = steps[s].mae;
    sx += x, sy += y, sxx += x * x, sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace histm

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "histm/histm.hpp"

namespace {

using namespace histm;
namespace fs = std::filesystem;
using T64 = Tensor<double>;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

fs::path work_root() {
  const fs::path root = fs::current_path() / "acceptance_runs";
  fs::create_directories(root);
  return root;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(HISTM_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

T64 random_tensor(RandomSource& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return T64(std::move(shape), std::move(v));
}

T64 weighted_sum(const T64& y, RandomSource& rng) { return sum(mul(y, random_tensor(rng, y.shape()))); }

void push_from_zero(T64& t) {
  for (auto& v : t.data())
    if (std::abs(v) < 0.05) v += v < 0 ? -0.05 : 0.05;
}

// ---------------------------------------------------------------------------
// 1. Gradients of every primitive and of the full model with MAE loss

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const double eps = 1e-5;
  double worst = 0;
  std::string worst_name;
  auto check = [&](const std::string& name, const std::function<T64()>& f, std::vector<T64> inputs) {
    const double e = grad_check<double>(f, std::move(inputs), eps);
    if (!(e <= worst)) worst = e, worst_name = name;
  };
  const HiSTMConfig toys[] = {HiSTMConfig::make(2, 3, 4, 1, 3, 8, 4, 2, 2), HiSTMConfig::make(3, 1, 4, 2, 3, 8, 4, 2, 2),
                              HiSTMConfig::make(3, 3, 4, 2, 3, 8, 4, 2, 2), HiSTMConfig::make(2, 3, 4, 1, 1, 8, 4, 3, 2)};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RandomSource rng(9000 + seed);
    const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
    auto a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n}), a2 = random_tensor(rng, {m, k});
    auto ba = random_tensor(rng, {2, m, k}), bb = random_tensor(rng, {2, k, n}), bias = random_tensor(rng, {k});
    auto off = random_tensor(rng, {m, k});
    push_from_zero(off);
    RandomSource w(seed);
    check("matmul", [&] { auto r = w; return weighted_sum(matmul(a, b), r); }, {a, b});
    check("bmm", [&] { auto r = w; return weighted_sum(bmm(ba, bb), r); }, {ba, bb});
    check("add_bias", [&] { auto r = w; return weighted_sum(add_bias(a, bias), r); }, {a, bias});
    auto bias_n = random_tensor(rng, {n});
    check("linear", [&] { auto r = w; return weighted_sum(linear(a, b, &bias_n), r); }, {a, b, bias_n});
    check("add", [&] { auto r = w; return weighted_sum(add(a, a2), r); }, {a, a2});
    check("sub", [&] { auto r = w; return weighted_sum(sub(a, a2), r); }, {a, a2});
    check("mul", [&] { auto r = w; return weighted_sum(mul(a, a2), r); }, {a, a2});
    check("scale", [&] { auto r = w; return weighted_sum(scale(a, 1.7), r); }, {a});
    check("neg", [&] { auto r = w; return weighted_sum(neg(a), r); }, {a});
    check("abs", [&] { auto r = w; return weighted_sum(abs(off), r); }, {off});
    check("relu", [&] { auto r = w; return weighted_sum(relu(off), r); }, {off});
    check("silu", [&] { auto r = w; return weighted_sum(silu(a), r); }, {a});
    check("exp", [&] { auto r = w; return weighted_sum(exp(a), r); }, {a});
    check("softplus", [&] { auto r = w; return weighted_sum(softplus(a), r); }, {a});
    check("sum", [&] { return sum(a); }, {a});
    check("mean", [&] { return mean(mul(a, a)); }, {a});
    check("softmax", [&] { auto r = w; return weighted_sum(softmax_lastdim(a), r); }, {a});
    check("reshape", [&] { auto r = w; return weighted_sum(reshape(a, {k, m}), r); }, {a});
    std::vector<std::size_t> idx(5);
    for (auto& i : idx) i = rng.below(m * k);
    check("gather", [&] { auto r = w; return weighted_sum(gather(a, idx, {5}), r); }, {a});
    if (k > 1) check("slice", [&] { auto r = w; return weighted_sum(slice_lastdim(a, 1, k - 1), r); }, {a});

    const std::size_t ck = 1 + 2 * rng.below(2);
    auto cx = random_tensor(rng, {2, 4, 3}), cw = random_tensor(rng, {2, 2, ck, ck}), cb = random_tensor(rng, {2});
    check("conv2d", [&] { auto r = w; return weighted_sum(conv2d_same(cx, cw, cb), r); }, {cx, cw, cb});
    auto dx = random_tensor(rng, {5, 3}), dw = random_tensor(rng, {3, 3}), db = random_tensor(rng, {3});
    check("causal_conv1d", [&] { auto r = w; return weighted_sum(causal_depthwise_conv1d(dx, dw, db), r); },
          {dx, dw, db});
    auto delta = random_tensor(rng, {4, 3}, 0.05, 1.0), A = random_tensor(rng, {3, 2}, -2.0, -0.1);
    auto B = random_tensor(rng, {4, 2}), C = random_tensor(rng, {4, 2});
    auto u = random_tensor(rng, {4, 3}), Dk = random_tensor(rng, {3});
    check("discretize",
          [&] {
            auto r = w;
            auto [ab, bb2] = discretize(delta, A, B);
            return add(weighted_sum(ab, r), weighted_sum(bb2, r));
          },
          {delta, A, B});
    check("selective_scan", [&] { auto r = w; return weighted_sum(selective_scan(u, delta, A, B, C, Dk), r); },
          {u, delta, A, B, C, Dk});

    MambaConfig mcfg;
    mcfg.d_model = 2 + rng.below(3);
    mcfg.d_state = 2;
    mcfg.d_conv = 2;
    mcfg.expand = 2;
    auto mp = MambaParams<double>::init(mcfg, rng);
    for (auto* t : mp.tensors())
      for (auto& v : t->data()) v += rng.uniform(-0.1, 0.1);
    auto mx = random_tensor(rng, {3, mcfg.d_model});
    std::vector<T64> mins{mx};
    for (auto* t : mp.tensors()) mins.push_back(*t);
    check("mamba_block", [&] { auto r = w; return weighted_sum(mamba_block_forward(mx, mp), r); }, mins);

    const HiSTMConfig& hc = toys[seed % 4];
    auto hp = HiSTMParams<double>::init(hc, seed);
    for (auto* t : hp.tensors())
      for (auto& v : t->data()) v += rng.uniform(-0.1, 0.1);
    auto xs = random_tensor(rng, {2, hc.T, hc.K, hc.K}, 0.0, 1.0), ys = random_tensor(rng, {2}, 0.0, 1.0);
    std::vector<T64> hins;
    for (auto* t : hp.tensors()) hins.push_back(*t);
    check("histm+mae", [&] { return mae_loss(predict_batch(xs, hp), ys); }, hins);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120.0, "max relative error " + fmt(worst) + " (" + worst_name +
                                            ") over 20 seeded instances, eps 1e-5, " + fmt(secs) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Selective scan against the sequential recurrence

std::vector<double> naive_scan(const T64& u, const T64& delta, const T64& A, const T64& B, const T64& C,
                               const T64& Dk) {
  const std::size_t T = u.shape()[0], D = u.shape()[1], N = A.shape()[1];
  std::vector<double> y(T * D);
  for (std::size_t d = 0; d < D; ++d) {
    std::vector<double> h(N, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      double out = Dk[d] * u[t * D + d];
      for (std::size_t n = 0; n < N; ++n) {
        h[n] = std::exp(delta[t * D + d] * A[d * N + n]) * h[n] + delta[t * D + d] * B[t * N + n] * u[t * D + d];
        out += C[t * N + n] * h[n];
      }
      y[t * D + d] = out;
    }
  }
  return y;
}

Outcome scan_oracle() {
  double worst = 0;
  bool causal = true;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    RandomSource rng(7000 + seed);
    const std::size_t T = 1 + rng.below(64), D = 1 + rng.below(8), N = 1 + rng.below(16);
    auto u = random_tensor(rng, {T, D}), delta = random_tensor(rng, {T, D}, 0.01, 1.0);
    auto A = random_tensor(rng, {D, N}, -2.0, -0.05), B = random_tensor(rng, {T, N}), C = random_tensor(rng, {T, N});
    auto Dk = random_tensor(rng, {D});
    const T64 y = selective_scan(u, delta, A, B, C, Dk);
    const auto ref = naive_scan(u, delta, A, B, C, Dk);
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(y[i] - ref[i]));

    // Perturbing step t0 leaves every earlier output bit-identical.
    const std::size_t t0 = rng.below(T);
    auto u2 = u.clone(), d2 = delta.clone(), B2 = B.clone(), C2 = C.clone();
    for (std::size_t d = 0; d < D; ++d) u2.data()[t0 * D + d] += 1.0, d2.data()[t0 * D + d] += 0.5;
    for (std::size_t n = 0; n < N; ++n) B2.data()[t0 * N + n] -= 1.0, C2.data()[t0 * N + n] += 1.0;
    const T64 y2 = selective_scan(u2, d2, A, B2, C2, Dk);
    for (std::size_t i = 0; i < t0 * D; ++i) causal = causal && y[i] == y2[i];
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RandomSource rng(7500 + seed);
    MambaConfig c;
    c.d_model = 4;
    c.d_state = 4;
    c.d_conv = 3;
    auto p = MambaParams<double>::init(c, rng);
    const std::size_t T = 4 + rng.below(20), t0 = rng.below(T);
    auto x = random_tensor(rng, {T, c.d_model});
    auto x2 = x.clone();
    for (std::size_t t = t0; t < T; ++t)
      for (std::size_t d = 0; d < c.d_model; ++d) x2.data()[t * c.d_model + d] += rng.uniform(-1, 1);
    const T64 y = mamba_block_forward(x, p), y2 = mamba_block_forward(x2, p);
    for (std::size_t i = 0; i < t0 * c.d_model; ++i) causal = causal && y[i] == y2[i];
  }
  return {worst <= 1e-10 && causal, "max |scan - sequential| " + fmt(worst) +
                                        " over 100 instances; causality probes " + (causal ? "bitwise" : "BROKEN")};
}

// ---------------------------------------------------------------------------
// 3. Metric identities and direct-formula references

double ssim_direct(const std::vector<double>& a, const std::vector<double>& b, std::size_t h, std::size_t w,
                   double range, std::size_t win, double sigma) {
  std::vector<double> g2(win * win);
  double total = 0;
  const double c = (static_cast<double>(win) - 1) / 2;
  for (std::size_t p = 0; p < win; ++p)
    for (std::size_t q = 0; q < win; ++q)
      total += g2[p * win + q] = std::exp(-((p - c) * (p - c) + (q - c) * (q - c)) / (2 * sigma * sigma));
  for (auto& v : g2) v /= total;
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + win <= h; ++y)
    for (std::size_t x = 0; x + win <= w; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t p = 0; p < win; ++p)
        for (std::size_t q = 0; q < win; ++q) {
          const double gw = g2[p * win + q], va = a[(y + p) * w + x + q], vb = b[(y + p) * w + x + q];
          ma += gw * va, mb += gw * vb, saa += gw * va * va, sbb += gw * vb * vb, sab += gw * va * vb;
        }
      const double cov = sab - ma * mb, var_a = saa - ma * ma, var_b = sbb - mb * mb;
      acc += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++count;
    }
  return acc / static_cast<double>(count);
}

Outcome metric_identities() {
  double worst_identity = 0, worst_ref = 0;
  bool rmse_ge_mae = true;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    RandomSource rng(5000 + seed);
    const std::size_t n = 2 + rng.below(300);
    std::vector<double> truth(n), pred(n);
    for (auto& v : truth) v = rng.uniform(0.0, 10.0);
    for (std::size_t i = 0; i < n; ++i) pred[i] = truth[i] + rng.uniform(-2.0, 2.0);
    const MetricsReport r = scalar_metrics(pred, truth);
    rmse_ge_mae = rmse_ge_mae && r.rmse >= r.mae;

    double abs_sum = 0, sq_sum = 0, pct = 0, mean = 0;
    for (double v : truth) mean += v;
    mean /= static_cast<double>(n);
    double ss_tot = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = pred[i] - truth[i];
      abs_sum += std::abs(e), sq_sum += e * e, pct += std::abs(e) / std::max(std::abs(truth[i]), 1.0);
      ss_tot += (truth[i] - mean) * (truth[i] - mean);
    }
    const double nn = static_cast<double>(n);
    worst_ref = std::max({worst_ref, std::abs(r.mae - abs_sum / nn), std::abs(r.rmse - std::sqrt(sq_sum / nn)),
                          std::abs(*r.r2 - (1 - sq_sum / ss_tot)), std::abs(r.mape - 100 * pct / nn) / 100});

    worst_identity = std::max(worst_identity, std::abs(r2(truth, truth) - 1.0));
    const std::vector<double> mean_pred(n, mean);
    worst_identity = std::max(worst_identity, std::abs(r2(mean_pred, truth)));

    if (seed < 40) {
      const std::size_t h = 11 + rng.below(10), w = 11 + rng.below(10);
      const std::size_t win = seed % 2 == 0 ? 11 : 5;
      std::vector<double> fa(h * w), fb(h * w);
      for (auto& v : fa) v = rng.uniform(0.0, 1.0);
      for (std::size_t i = 0; i < fa.size(); ++i) fb[i] = std::clamp(fa[i] + rng.uniform(-0.3, 0.3), 0.0, 1.0);
      SsimOptions opt;
      opt.window = win;
      worst_identity = std::max(worst_identity, std::abs(ssim(fa, fa, h, w, 1.0, opt) - 1.0));
      worst_ref = std::max(worst_ref, std::abs(ssim(fa, fb, h, w, 1.0, opt) - ssim_direct(fa, fb, h, w, 1.0, win, 1.5)));
    }
  }
  return {worst_identity <= 1e-12 && worst_ref <= 1e-12 && rmse_ge_mae,
          "identity deviation " + fmt(worst_identity) + ", reference deviation " + fmt(worst_ref) +
              ", RMSE >= MAE on 200 reports " + (rmse_ge_mae ? "holds" : "VIOLATED")};
}

// ---------------------------------------------------------------------------
// 4. Windowing, split and scaler contracts

std::size_t brute_count(std::size_t H, std::size_t W, std::size_t frames, std::size_t T, std::size_t K,
                        std::size_t stride) {
  const long r = static_cast<long>(K / 2);
  std::size_t n = 0;
  for (std::size_t t = 0; t < frames; t += stride) {
    if (t + T >= frames) continue;
    for (long i = 0; i < static_cast<long>(H); ++i)
      for (long j = 0; j < static_cast<long>(W); ++j)
        if (i - r >= 0 && j - r >= 0 && i + r < static_cast<long>(H) && j + r < static_cast<long>(W)) ++n;
  }
  return n;
}

Outcome pipeline_contracts() {
  bool counts = true;
  std::size_t geometries = 0;
  auto compare = [&](std::size_t H, std::size_t W, std::size_t frames, const WindowSpec& spec, bool enumerate) {
    const std::size_t closed = window_count(H, W, frames, spec);
    bool ok = closed == brute_count(H, W, frames, spec.T, spec.K, spec.stride_t);
    if (enumerate) ok = ok && make_window_index(GridSeries(H, W, frames), spec).size() == closed;
    counts = counts && ok;
    ++geometries;
    return closed;
  };
  const std::size_t big = compare(100, 100, 144, {6, 11, 6}, false);
  counts = counts && big == 186300;
  RandomSource rng(4242);
  for (int g = 0; g < 50; ++g) {
    const WindowSpec spec{1 + rng.below(8), 1 + 2 * rng.below(6), 1 + rng.below(8)};
    const std::size_t H = spec.K + rng.below(10), W = spec.K + rng.below(10);
    compare(H, W, spec.T + 1 + rng.below(60), spec, true);
  }

  // Leak scan: every frame read by a split's windows lies inside that split.
  const GridSeries s = generate_synthetic(20, 20, 14, 10, 7);
  const WindowSpec spec{6, 7, 1};
  const SplitRanges split = chronological_split(s.frames(), spec.T);
  bool no_leak = split.train.end == split.val.begin && split.val.end == split.test.begin && split.test.end == s.frames();
  for (const TimeRange& range : {split.train, split.val, split.test})
    for (const Origin& o : make_window_index(s, spec, range))
      no_leak = no_leak && o.t >= range.begin && o.t + spec.T < range.end;

  const auto train_idx = make_window_index(s, {6, 7, 6}, split.train);
  const ScalerParams sc = scaler_fit(s, train_idx, {6, 7, 6});
  double worst_rt = 0;
  for (double v : s.values)
    if (v >= sc.min_v && v <= sc.max_v) worst_rt = std::max(worst_rt, std::abs(scaler_invert(scaler_apply(v, sc), sc) - v));
  const bool clip = scaler_apply(sc.min_v, sc) == 0.0 && scaler_apply(sc.max_v, sc) == 1.0 &&
                    scaler_apply(sc.min_v - 1.0, sc) == 0.0 && scaler_apply(sc.max_v + 1.0, sc) == 1.0 &&
                    scaler_apply(sc.max_v * 10, sc) == 1.0;
  return {counts && no_leak && worst_rt <= 1e-12 && clip,
          std::to_string(geometries) + " geometries " + (counts ? "match" : "MISMATCH") + " (186300 case " +
              std::to_string(big) + "); leak scan " + (no_leak ? "clean" : "LEAKS") + "; scaler round trip " +
              fmt(worst_rt) + ", clipping " + (clip ? "exact" : "WRONG")};
}

// ---------------------------------------------------------------------------
// 5-7. The default synthetic run

struct SyntheticRun {
  bool ok = false;
  std::string error;
  GridSeries series;
  Checkpoint ckpt;
  double train_seconds = 0;
  SplitRanges split;
};

SyntheticRun synthetic_run(const fs::path& root) {
  SyntheticRun r;
  const fs::path data = root / "synthetic";
  if (run_cli("synth --rows 20 --cols 20 --days 14 --interval 10 --seed 7 --out " + data.string(),
              root / "synth.log") != 0) {
    r.error = "synth failed, see " + (root / "synth.log").string();
    return r;
  }
  const auto t0 = Clock::now();
  const int code = run_cli("train --data " + (data / "synthetic.hgrd").string() +
                               " --T 6 --K 7 --C 16 --N 2 --batch_size 128 --lr 1e-4 --plateau_patience 7"
                               " --plateau_factor 0.5 --early_stop_patience 15 --max_epochs 40 --seed 7 --out " +
                               (root / "train").string(),
                           root / "train.log");
  r.train_seconds = seconds_since(t0);
  if (code != 0) {
    r.error = "train exited " + std::to_string(code) + ", see " + (root / "train.log").string();
    return r;
  }
  r.series = load_series(data / "synthetic.hgrd");
  r.ckpt = load_checkpoint(root / "train" / "best.ckpt");
  r.split = chronological_split(r.series.frames(), r.ckpt.config.T);
  r.ok = true;
  return r;
}

Outcome learning_sanity(const SyntheticRun& run) {
  if (!run.ok) return {false, run.error};
  const WindowSpec spec{run.ckpt.config.T, run.ckpt.config.K, 1};
  const SampleSet test =
      build_samples(run.series, make_window_index(run.series, spec, run.split.test), spec, run.ckpt.scaler);
  const double model = evaluate_single_step(model_predictor(run.ckpt.params), test, run.series.H, run.series.W).report.mae;
  const double persist = evaluate_single_step(persistence_predictor(spec), test, run.series.H, run.series.W).report.mae;
  const double gmean = evaluate_single_step(grid_mean_predictor(spec), test, run.series.H, run.series.W).report.mae;
  const double margin_p = 1 - model / persist, margin_g = 1 - model / gmean;
  return {margin_p >= 0.05 && margin_g >= 0.05 && run.train_seconds < 1800,
          "test MAE " + fmt(model) + " vs persistence " + fmt(persist) + " (" + fmt(100 * margin_p) +
              "% margin) and grid mean " + fmt(gmean) + " (" + fmt(100 * margin_g) + "% margin), need >= 5%; best epoch " +
              std::to_string(run.ckpt.meta.epoch) + ", training " + fmt(run.train_seconds) + " s"};
}

Outcome rollout_behavior(const SyntheticRun& run) {
  if (!run.ok) return {false, run.error};
  const WindowSpec spec{run.ckpt.config.T, run.ckpt.config.K, 1};
  const Predictor model = model_predictor(run.ckpt.params), persist = persistence_predictor(spec);
  const RolloutConfig rc{6, BoundaryFill::kHoldLast};
  std::vector<MetricsReport> model_avg(6), persist_avg(6);
  bool finite = true;
  double worst_step1 = 0;
  std::size_t starts = 0;
  for (std::size_t start = run.split.test.begin; start + spec.T + rc.steps <= run.split.test.end; start += 12) {
    const RolloutReport rm = autoregressive_rollout(model, run.series, run.ckpt.scaler, spec, start, rc);
    const RolloutReport rp = autoregressive_rollout(persist, run.series, run.ckpt.scaler, spec, start, rc);
    std::vector<Origin> origins;
    for (const Origin& o : make_window_index(run.series, spec, run.split.test))
      if (o.t == start) origins.push_back(o);
    const SampleSet one = build_samples(run.series, origins, spec, run.ckpt.scaler);
    worst_step1 = std::max(worst_step1,
                           std::abs(rm.per_step[0].mae - evaluate_single_step(model, one, run.series.H, run.series.W).report.mae));
    for (std::size_t s = 0; s < rc.steps; ++s) {
      finite = finite && std::isfinite(rm.per_step[s].mae);
      model_avg[s].mae += rm.per_step[s].mae;
      persist_avg[s].mae += rp.per_step[s].mae;
    }
    ++starts;
  }
  for (std::size_t s = 0; s < rc.steps; ++s) {
    model_avg[s].mae /= static_cast<double>(starts);
    persist_avg[s].mae /= static_cast<double>(starts);
  }
  const double sm = mae_slope(model_avg), sp = mae_slope(persist_avg);
  std::string curve;
  for (std::size_t s = 0; s < rc.steps; ++s) curve += (s ? " " : "") + fmt(model_avg[s].mae);
  return {finite && worst_step1 <= 1e-12 && sm < sp,
          "MAE slope " + fmt(sm) + " vs persistence " + fmt(sp) + " over " + std::to_string(starts) +
              " starts; step-1 deviation " + fmt(worst_step1) + "; mean per-step MAE [" + curve + "]"};
}

std::string mask_seconds(const std::string& history) {
  std::string out;
  for (auto line : io::split(history, '\n'))
    if (!line.empty()) out += std::string(line.substr(0, line.rfind(','))) + "\n";
  return out;
}

Outcome determinism(const SyntheticRun& run, const fs::path& root) {
  // Two identical short runs through the CLI.
  const fs::path data = root / "synthetic" / "synthetic.hgrd";
  bool same_history = true, same_ckpt = true;
  std::string hist[2], ckpt[2];
  for (int k = 0; k < 2; ++k) {
    const fs::path out = root / ("repeat_" + std::to_string(k));
    if (run_cli("train --data " + data.string() + " --T 6 --K 7 --C 8 --N 1 --max_epochs 2 --seed 11 --out " +
                    out.string(),
                root / ("repeat_" + std::to_string(k) + ".log")) != 0)
      return {false, "repeat training failed, see " + (root / "repeat_0.log").string()};
    hist[k] = io::read_file(out / "history.csv");
    ckpt[k] = io::read_file(out / "best.ckpt");
  }
  same_history = mask_seconds(hist[0]) == mask_seconds(hist[1]);
  same_ckpt = ckpt[0] == ckpt[1];

  // Save, load and predict in 32-bit mode.
  bool same_pred = false;
  if (run.ok) {
    const WindowSpec spec{run.ckpt.config.T, run.ckpt.config.K, 1};
    const SampleSet test =
        build_samples(run.series, make_window_index(run.series, spec, run.split.test), spec, run.ckpt.scaler);
    const auto before = predict_set(run.ckpt.params, test);
    const fs::path path = root / "resaved.ckpt";
    save_checkpoint(run.ckpt, path);
    const Checkpoint back = load_checkpoint(path);
    const auto after = predict_set(back.params, test);
    same_pred = before == after && io::read_file(path) == io::read_file(root / "train" / "best.ckpt");
  }
  return {same_history && same_ckpt && same_pred,
          std::string("history CSVs ") + (same_history ? "identical" : "DIFFER") + " (seconds column masked)" +
              ", checkpoints " + (same_ckpt ? "identical" : "DIFFER") + ", save/load/predict " +
              (same_pred ? "bit-identical" : (run.ok ? "DIFFERS" : "skipped: " + run.error))};
}

// ---------------------------------------------------------------------------
// 8. Scheduler and stopper state machines

struct ScheduleTrace {
  std::vector<std::size_t> reductions;
  std::size_t stop_epoch = 0;
};

ScheduleTrace drive(const std::vector<double>& losses) {
  PlateauScheduler sched(1e-4, 7, 0.5);
  EarlyStopper stop(15);
  ScheduleTrace tr;
  for (std::size_t e = 1; e <= losses.size(); ++e) {
    if (sched.update(losses[e - 1])) tr.reductions.push_back(e);
    if (stop.update(losses[e - 1])) {
      tr.stop_epoch = e;
      break;
    }
  }
  return tr;
}

/// Counts epochs since the last strict improvement.
ScheduleTrace reference_schedule(const std::vector<double>& losses) {
  ScheduleTrace tr;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since = 0;
  for (std::size_t e = 1; e <= losses.size(); ++e) {
    if (losses[e - 1] < best - 1e-8) {
      best = losses[e - 1];
      since = 0;
    } else {
      ++since;
    }
    if (since > 0 && since % 7 == 0) tr.reductions.push_back(e);
    if (since == 15) {
      tr.stop_epoch = e;
      break;
    }
  }
  return tr;
}

Outcome schedule_machines() {
  const std::vector<double> flat(40, 1.0);
  const ScheduleTrace f = drive(flat);
  bool ok = f.reductions == std::vector<std::size_t>{8, 15} && f.stop_epoch == 16;

  std::vector<std::vector<double>> tables;
  std::vector<double> improve_then_flat;
  for (int e = 0; e < 40; ++e) improve_then_flat.push_back(e < 5 ? 1.0 - 0.1 * e : 0.6);
  tables.push_back(improve_then_flat);
  std::vector<double> late_gain(40, 1.0);
  late_gain[10] = 0.5;
  tables.push_back(late_gain);
  RandomSource rng(88);
  for (int k = 0; k < 20; ++k) {
    std::vector<double> seq;
    double level = 1.0;
    for (int e = 0; e < 60; ++e) {
      if (rng.uniform() < 0.15) level *= 0.9;
      seq.push_back(level * (1 + rng.uniform(0.0, 0.05)));
    }
    tables.push_back(seq);
  }
  for (const auto& t : tables) {
    const ScheduleTrace a = drive(t), b = reference_schedule(t);
    ok = ok && a.reductions == b.reductions && a.stop_epoch == b.stop_epoch;
  }
  const ScheduleTrace itf = drive(improve_then_flat);
  ok = ok && itf.reductions == std::vector<std::size_t>{12, 19} && itf.stop_epoch == 20;
  return {ok, "flat losses: lr halved at epochs 8, 15, stop at " + std::to_string(f.stop_epoch) + "; " +
                  std::to_string(tables.size()) + " tables match the epoch-count reference"};
}

// ---------------------------------------------------------------------------
// 9. Real-data pathway (falls back to the synthetic grid)

Outcome real_data_pathway(const fs::path& root) {
  const char* env = std::getenv("HISTM_MILAN_CSV");
  const bool real = env && *env;
  fs::path csv = real ? fs::path(env) : root / "synthetic" / "synthetic.csv";
  if (!real && !fs::exists(csv) &&
      run_cli("synth --rows 20 --cols 20 --days 14 --seed 7 --out " + (root / "synthetic").string(),
              root / "synth9.log") != 0)
    return {false, "could not write the fallback grid"};
  const fs::path out = root / "pathway";
  const std::string model = " --T 6 --K 11 --C 16 --N 2 --max_epochs 2";
  if (int c = run_cli("train --data " + csv.string() + model + " --out " + (out / "train").string(),
                      root / "pathway_train.log");
      c != 0)
    return {false, "train exited " + std::to_string(c) + ", see " + (root / "pathway_train.log").string()};
  if (int c = run_cli("eval --data " + csv.string() + " --ckpt " + (out / "train" / "best.ckpt").string() +
                          " --out " + (out / "eval").string(),
                      root / "pathway_eval.log");
      c != 0)
    return {false, "eval exited " + std::to_string(c)};
  if (int c = run_cli("analyze --data " + csv.string() + " --out " + (out / "analyze").string(),
                      root / "pathway_analyze.log");
      c != 0)
    return {false, "analyze exited " + std::to_string(c)};

  const std::string metrics = io::read_file(out / "eval" / "metrics.csv");
  std::vector<std::string> keys;
  for (auto line : io::split(metrics, '\n'))
    if (!line.empty()) keys.emplace_back(line.substr(0, line.find(',')));
  const bool shaped = keys == std::vector<std::string>{"metric", "mae", "rmse", "r2", "ssim", "mape", "n_predictions"};
  const std::string diagnostics = io::read_file(out / "analyze" / "diagnostics.csv");
  const auto rows = io::split(diagnostics, '\n');
  const double cell = std::stod(std::string(io::split(rows[1], ',')[1]));
  const double agg = std::stod(std::string(io::split(rows[2], ',')[1]));
  return {shaped && agg < cell, std::string(real ? "Milan CSV " + csv.string() : "synthetic fallback (HISTM_MILAN_CSV unset)") +
                                    ": report " + (shaped ? "complete" : "MALFORMED") + "; ApEn aggregate " + fmt(agg) +
                                    " vs cell " + fmt(cell)};
}

}  // namespace

int main() {
  const fs::path root = work_root();
  std::cout << "artifacts: " << root.string() << std::endl;
  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << name << ": " << o.detail << std::endl;
  };
  report(1, "gradient suite", gradient_suite);
  report(2, "scan oracle", scan_oracle);
  report(3, "metric identities", metric_identities);
  report(4, "pipeline correctness", pipeline_contracts);
  SyntheticRun run;
  try {
    run = synthetic_run(root);
  } catch (const std::exception& e) {
    run.error = std::string("exception: ") + e.what();
  }
  report(5, "learning sanity", [&] { return learning_sanity(run); });
  report(6, "rollout behavior", [&] { return rollout_behavior(run); });
  report(7, "determinism and persistence", [&] { return determinism(run, root); });
  report(8, "scheduler and stopper", schedule_machines);
  report(9, "real-data pathway", [&] { return real_data_pathway(root); });
  std::cout << (failures == 0 ? "all 9 criteria passed" : std::to_string(failures) + " of 9 criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}

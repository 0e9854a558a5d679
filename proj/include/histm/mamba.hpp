#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "histm/init.hpp"
#include "histm/ops.hpp"

namespace histm {

struct MambaConfig {
  std::size_t d_model = 16;
  std::size_t d_state = 16;
  std::size_t d_conv = 4;
  std::size_t expand = 2;

  std::size_t d_inner() const { return expand * d_model; }
  std::size_t dt_rank() const { return std::max<std::size_t>(1, (d_model + 15) / 16); }

  void validate() const {
    if (d_model < 1 || d_state < 1 || expand < 1) throw ConfigError("mamba: d_model, d_state, expand must be >= 1");
    if (d_conv < 1) throw ConfigError("mamba: d_conv must be >= 1");
  }
  bool operator==(const MambaConfig&) const = default;
};

template <class S>
struct MambaParams {
  Tensor<S> in_proj;    // [d_model x 2*d_inner], no bias
  Tensor<S> conv_w;     // [d_inner x d_conv]
  Tensor<S> conv_b;     // [d_inner]
  Tensor<S> x_proj;     // [d_inner x (dt_rank + 2*d_state)], no bias
  Tensor<S> dt_proj_w;  // [dt_rank x d_inner]
  Tensor<S> dt_proj_b;  // [d_inner]
  Tensor<S> A_log;      // [d_inner x d_state], A = -exp(A_log)
  Tensor<S> D_skip;     // [d_inner]
  Tensor<S> out_proj;   // [d_inner x d_model], no bias

  static std::vector<std::pair<std::string, Shape>> layout(const MambaConfig& c) {
    const std::size_t di = c.d_inner(), r = c.dt_rank(), n = c.d_state;
    return {{"in_proj", {c.d_model, 2 * di}}, {"conv_w", {di, c.d_conv}}, {"conv_b", {di}},
            {"x_proj", {di, r + 2 * n}},      {"dt_proj_w", {r, di}},      {"dt_proj_b", {di}},
            {"A_log", {di, n}},               {"D_skip", {di}},            {"out_proj", {di, c.d_model}}};
  }

  std::vector<Tensor<S>*> tensors() {
    return {&in_proj, &conv_w, &conv_b, &x_proj, &dt_proj_w, &dt_proj_b, &A_log, &D_skip, &out_proj};
  }
  std::vector<const Tensor<S>*> tensors() const {
    return {&in_proj, &conv_w, &conv_b, &x_proj, &dt_proj_w, &dt_proj_b, &A_log, &D_skip, &out_proj};
  }

  static MambaParams zeros(const MambaConfig& c) {
    MambaParams p;
    auto lay = layout(c);
    auto ts = p.tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) *ts[i] = Tensor<S>::zeros(lay[i].second, true);
    return p;
  }

  /// Canonical initialization: fan-in uniform projections, A rows -[1..d_state],
  /// dt bias so that softplus(bias) is log-uniform in [1e-3, 1e-1], D = 1.
  static MambaParams init(const MambaConfig& c, RandomSource& rng) {
    c.validate();
    const std::size_t di = c.d_inner(), r = c.dt_rank(), n = c.d_state;
    MambaParams p;
    p.in_proj = seeded_init<S>(rng, {c.d_model, 2 * di}, InitScheme::uniform_fan_in(c.d_model));
    p.conv_w = seeded_init<S>(rng, {di, c.d_conv}, InitScheme::uniform_fan_in(c.d_conv));
    p.conv_b = seeded_init<S>(rng, {di}, InitScheme::uniform_fan_in(c.d_conv));
    p.x_proj = seeded_init<S>(rng, {di, r + 2 * n}, InitScheme::uniform_fan_in(di));
    p.dt_proj_w = seeded_init<S>(rng, {r, di}, InitScheme::uniform_fan_in(r));
    std::vector<S> dt_bias(di);
    const double lo = std::log(1e-3), hi = std::log(1e-1);
    for (auto& b : dt_bias) {
      const double dt = std::max(1e-4, std::exp(lo + rng.uniform() * (hi - lo)));
      b = static_cast<S>(dt + std::log(-std::expm1(-dt)));  // inverse softplus
    }
    p.dt_proj_b = Tensor<S>({di}, std::move(dt_bias), true);
    std::vector<S> a_log(di * n);
    for (std::size_t d = 0; d < di; ++d)
      for (std::size_t k = 0; k < n; ++k) a_log[d * n + k] = static_cast<S>(std::log(static_cast<double>(k + 1)));
    p.A_log = Tensor<S>({di, n}, std::move(a_log), true);
    p.D_skip = Tensor<S>::full({di}, S(1), true);
    p.out_proj = seeded_init<S>(rng, {di, c.d_model}, InitScheme::uniform_fan_in(di));
    return p;
  }
};

/// Gated selective-SSM block over S independent sequences: x [S x T x d_model].
template <class S>
Tensor<S> mamba_batched(const Tensor<S>& x, const MambaParams<S>& p) {
  if (x.rank() != 3) throw DimensionError("mamba_batched: expected [S x T x d_model], got " + shape_str(x.shape()));
  const std::size_t Sq = x.dim(0), T = x.dim(1), dm = x.dim(2);
  if (p.in_proj.dim(0) != dm)
    throw DimensionError("mamba_batched: input width " + std::to_string(dm) + " vs in_proj " +
                         shape_str(p.in_proj.shape()));
  const std::size_t di = p.in_proj.dim(1) / 2, n = p.A_log.dim(1), r = p.dt_proj_w.dim(0);
  const std::size_t rows = Sq * T;

  Tensor<S> xz = matmul(reshape(x, {rows, dm}), p.in_proj);
  Tensor<S> stream = slice_lastdim(xz, 0, di);
  Tensor<S> gate = slice_lastdim(xz, di, di);

  Tensor<S> conv = silu(causal_depthwise_conv1d(reshape(stream, {Sq, T, di}), p.conv_w, p.conv_b));
  Tensor<S> dbc = matmul(reshape(conv, {rows, di}), p.x_proj);
  Tensor<S> delta = softplus(add_bias(matmul(slice_lastdim(dbc, 0, r), p.dt_proj_w), p.dt_proj_b));
  Tensor<S> B = reshape(slice_lastdim(dbc, r, n), {Sq, T, n});
  Tensor<S> C = reshape(slice_lastdim(dbc, r + n, n), {Sq, T, n});
  Tensor<S> A = neg(exp(p.A_log));

  Tensor<S> y = selective_scan(conv, reshape(delta, {Sq, T, di}), A, B, C, p.D_skip);
  Tensor<S> gated = mul(reshape(y, {rows, di}), silu(gate));
  return reshape(matmul(gated, p.out_proj), {Sq, T, dm});
}

/// Single sequence: x [T x d_model] -> [T x d_model].
template <class S>
Tensor<S> mamba_block_forward(const Tensor<S>& x, const MambaParams<S>& p) {
  if (x.rank() != 2) throw DimensionError("mamba_block_forward: expected [T x d_model], got " + shape_str(x.shape()));
  return reshape(mamba_batched(reshape(x, {1, x.dim(0), x.dim(1)}), p), x.shape());
}

}  // namespace histm

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "histm/mamba.hpp"

namespace histm {

struct HiSTMConfig {
  std::size_t T = 6;            // window length
  std::size_t K = 11;           // spatial kernel extent (odd)
  std::size_t D_in = 1;         // input channels
  std::size_t C = 16;           // encoder width
  std::size_t N = 2;            // encoder layers
  std::size_t conv_k = 3;       // spatial conv extent (odd)
  std::size_t mlp_hidden = 32;  // prediction head hidden width
  MambaConfig mamba;            // d_model must equal C

  void validate() const {
    if (T < 1) throw ConfigError("T must be >= 1");
    if (K % 2 == 0) throw ConfigError("K must be odd, got " + std::to_string(K));
    if (conv_k % 2 == 0) throw ConfigError("conv_k must be odd, got " + std::to_string(conv_k));
    if (N < 1) throw ConfigError("N must be >= 1");
    if (D_in != 1) throw ConfigError("D_in must be 1");
    if (C < 1 || mlp_hidden < 1) throw ConfigError("C and mlp_hidden must be >= 1");
    if (mamba.d_model != C) throw ConfigError("mamba.d_model must equal C");
    mamba.validate();
  }
  bool operator==(const HiSTMConfig&) const = default;

  /// Config with mamba.d_model tied to C.
  static HiSTMConfig make(std::size_t T, std::size_t K, std::size_t C, std::size_t N, std::size_t conv_k = 3,
                          std::size_t mlp_hidden = 32, std::size_t d_state = 16, std::size_t d_conv = 4,
                          std::size_t expand = 2) {
    HiSTMConfig c;
    c.T = T;
    c.K = K;
    c.C = C;
    c.N = N;
    c.conv_k = conv_k;
    c.mlp_hidden = mlp_hidden;
    c.mamba = MambaConfig{C, d_state, d_conv, expand};
    return c;
  }
};

template <class S>
struct EncoderLayerParams {
  Tensor<S> conv_w;  // [C x C_in x conv_k x conv_k]
  Tensor<S> conv_b;  // [C]
  MambaParams<S> mamba;
};

template <class S>
struct HiSTMParams {
  HiSTMConfig config;
  std::vector<EncoderLayerParams<S>> layers;
  Tensor<S> att_w;   // [C x 1]
  Tensor<S> att_b;   // [1]
  Tensor<S> mlp1_w;  // [C x mlp_hidden]
  Tensor<S> mlp1_b;  // [mlp_hidden]
  Tensor<S> mlp2_w;  // [mlp_hidden x 1]
  Tensor<S> mlp2_b;  // [1]

  /// Names and shapes of every learnable tensor, in a fixed order.
  static std::vector<std::pair<std::string, Shape>> layout(const HiSTMConfig& c) {
    std::vector<std::pair<std::string, Shape>> out;
    for (std::size_t l = 0; l < c.N; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      const std::size_t cin = l == 0 ? c.D_in : c.C;
      out.push_back({pre + "conv_w", {c.C, cin, c.conv_k, c.conv_k}});
      out.push_back({pre + "conv_b", {c.C}});
      for (auto& [name, shape] : MambaParams<S>::layout(c.mamba)) out.push_back({pre + "mamba." + name, shape});
    }
    out.push_back({"att_w", {c.C, 1}});
    out.push_back({"att_b", {1}});
    out.push_back({"mlp1_w", {c.C, c.mlp_hidden}});
    out.push_back({"mlp1_b", {c.mlp_hidden}});
    out.push_back({"mlp2_w", {c.mlp_hidden, 1}});
    out.push_back({"mlp2_b", {1}});
    return out;
  }

  std::vector<Tensor<S>*> tensors() {
    std::vector<Tensor<S>*> out;
    for (auto& l : layers) {
      out.push_back(&l.conv_w);
      out.push_back(&l.conv_b);
      for (auto* t : l.mamba.tensors()) out.push_back(t);
    }
    for (auto* t : {&att_w, &att_b, &mlp1_w, &mlp1_b, &mlp2_w, &mlp2_b}) out.push_back(t);
    return out;
  }
  std::vector<const Tensor<S>*> tensors() const {
    std::vector<const Tensor<S>*> out;
    for (auto* t : const_cast<HiSTMParams*>(this)->tensors()) out.push_back(t);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<S>>> named() const {
    auto lay = layout(config);
    auto ts = tensors();
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (std::size_t i = 0; i < ts.size(); ++i) out.emplace_back(lay[i].first, *ts[i]);
    return out;
  }

  static HiSTMParams zeros(const HiSTMConfig& c) {
    c.validate();
    HiSTMParams p;
    p.config = c;
    p.layers.resize(c.N);
    auto lay = layout(c);
    auto ts = p.tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) *ts[i] = Tensor<S>::zeros(lay[i].second, true);
    return p;
  }

  static HiSTMParams init(const HiSTMConfig& c, std::uint64_t seed) {
    c.validate();
    RandomSource rng(seed);
    HiSTMParams p;
    p.config = c;
    for (std::size_t l = 0; l < c.N; ++l) {
      const std::size_t cin = l == 0 ? c.D_in : c.C;
      const auto fan = InitScheme::uniform_fan_in(cin * c.conv_k * c.conv_k);
      EncoderLayerParams<S> layer;
      layer.conv_w = seeded_init<S>(rng, {c.C, cin, c.conv_k, c.conv_k}, fan);
      layer.conv_b = seeded_init<S>(rng, {c.C}, fan);
      layer.mamba = MambaParams<S>::init(c.mamba, rng);
      p.layers.push_back(std::move(layer));
    }
    p.att_w = seeded_init<S>(rng, {c.C, 1}, InitScheme::uniform_fan_in(c.C));
    p.att_b = seeded_init<S>(rng, {1}, InitScheme::uniform_fan_in(c.C));
    p.mlp1_w = seeded_init<S>(rng, {c.C, c.mlp_hidden}, InitScheme::uniform_fan_in(c.C));
    p.mlp1_b = seeded_init<S>(rng, {c.mlp_hidden}, InitScheme::uniform_fan_in(c.C));
    p.mlp2_w = seeded_init<S>(rng, {c.mlp_hidden, 1}, InitScheme::uniform_fan_in(c.mlp_hidden));
    p.mlp2_b = seeded_init<S>(rng, {1}, InitScheme::uniform_fan_in(c.mlp_hidden));
    return p;
  }

  /// Deep copy, optionally converting precision.
  template <class U>
  HiSTMParams<U> cast() const {
    HiSTMParams<U> out = HiSTMParams<U>::zeros(config);
    auto src = tensors();
    auto dst = out.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto sv = src[i]->data();
      auto dv = dst[i]->data();
      for (std::size_t j = 0; j < sv.size(); ++j) dv[j] = static_cast<U>(sv[j]);
    }
    return out;
  }
  HiSTMParams clone() const { return cast<S>(); }
};

/// Number of learnable scalars for a config.
inline std::size_t param_count(const HiSTMConfig& c) {
  std::size_t n = 0;
  for (auto& [name, shape] : HiSTMParams<double>::layout(c)) n += shape_numel(shape);
  return n;
}

namespace detail {

/// One encoder layer on a square tile of the K x K frame.
/// x: [B*T x C_in x h_in x h_in] covering [in0, in0+h_in); returns
/// [B*T x C x h_out x h_out] covering [out0, out0+h_out).
template <class S>
Tensor<S> encoder_layer_tile(const Tensor<S>& x, const EncoderLayerParams<S>& layer, std::size_t B, std::size_t T,
                             std::size_t K, std::size_t in0, std::size_t out0, std::size_t h_out) {
  if (x.rank() != 4 || x.dim(1) != layer.conv_w.dim(1))
    throw DimensionError("encoder layer: input " + shape_str(x.shape()) + " does not match conv weight " +
                         shape_str(layer.conv_w.shape()));
  ConvWindow win;
  win.frame_h = win.frame_w = K;
  win.in_y0 = win.in_x0 = in0;
  win.out_y0 = win.out_x0 = out0;
  win.out_h = win.out_w = h_out;
  Tensor<S> conv = relu(conv2d_window(x, layer.conv_w, layer.conv_b, win));
  const std::size_t C = conv.dim(1), E = h_out * h_out;

  // [B*T, C, E] -> sequences [B*E, T, C]
  std::vector<std::size_t> to_seq(B * E * T * C);
  std::size_t i = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < E; ++p)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) to_seq[i++] = ((b * T + t) * C + c) * E + p;
  Tensor<S> seq = gather(conv, std::move(to_seq), {B * E, T, C});
  Tensor<S> m = mamba_batched(seq, layer.mamba);

  std::vector<std::size_t> to_grid(B * T * C * E);
  i = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < E; ++p) to_grid[i++] = ((b * E + p) * T + t) * C + c;
  return gather(m, std::move(to_grid), {B * T, C, h_out, h_out});
}

/// [T x K x K x C] <-> [T x C x K x K]
inline std::vector<std::size_t> channels_last_to_first(std::size_t T, std::size_t K, std::size_t C) {
  std::vector<std::size_t> idx(T * C * K * K);
  std::size_t i = 0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < K * K; ++p) idx[i++] = (t * K * K + p) * C + c;
  return idx;
}
inline std::vector<std::size_t> channels_first_to_last(std::size_t T, std::size_t K, std::size_t C) {
  std::vector<std::size_t> idx(T * K * K * C);
  std::size_t i = 0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t p = 0; p < K * K; ++p)
      for (std::size_t c = 0; c < C; ++c) idx[i++] = (t * C + c) * K * K + p;
  return idx;
}

}  // namespace detail

/// One encoder layer on the full frame: x [T x K x K x C_in] -> [T x K x K x C].
template <class S>
Tensor<S> encoder_layer_forward(const Tensor<S>& x, const EncoderLayerParams<S>& layer) {
  if (x.rank() != 4 || x.dim(1) != x.dim(2))
    throw DimensionError("encoder_layer_forward: expected [T x K x K x C_in], got " + shape_str(x.shape()));
  const std::size_t T = x.dim(0), K = x.dim(1), Cin = x.dim(3);
  if (Cin != layer.conv_w.dim(1))
    throw DimensionError("encoder_layer_forward: input has " + std::to_string(Cin) + " channels, layer expects " +
                         std::to_string(layer.conv_w.dim(1)));
  Tensor<S> first = gather(x, detail::channels_last_to_first(T, K, Cin), {T, Cin, K, K});
  Tensor<S> y = detail::encoder_layer_tile(first, layer, 1, T, K, 0, 0, K);
  const std::size_t C = y.dim(1);
  return gather(y, detail::channels_first_to_last(T, K, C), {T, K, K, C});
}

/// Full hierarchical encoding: x [T x K x K] -> X^(N) [T x K x K x C].
template <class S>
Tensor<S> encode(const Tensor<S>& x, const HiSTMParams<S>& params) {
  if (x.rank() != 3 || x.dim(1) != x.dim(2))
    throw DimensionError("encode: expected [T x K x K], got " + shape_str(x.shape()));
  Tensor<S> h = reshape(x, {x.dim(0), x.dim(1), x.dim(2), 1});
  for (const auto& layer : params.layers) h = encoder_layer_forward(h, layer);
  return h;
}

/// Center-cell features across time: [T x K x K x C] -> [T x C].
template <class S>
Tensor<S> extract_center(const Tensor<S>& x_enc) {
  if (x_enc.rank() != 4 || x_enc.dim(1) != x_enc.dim(2))
    throw DimensionError("extract_center: expected [T x K x K x C], got " + shape_str(x_enc.shape()));
  const std::size_t T = x_enc.dim(0), K = x_enc.dim(1), C = x_enc.dim(3);
  if (K % 2 == 0) throw ConfigError("extract_center: K must be odd, got " + std::to_string(K));
  const std::size_t mid = (K - 1) / 2;
  std::vector<std::size_t> idx(T * C);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) idx[t * C + c] = ((t * K + mid) * K + mid) * C + c;
  return gather(x_enc, std::move(idx), {T, C});
}

/// Softmax weights over time: h [B x T x C] -> alpha [B x T].
template <class S>
Tensor<S> attention_weights(const Tensor<S>& h, const Tensor<S>& att_w, const Tensor<S>& att_b) {
  if (h.rank() != 3) throw DimensionError("attention_weights: expected [B x T x C], got " + shape_str(h.shape()));
  const std::size_t B = h.dim(0), T = h.dim(1), C = h.dim(2);
  Tensor<S> e = linear(reshape(h, {B * T, C}), att_w, &att_b);
  return softmax_lastdim(reshape(e, {B, T}));
}

/// Context vector c = sum_t alpha_t h_t. h [T x C] -> [C], or [B x T x C] -> [B x C].
template <class S>
Tensor<S> temporal_attention(const Tensor<S>& h, const Tensor<S>& att_w, const Tensor<S>& att_b) {
  if (h.rank() == 2) {
    Tensor<S> c = temporal_attention(reshape(h, {1, h.dim(0), h.dim(1)}), att_w, att_b);
    return reshape(c, {h.dim(1)});
  }
  const std::size_t B = h.dim(0), T = h.dim(1), C = h.dim(2);
  Tensor<S> alpha = attention_weights(h, att_w, att_b);
  return reshape(bmm(reshape(alpha, {B, 1, T}), h), {B, C});
}

/// Two-layer head: c [C] -> [1], or [B x C] -> [B].
template <class S>
Tensor<S> mlp_head(const Tensor<S>& c, const HiSTMParams<S>& p) {
  if (c.rank() == 1) return reshape(mlp_head(reshape(c, {1, c.dim(0)}), p), {1});
  Tensor<S> hidden = relu(linear(c, p.mlp1_w, &p.mlp1_b));
  Tensor<S> y = linear(hidden, p.mlp2_w, &p.mlp2_b);
  return reshape(y, {c.dim(0)});
}

/// Batched prediction: xs [B x T x K x K] -> [B].
///
/// Only the center cell reaches the head, and the per-location temporal
/// blocks do not mix cells, so layer l is evaluated on the tile of radius
/// (N - l) * (conv_k - 1) / 2 around the center. Each computed cell sees the
/// same arithmetic as in encode(), so results match the full path bitwise.
template <class S>
Tensor<S> predict_batch(const Tensor<S>& xs, const HiSTMParams<S>& params) {
  const auto& cfg = params.config;
  if (xs.rank() != 4 || xs.dim(1) != cfg.T || xs.dim(2) != cfg.K || xs.dim(3) != cfg.K)
    throw DimensionError("predict_batch: expected [B x " + std::to_string(cfg.T) + " x " + std::to_string(cfg.K) +
                         " x " + std::to_string(cfg.K) + "], got " + shape_str(xs.shape()));
  const std::size_t B = xs.dim(0), T = cfg.T, K = cfg.K, mid = (K - 1) / 2, pad = cfg.conv_k / 2;
  auto tile = [&](std::size_t radius) {
    const std::size_t r = std::min(radius, mid);
    return std::pair<std::size_t, std::size_t>{mid - r, 2 * r + 1};
  };

  auto [in0, h_in] = tile(cfg.N * pad);
  std::vector<std::size_t> idx(B * T * h_in * h_in);
  std::size_t i = 0;
  for (std::size_t bt = 0; bt < B * T; ++bt)
    for (std::size_t y = 0; y < h_in; ++y)
      for (std::size_t x = 0; x < h_in; ++x) idx[i++] = (bt * K + in0 + y) * K + in0 + x;
  Tensor<S> h = gather(xs, std::move(idx), {B * T, 1, h_in, h_in});

  for (std::size_t l = 0; l < cfg.N; ++l) {
    auto [out0, h_out] = tile((cfg.N - l - 1) * pad);
    h = detail::encoder_layer_tile(h, params.layers[l], B, T, K, in0, out0, h_out);
    in0 = out0;
  }
  Tensor<S> center = reshape(h, {B, T, cfg.C});
  return mlp_head(temporal_attention(center, params.att_w, params.att_b), params);
}

/// Single window: x [T x K x K] -> scalar [1].
template <class S>
Tensor<S> predict(const Tensor<S>& x, const HiSTMParams<S>& params) {
  if (x.rank() != 3) throw DimensionError("predict: expected [T x K x K], got " + shape_str(x.shape()));
  return predict_batch(reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)}), params);
}

}  // namespace histm

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "histm/tensor.hpp"

namespace histm {

namespace detail {

template <class S, class Fn>
void attach(Tensor<S>& out, GradTape<S>* tape, Fn&& adjoint) {
  if (!tape) return;
  out.set_requires_grad(true);
  tape->record(std::forward<Fn>(adjoint));
}

template <class S>
void accumulate(TensorNode<S>& n, const std::vector<S>& g) {
  if (!n.requires_grad) return;
  n.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(s));
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " differ");
}

template <class S>
void require_finite(const Tensor<S>& x, const char* op) {
  if (!all_finite(x)) throw NumericDomainError(std::string(op) + ": non-finite input");
}

template <class S>
S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  const S z = std::exp(x);
  return z / (S(1) + z);
}

template <class S>
S softplus(S x) {
  return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
}

/// Elementwise op with derivative expressed through input and output.
template <class S, class F, class DF>
Tensor<S> unary(const Tensor<S>& x, F f, DF df) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = f(xv[i]);
  attach(out, recording_tape<S>(x), [xn = x.node(), on = out.node(), df] {
    if (on->grad.empty()) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < on->grad.size(); ++i)
      xn->grad[i] += on->grad[i] * df(xn->value[i], on->value[i]);
  });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m x k] . [k x n] -> [m x n]
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  const S* A = a.data().data();
  const S* B = b.data().data();
  S* C = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    S* ci = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S aip = A[i * k + p];
      const S* bp = B + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  detail::attach(out, detail::recording_tape<S>(a, b), [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
    if (on->grad.empty()) return;
    const S* G = on->grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      // dA = G . B^T, accumulated row-wise over a transposed copy of B.
      std::vector<S> bt(k * n);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bn->value[p * n + j];
      S* GA = an->grad.data();
      for (std::size_t i = 0; i < m; ++i) {
        S* ga = GA + i * k;
        const S* gi = G + i * n;
        for (std::size_t j = 0; j < n; ++j) {
          const S g = gi[j];
          const S* bj = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) ga[p] += g * bj[p];
        }
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      const S* Av = an->value.data();
      S* GB = bn->grad.data();
      for (std::size_t i = 0; i < m; ++i) {
        const S* gi = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const S aip = Av[i * k + p];
          S* gb = GB + p * n;
          for (std::size_t j = 0; j < n; ++j) gb[j] += aip * gi[j];
        }
      }
    }
  });
  return out;
}

/// Batched [b x m x k] . [b x k x n] -> [b x m x n]
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("bmm: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<S> out = Tensor<S>::zeros({bs, m, n});
  const S* A = a.data().data();
  const S* B = b.data().data();
  S* C = out.data().data();
  for (std::size_t q = 0; q < bs; ++q)
    for (std::size_t i = 0; i < m; ++i) {
      S* ci = C + (q * m + i) * n;
      for (std::size_t p = 0; p < k; ++p) {
        const S aip = A[(q * m + i) * k + p];
        const S* bp = B + (q * k + p) * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  detail::attach(out, detail::recording_tape<S>(a, b), [an = a.node(), bn = b.node(), on = out.node(), bs, m, k, n] {
    if (on->grad.empty()) return;
    const S* G = on->grad.data();
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t q = 0; q < bs; ++q)
      for (std::size_t i = 0; i < m; ++i) {
        const S* gi = G + (q * m + i) * n;
        for (std::size_t p = 0; p < k; ++p) {
          const S* bp = bn->value.data() + (q * k + p) * n;
          if (an->requires_grad) {
            S acc = 0;
            for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
            an->grad[(q * m + i) * k + p] += acc;
          }
          if (bn->requires_grad) {
            const S aip = an->value[(q * m + i) * k + p];
            S* gb = bn->grad.data() + (q * k + p) * n;
            for (std::size_t j = 0; j < n; ++j) gb[j] += aip * gi[j];
          }
        }
      }
  });
  return out;
}

/// x[..., n] + bias[n], bias broadcast over leading axes.
template <class S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  if (bias.rank() != 1 || x.shape().back() != bias.dim(0))
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  const std::size_t n = bias.dim(0), rows = x.numel() / n;
  Tensor<S> out(x.shape(), x.values());
  auto ov = out.data();
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) ov[r * n + j] += bv[j];
  detail::attach(out, detail::recording_tape<S>(x, bias), [xn = x.node(), bn = bias.node(), on = out.node(), rows, n] {
    if (on->grad.empty()) return;
    detail::accumulate(*xn, on->grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) bn->grad[j] += on->grad[r * n + j];
    }
  });
  return out;
}

/// x . w + b with w stored [in x out].
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* b) {
  Tensor<S> y = matmul(x, w);
  return b ? add_bias(y, *b) : y;
}

// ---------------------------------------------------------------------------
// Elementwise

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<S> out(a.shape(), a.values());
  auto ov = out.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  detail::attach(out, detail::recording_tape<S>(a, b), [an = a.node(), bn = b.node(), on = out.node()] {
    if (on->grad.empty()) return;
    detail::accumulate(*an, on->grad);
    detail::accumulate(*bn, on->grad);
  });
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<S> out(a.shape(), a.values());
  auto ov = out.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
  detail::attach(out, detail::recording_tape<S>(a, b), [an = a.node(), bn = b.node(), on = out.node()] {
    if (on->grad.empty()) return;
    detail::accumulate(*an, on->grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    }
  });
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<S> out(a.shape(), a.values());
  auto ov = out.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
  detail::attach(out, detail::recording_tape<S>(a, b), [an = a.node(), bn = b.node(), on = out.node()] {
    if (on->grad.empty()) return;
    const auto& g = on->grad;
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * an->value[i];
    }
  });
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  return detail::unary(x, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <class S>
Tensor<S> neg(const Tensor<S>& x) {
  return scale(x, S(-1));
}

/// |x| with subgradient 0 at 0.
template <class S>
Tensor<S> abs(const Tensor<S>& x) {
  return detail::unary(
      x, [](S v) { return std::abs(v); },
      [](S v, S) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
}

/// max(0, x); gradient at 0 is 0.
template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  detail::require_finite(x, "relu");
  return detail::unary(x, [](S v) { return v > S(0) ? v : S(0); }, [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> silu(const Tensor<S>& x) {
  detail::require_finite(x, "silu");
  return detail::unary(
      x, [](S v) { return v * detail::sigmoid(v); },
      [](S v, S) {
        const S s = detail::sigmoid(v);
        return s * (S(1) + v * (S(1) - s));
      });
}

template <class S>
Tensor<S> exp(const Tensor<S>& x) {
  detail::require_finite(x, "exp");
  return detail::unary(x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <class S>
Tensor<S> softplus(const Tensor<S>& x) {
  detail::require_finite(x, "softplus");
  return detail::unary(x, [](S v) { return detail::softplus(v); }, [](S v, S) { return detail::sigmoid(v); });
}

// ---------------------------------------------------------------------------
// Reductions

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = 0;
  for (S v : x.data()) acc += v;
  Tensor<S> out = Tensor<S>::scalar(acc);
  detail::attach(out, detail::recording_tape<S>(x), [xn = x.node(), on = out.node()] {
    if (on->grad.empty()) return;
    xn->ensure_grad();
    for (auto& g : xn->grad) g += on->grad[0];
  });
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

/// Softmax over the last axis, max-shifted.
template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("softmax_lastdim: empty last dimension");
  detail::require_finite(x, "softmax_lastdim");
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xi = xv.data() + r * n;
    S* yi = ov.data() + r * n;
    const S mx = *std::max_element(xi, xi + n);
    S z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yi[j] /= z;
  }
  detail::attach(out, detail::recording_tape<S>(x), [xn = x.node(), on = out.node(), rows, n] {
    if (on->grad.empty()) return;
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const S* y = on->value.data() + r * n;
      const S* g = on->grad.data() + r * n;
      S dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) xn->grad[r * n + j] += y[j] * (g[j] - dot);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Layout

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor<S> out(std::move(shape), x.values());
  detail::attach(out, detail::recording_tape<S>(x), [xn = x.node(), on = out.node()] {
    if (on->grad.empty()) return;
    detail::accumulate(*xn, on->grad);
  });
  return out;
}

/// out.flat[i] = x.flat[index[i]]; the backward pass scatter-adds.
template <class S>
Tensor<S> gather(const Tensor<S>& x, std::vector<std::size_t> index, Shape shape) {
  if (shape_numel(shape) != index.size())
    throw DimensionError("gather: index count does not match " + shape_str(shape));
  std::vector<S> v(index.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.size()) throw DimensionError("gather: index out of range");
    v[i] = xv[index[i]];
  }
  Tensor<S> out(std::move(shape), std::move(v));
  detail::attach(out, detail::recording_tape<S>(x), [xn = x.node(), on = out.node(), idx = std::move(index)] {
    if (on->grad.empty()) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) xn->grad[idx[i]] += on->grad[i];
  });
  return out;
}

/// Columns [begin, begin+len) of the last axis.
template <class S>
Tensor<S> slice_lastdim(const Tensor<S>& x, std::size_t begin, std::size_t len) {
  const std::size_t n = x.shape().back();
  if (len == 0 || begin + len > n)
    throw DimensionError("slice_lastdim: [" + std::to_string(begin) + ", " + std::to_string(begin + len) +
                         ") outside " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / n;
  Shape shape = x.shape();
  shape.back() = len;
  Tensor<S> out = Tensor<S>::zeros(shape);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data() + r * n + begin, len, ov.data() + r * len);
  detail::attach(out, detail::recording_tape<S>(x), [xn = x.node(), on = out.node(), rows, n, begin, len] {
    if (on->grad.empty()) return;
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < len; ++j) xn->grad[r * n + begin + j] += on->grad[r * len + j];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions

/// Placement of an input and output tile inside a zero-padded frame. The
/// full same-padded convolution is the tile covering the whole frame; a
/// smaller output tile computes exactly the same sums for the cells it holds.
struct ConvWindow {
  std::size_t frame_h = 0, frame_w = 0;
  std::size_t in_y0 = 0, in_x0 = 0;
  std::size_t out_y0 = 0, out_x0 = 0, out_h = 0, out_w = 0;
};

/// Same-padded 2D cross-correlation on a tile.
/// input [N x Cin x in_h x in_w], weight [Cout x Cin x k x k], bias [Cout]
/// -> [N x Cout x out_h x out_w]. Taps outside the frame read zero; taps
/// inside the frame must lie inside the input tile.
template <class S>
Tensor<S> conv2d_window(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                        const ConvWindow& win) {
  detail::require_rank(input.shape(), 4, "conv2d");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  const std::size_t N = input.dim(0), Cin = input.dim(1), ih = input.dim(2), iw = input.dim(3);
  const std::size_t Cout = weight.dim(0), k = weight.dim(2);
  if (k % 2 == 0) throw ConfigError("conv2d: kernel extent must be odd, got " + std::to_string(k));
  if (weight.dim(3) != k) throw DimensionError("conv2d: kernel must be square, got " + shape_str(weight.shape()));
  if (weight.dim(1) != Cin)
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + " has " + std::to_string(Cin) +
                         " channels but weight " + shape_str(weight.shape()) + " expects " +
                         std::to_string(weight.dim(1)));
  if (bias.rank() != 1 || bias.dim(0) != Cout)
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(Cout) + " outputs");
  const long pad = static_cast<long>(k / 2);
  const std::size_t oh = win.out_h, ow = win.out_w;

  // Per output cell, the in-frame taps as (tap index, input offset).
  struct Tap {
    std::size_t w_off;
    std::size_t x_off;
  };
  std::vector<std::vector<Tap>> taps(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      const long Y = static_cast<long>(win.out_y0 + y), X = static_cast<long>(win.out_x0 + x);
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long sy = Y + static_cast<long>(ky) - pad, sx = X + static_cast<long>(kx) - pad;
          if (sy < 0 || sx < 0 || sy >= static_cast<long>(win.frame_h) || sx >= static_cast<long>(win.frame_w))
            continue;
          const long ty = sy - static_cast<long>(win.in_y0), tx = sx - static_cast<long>(win.in_x0);
          if (ty < 0 || tx < 0 || ty >= static_cast<long>(ih) || tx >= static_cast<long>(iw))
            throw DimensionError("conv2d: input tile does not cover the receptive field");
          taps[y * ow + x].push_back({ky * k + kx, static_cast<std::size_t>(ty) * iw + static_cast<std::size_t>(tx)});
        }
    }

  Tensor<S> out = Tensor<S>::zeros({N, Cout, oh, ow});
  const S* xv = input.data().data();
  const S* wv = weight.data().data();
  const S* bv = bias.data().data();
  S* ov = out.data().data();
  const std::size_t kk = k * k, iplane = ih * iw, oplane = oh * ow;
  for (std::size_t nn = 0; nn < N; ++nn)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t c = 0; c < oplane; ++c) {
        S acc = bv[co];
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          const S* xp = xv + (nn * Cin + ci) * iplane;
          const S* wp = wv + (co * Cin + ci) * kk;
          for (const Tap& t : taps[c]) acc += wp[t.w_off] * xp[t.x_off];
        }
        ov[(nn * Cout + co) * oplane + c] = acc;
      }

  detail::attach(out, detail::recording_tape<S>(input, weight, bias),
                 [xn = input.node(), wn = weight.node(), bn = bias.node(), on = out.node(), taps = std::move(taps), N,
                  Cin, Cout, kk, iplane, oplane] {
                   if (on->grad.empty()) return;
                   const bool gx = xn->requires_grad, gw = wn->requires_grad, gb = bn->requires_grad;
                   if (gx) xn->ensure_grad();
                   if (gw) wn->ensure_grad();
                   if (gb) bn->ensure_grad();
                   for (std::size_t nn = 0; nn < N; ++nn)
                     for (std::size_t co = 0; co < Cout; ++co)
                       for (std::size_t c = 0; c < oplane; ++c) {
                         const S g = on->grad[(nn * Cout + co) * oplane + c];
                         if (g == S(0)) continue;
                         if (gb) bn->grad[co] += g;
                         for (std::size_t ci = 0; ci < Cin; ++ci) {
                           const std::size_t xb = (nn * Cin + ci) * iplane, wb = (co * Cin + ci) * kk;
                           for (const Tap& t : taps[c]) {
                             if (gx) xn->grad[xb + t.x_off] += g * wn->value[wb + t.w_off];
                             if (gw) wn->grad[wb + t.w_off] += g * xn->value[xb + t.x_off];
                           }
                         }
                       }
                 });
  return out;
}

/// Same-padded 2D cross-correlation. input [Cin x H x W] or [N x Cin x H x W].
template <class S>
Tensor<S> conv2d_same(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias) {
  if (input.rank() == 3) {
    const auto& s = input.shape();
    Tensor<S> y = conv2d_same(reshape(input, {1, s[0], s[1], s[2]}), weight, bias);
    return reshape(y, {y.dim(1), y.dim(2), y.dim(3)});
  }
  detail::require_rank(input.shape(), 4, "conv2d_same");
  ConvWindow w;
  w.frame_h = w.out_h = input.dim(2);
  w.frame_w = w.out_w = input.dim(3);
  return conv2d_window(input, weight, bias, w);
}

/// Causal depthwise 1D convolution along time, left-padded with k-1 zeros.
/// x [S x T x D] or [T x D], weight [D x k], bias [D].
template <class S>
Tensor<S> causal_depthwise_conv1d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias) {
  if (x.rank() == 2) {
    Tensor<S> y = causal_depthwise_conv1d(reshape(x, {1, x.dim(0), x.dim(1)}), weight, bias);
    return reshape(y, x.shape());
  }
  detail::require_rank(x.shape(), 3, "causal_depthwise_conv1d");
  if (weight.rank() != 2) throw DimensionError("causal_depthwise_conv1d: weight must be [D x k]");
  const std::size_t Sq = x.dim(0), T = x.dim(1), D = x.dim(2), k = weight.dim(1);
  if (k < 1) throw ConfigError("causal_depthwise_conv1d: kernel width must be >= 1");
  if (weight.dim(0) != D || bias.rank() != 1 || bias.dim(0) != D)
    throw DimensionError("causal_depthwise_conv1d: weight " + shape_str(weight.shape()) + " / bias " +
                         shape_str(bias.shape()) + " for input " + shape_str(x.shape()));
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* xv = x.data().data();
  const S* wv = weight.data().data();
  const S* bv = bias.data().data();
  S* ov = out.data().data();
  for (std::size_t s = 0; s < Sq; ++s)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        S acc = bv[d];
        for (std::size_t j = 0; j < k; ++j) {
          const long src = static_cast<long>(t + j) - static_cast<long>(k - 1);
          if (src < 0) continue;
          acc += wv[d * k + j] * xv[(s * T + static_cast<std::size_t>(src)) * D + d];
        }
        ov[(s * T + t) * D + d] = acc;
      }
  detail::attach(out, detail::recording_tape<S>(x, weight, bias),
                 [xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node(), Sq, T, D, k] {
                   if (on->grad.empty()) return;
                   const bool gx = xn->requires_grad, gw = wn->requires_grad, gb = bn->requires_grad;
                   if (gx) xn->ensure_grad();
                   if (gw) wn->ensure_grad();
                   if (gb) bn->ensure_grad();
                   for (std::size_t s = 0; s < Sq; ++s)
                     for (std::size_t t = 0; t < T; ++t)
                       for (std::size_t d = 0; d < D; ++d) {
                         const S g = on->grad[(s * T + t) * D + d];
                         if (gb) bn->grad[d] += g;
                         for (std::size_t j = 0; j < k; ++j) {
                           const long src = static_cast<long>(t + j) - static_cast<long>(k - 1);
                           if (src < 0) continue;
                           const std::size_t xi = (s * T + static_cast<std::size_t>(src)) * D + d;
                           if (gx) xn->grad[xi] += g * wn->value[d * k + j];
                           if (gw) wn->grad[d * k + j] += g * xn->value[xi];
                         }
                       }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Selective state space

/// Zero-order hold for the state matrix, Euler rule for the input matrix:
/// Abar[t,d,n] = exp(delta[t,d] * A[d,n]), Bbar[t,d,n] = delta[t,d] * B[t,n].
template <class S>
std::pair<Tensor<S>, Tensor<S>> discretize(const Tensor<S>& delta, const Tensor<S>& A, const Tensor<S>& B) {
  detail::require_rank(delta.shape(), 2, "discretize delta");
  detail::require_rank(A.shape(), 2, "discretize A");
  detail::require_rank(B.shape(), 2, "discretize B");
  const std::size_t T = delta.dim(0), D = delta.dim(1), N = A.dim(1);
  if (A.dim(0) != D || B.dim(0) != T || B.dim(1) != N)
    throw DimensionError("discretize: delta " + shape_str(delta.shape()) + ", A " + shape_str(A.shape()) + ", B " +
                         shape_str(B.shape()));
  for (S v : delta.data())
    if (!(v > S(0))) throw NumericDomainError("discretize: delta must be positive");
  Tensor<S> abar = Tensor<S>::zeros({T, D, N});
  Tensor<S> bbar = Tensor<S>::zeros({T, D, N});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t n = 0; n < N; ++n) {
        const S dl = delta.data()[t * D + d];
        abar.data()[(t * D + d) * N + n] = std::exp(dl * A.data()[d * N + n]);
        bbar.data()[(t * D + d) * N + n] = dl * B.data()[t * N + n];
      }
  GradTape<S>* tape = detail::recording_tape<S>(delta, A, B);
  detail::attach(abar, tape, [dn = delta.node(), an = A.node(), on = abar.node(), T, D, N] {
    if (on->grad.empty()) return;
    if (dn->requires_grad) dn->ensure_grad();
    if (an->requires_grad) an->ensure_grad();
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t i = (t * D + d) * N + n;
          const S g = on->grad[i] * on->value[i];
          if (dn->requires_grad) dn->grad[t * D + d] += g * an->value[d * N + n];
          if (an->requires_grad) an->grad[d * N + n] += g * dn->value[t * D + d];
        }
  });
  detail::attach(bbar, tape, [dn = delta.node(), bn = B.node(), on = bbar.node(), T, D, N] {
    if (on->grad.empty()) return;
    if (dn->requires_grad) dn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t n = 0; n < N; ++n) {
          const S g = on->grad[(t * D + d) * N + n];
          if (dn->requires_grad) dn->grad[t * D + d] += g * bn->value[t * N + n];
          if (bn->requires_grad) bn->grad[t * N + n] += g * dn->value[t * D + d];
        }
  });
  return {abar, bbar};
}

namespace detail {

/// Branch-free float exp (Cody-Waite reduction, degree-6 polynomial) that
/// auto-vectorizes; relative error stays within a few ulp.
inline float exp_lane(float x) {
  const float xc = std::min(std::max(x, -87.3f), 88.7f);
  const float shifter = 12582912.0f;
  const float t = xc * 1.44269504f + shifter;
  const float n = t - shifter;
  const float r = (xc - n * 0.693145752f) - n * 1.42860677e-6f;
  float p = 1.0f / 720.0f;
  p = p * r + 1.0f / 120.0f;
  p = p * r + 1.0f / 24.0f;
  p = p * r + 1.0f / 6.0f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const auto bits = static_cast<std::uint32_t>(static_cast<std::int32_t>(n) + 127) << 23;
  const float v = p * std::bit_cast<float>(bits);
  return v * static_cast<float>(x >= -87.3f);
}

template <class S>
S scan_exp(S x) {
  if constexpr (std::is_same_v<S, float>)
    return exp_lane(x);
  else
    return std::exp(x);
}

/// Forward recurrence for one sequence; hs and as receive [T x D x N] states and transitions.
template <class S>
void scan_sequence(std::size_t s, std::size_t T, std::size_t D, std::size_t N, const S* uv, const S* dv, const S* av,
                   const S* bv, const S* cv, const S* sv, S* hs, S* as, S* yv) {
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t st = s * T + t;
    const S* Bt = bv + st * N;
    const S* Ct = cv + st * N;
    for (std::size_t d = 0; d < D; ++d) {
      const S dl = dv[st * D + d], uu = uv[st * D + d];
      const S* Ad = av + d * N;
      S* ad = as + (t * D + d) * N;
      S* hd = hs + (t * D + d) * N;
      const S* hp = t > 0 ? hd - D * N : nullptr;
      for (std::size_t n = 0; n < N; ++n) ad[n] = scan_exp(dl * Ad[n]);
      if (hp)
        for (std::size_t n = 0; n < N; ++n) hd[n] = ad[n] * hp[n] + dl * Bt[n] * uu;
      else
        for (std::size_t n = 0; n < N; ++n) hd[n] = ad[n] * S(0) + dl * Bt[n] * uu;
      S acc = 0;
      for (std::size_t n = 0; n < N; ++n) acc += Ct[n] * hd[n];
      yv[st * D + d] = acc + sv[d] * uu;
    }
  }
}

/// Adjoint of one (t, d) state update; cd carries dL/dh from step t+1 on entry and to step t-1 on exit.
template <class S>
void scan_state_adjoint(std::size_t N, S g, S uu, S dl, const S* __restrict Ct, const S* __restrict Bt,
                        const S* __restrict h, const S* __restrict hp, const S* __restrict a, const S* __restrict Ad,
                        S* __restrict cd, S* __restrict gCt, S* __restrict gAd, S* __restrict gBt, S* __restrict tdl,
                        S* __restrict tu) {
  for (std::size_t n = 0; n < N; ++n) {
    const S gh = Ct[n] * g + cd[n];
    gCt[n] += g * h[n];
    tdl[n] = gh * (hp[n] * a[n] * Ad[n] + Bt[n] * uu);
    gAd[n] += gh * hp[n] * a[n] * dl;
    gBt[n] += gh * dl * uu;
    tu[n] = gh * dl * Bt[n];
    cd[n] = gh * a[n];
  }
}

}  // namespace detail

/// Selective scan over S independent sequences:
///   h_t = exp(delta_t A) * h_{t-1} + delta_t B_t u_t,  h_0 = 0
///   y_t = <C_t, h_t> + D u_t
/// u, delta: [S x T x D] (or [T x D]); A: [D x N]; B, C: [S x T x N] (or [T x N]); D_skip: [D].
template <class S>
Tensor<S> selective_scan(const Tensor<S>& u, const Tensor<S>& delta, const Tensor<S>& A, const Tensor<S>& B,
                         const Tensor<S>& C, const Tensor<S>& D_skip) {
  if (u.rank() == 2) {
    auto lift = [](const Tensor<S>& t) { return reshape(t, {1, t.dim(0), t.dim(1)}); };
    Tensor<S> y = selective_scan(lift(u), lift(delta), A, lift(B), lift(C), D_skip);
    return reshape(y, u.shape());
  }
  detail::require_rank(u.shape(), 3, "selective_scan u");
  detail::require_same(u.shape(), delta.shape(), "selective_scan u/delta");
  detail::require_rank(A.shape(), 2, "selective_scan A");
  const std::size_t Sq = u.dim(0), T = u.dim(1), D = u.dim(2), N = A.dim(1);
  if (A.dim(0) != D || B.shape() != Shape{Sq, T, N} || C.shape() != Shape{Sq, T, N} || D_skip.rank() != 1 ||
      D_skip.dim(0) != D)
    throw DimensionError("selective_scan: inconsistent extents u " + shape_str(u.shape()) + ", A " +
                         shape_str(A.shape()) + ", B " + shape_str(B.shape()) + ", C " + shape_str(C.shape()) +
                         ", D " + shape_str(D_skip.shape()));
  const S* uv = u.data().data();
  const S* dv = delta.data().data();
  const S* av = A.data().data();
  const S* bv = B.data().data();
  const S* cv = C.data().data();
  const S* sv = D_skip.data().data();
  for (std::size_t i = 0; i < delta.numel(); ++i)
    if (!(dv[i] > S(0))) throw NumericDomainError("selective_scan: delta must be positive");

  Tensor<S> out = Tensor<S>::zeros(u.shape());
  S* yv = out.data().data();
  GradTape<S>* tape = detail::recording_tape<S>(u, delta, A, B, C, D_skip);
  std::vector<S> hs(T * D * N), as(T * D * N);
  for (std::size_t s = 0; s < Sq; ++s)
    detail::scan_sequence(s, T, D, N, uv, dv, av, bv, cv, sv, hs.data(), as.data(), yv);

  detail::attach(out, tape,
                 [un = u.node(), dn = delta.node(), an = A.node(), bn = B.node(), cn = C.node(), sn = D_skip.node(),
                  on = out.node(), Sq, T, D, N] {
                   if (on->grad.empty()) return;
                   std::vector<S> gu(un->value.size()), gdl(dn->value.size()), gA(an->value.size()),
                       gB(bn->value.size()), gC(cn->value.size()), gS(sn->value.size());
                   std::vector<S> carry(D * N), zeros(N, S(0)), tdl(N), tu(N);
                   // States are recomputed per sequence so they stay cache resident.
                   std::vector<S> hs(T * D * N), as(T * D * N), ys(Sq * T * D);
                   const S* gy = on->grad.data();
                   for (std::size_t s = 0; s < Sq; ++s) {
                     detail::scan_sequence(s, T, D, N, un->value.data(), dn->value.data(), an->value.data(),
                                           bn->value.data(), cn->value.data(), sn->value.data(), hs.data(), as.data(),
                                           ys.data());
                     std::fill(carry.begin(), carry.end(), S(0));
                     for (std::size_t tt = T; tt-- > 0;) {
                       const std::size_t st = s * T + tt;
                       const S* Bt = bn->value.data() + st * N;
                       const S* Ct = cn->value.data() + st * N;
                       S* gBt = gB.data() + st * N;
                       S* gCt = gC.data() + st * N;
                       for (std::size_t d = 0; d < D; ++d) {
                         const S g = gy[st * D + d];
                         const S uu = un->value[st * D + d], dl = dn->value[st * D + d];
                         gS[d] += g * uu;
                         const std::size_t base = (tt * D + d) * N;
                         const S* h = hs.data() + base;
                         const S* hp = tt > 0 ? hs.data() + base - D * N : zeros.data();
                         const S* a = as.data() + base;
                         const S* Ad = an->value.data() + d * N;
                         S* gAd = gA.data() + d * N;
                         S* cd = carry.data() + d * N;
                         detail::scan_state_adjoint(N, g, uu, dl, Ct, Bt, h, hp, a, Ad, cd, gCt, gAd, gBt, tdl.data(),
                                                    tu.data());
                         S gu_acc = sn->value[d] * g, gdl_acc = 0;
                         for (std::size_t n = 0; n < N; ++n) gdl_acc += tdl[n];
                         for (std::size_t n = 0; n < N; ++n) gu_acc += tu[n];
                         gu[st * D + d] += gu_acc;
                         gdl[st * D + d] += gdl_acc;
                       }
                     }
                   }
                   detail::accumulate(*un, gu);
                   detail::accumulate(*dn, gdl);
                   detail::accumulate(*an, gA);
                   detail::accumulate(*bn, gB);
                   detail::accumulate(*cn, gC);
                   detail::accumulate(*sn, gS);
                 });
  return out;
}

}  // namespace histm

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "histm/histm.hpp"

namespace histm::testing {

template <class S = double>
Tensor<S> random_tensor(RandomSource& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool grad = false) {
  std::vector<S> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
  return Tensor<S>(std::move(shape), std::move(v), grad);
}

template <class S>
std::vector<S> values(const Tensor<S>& t) {
  return {t.data().begin(), t.data().end()};
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Random Mamba parameters in a range that keeps the recurrence well inside
/// the domain of every primitive.
template <class S = double>
MambaParams<S> random_mamba(RandomSource& rng, const MambaConfig& c) {
  MambaParams<S> p = MambaParams<S>::init(c, rng);
  for (auto* t : p.tensors())
    for (auto& v : t->data()) v += static_cast<S>(rng.uniform(-0.1, 0.1));
  return p;
}

/// Independent sequential reference for the selective scan (one sequence).
inline std::vector<double> naive_scan(const std::vector<double>& u, const std::vector<double>& delta,
                                      const std::vector<double>& A, const std::vector<double>& B,
                                      const std::vector<double>& C, const std::vector<double>& Dk, std::size_t T,
                                      std::size_t D, std::size_t N) {
  std::vector<double> y(T * D);
  for (std::size_t d = 0; d < D; ++d) {
    std::vector<double> h(N, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      double out = Dk[d] * u[t * D + d];
      for (std::size_t n = 0; n < N; ++n) {
        const double abar = std::exp(delta[t * D + d] * A[d * N + n]);
        const double bbar = delta[t * D + d] * B[t * N + n];
        h[n] = abar * h[n] + bbar * u[t * D + d];
        out += C[t * N + n] * h[n];
      }
      y[t * D + d] = out;
    }
  }
  return y;
}

}  // namespace histm::testing

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "histm/tensor.hpp"

namespace histm {

/// Max over coordinates of |analytic - central difference| /
/// max(1, |analytic|, |numeric|), for a scalar function of `inputs`.
/// `f` must read the inputs' current values on every call.
template <class S>
S grad_check(const std::function<Tensor<S>()>& f, std::vector<Tensor<S>> inputs, S epsilon) {
  if (!(epsilon > S(0))) throw UsageError("grad_check: epsilon must be positive");
  std::vector<bool> restore_flag;
  for (auto& x : inputs) {
    restore_flag.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.zero_grad();
  }
  std::vector<std::vector<S>> analytic;
  {
    GradTape<S> tape;
    TapeScope<S> scope(tape);
    Tensor<S> y = f();
    if (y.numel() != 1) throw UsageError("grad_check: function is not scalar-valued, got " + shape_str(y.shape()));
    backward(y, tape);
  }
  for (auto& x : inputs)
    analytic.push_back(x.has_grad() ? std::vector<S>(x.grad().begin(), x.grad().end()) : std::vector<S>(x.numel()));

  NoGradScope<S> no_grad;
  S worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto xv = inputs[k].data();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const S saved = xv[i];
      xv[i] = saved + epsilon;
      const S fp = f().item();
      xv[i] = saved - epsilon;
      const S fm = f().item();
      xv[i] = saved;
      const S numeric = (fp - fm) / (S(2) * epsilon);
      const S a = analytic[k][i];
      const S denom = std::max({S(1), std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    inputs[k].zero_grad();
    inputs[k].set_requires_grad(restore_flag[k]);
  }
  return worst;
}

template <class S>
S grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, Tensor<S> x, S epsilon) {
  return grad_check<S>([&] { return f(x); }, std::vector<Tensor<S>>{x}, epsilon);
}

}  // namespace histm

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "histm/error.hpp"

namespace histm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until something flows into it
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

/// Dense row-major array with an optional gradient. Copies share storage
/// (handle semantics); use clone() for a deep copy.
template <class S>
class Tensor {
 public:
  using value_type = S;

  Tensor() : node_(std::make_shared<TensorNode<S>>()) { node_->value.assign(1, S(0)); }

  Tensor(Shape shape, std::vector<S> values, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<S>>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<S>(n, S(0)), requires_grad);
  }
  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<S>(n, v), requires_grad);
  }
  static Tensor scalar(S v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  const Shape& shape() const noexcept { return node_->shape; }
  std::size_t rank() const noexcept { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const noexcept { return node_->value.size(); }

  std::span<S> data() noexcept { return node_->value; }
  std::span<const S> data() const noexcept { return node_->value; }
  const std::vector<S>& values() const noexcept { return node_->value; }

  bool requires_grad() const noexcept { return node_->requires_grad; }
  void set_requires_grad(bool r) noexcept { node_->requires_grad = r; }
  bool has_grad() const noexcept { return !node_->grad.empty(); }
  std::span<const S> grad() const {
    if (node_->grad.empty()) throw UsageError("tensor has no gradient; run backward first");
    return node_->grad;
  }
  void zero_grad() noexcept { node_->grad.clear(); }

  S item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  S operator[](std::size_t i) const { return node_->value[i]; }

  Tensor clone() const {
    Tensor t(shape(), node_->value, requires_grad());
    return t;
  }
  /// Same values, no gradient history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  const std::shared_ptr<TensorNode<S>>& node() const noexcept { return node_; }
  bool same_storage(const Tensor& o) const noexcept { return node_ == o.node_; }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

template <class S>
bool all_finite(const Tensor<S>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](S v) { return std::isfinite(v); });
}

/// Ordered record of executed primitives. Entries are appended in execution
/// order, which is a topological order, so a single reverse sweep visits
/// every node once.
template <class S>
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  void record(std::function<void()> adjoint) {
    if (consumed_) throw UsageError("recording onto a consumed tape");
    entries_.push_back(std::move(adjoint));
  }
  std::size_t size() const noexcept { return entries_.size(); }
  bool consumed() const noexcept { return consumed_; }

  void replay() {
    if (consumed_) throw UsageError("backward on a consumed tape");
    consumed_ = true;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
    entries_.shrink_to_fit();
  }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

namespace detail {
template <class S>
GradTape<S>*& active_tape_slot() {
  static thread_local GradTape<S>* tape = nullptr;
  return tape;
}
}  // namespace detail

template <class S>
GradTape<S>* active_tape() {
  return detail::active_tape_slot<S>();
}

/// Makes `tape` the recording target on this thread for the scope lifetime.
template <class S>
class TapeScope {
 public:
  explicit TapeScope(GradTape<S>& tape) : prev_(detail::active_tape_slot<S>()) {
    detail::active_tape_slot<S>() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot<S>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<S>* prev_;
};

/// Suspends recording (inference) for the scope lifetime.
template <class S>
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::active_tape_slot<S>()) { detail::active_tape_slot<S>() = nullptr; }
  ~NoGradScope() { detail::active_tape_slot<S>() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape<S>* prev_;
};

/// Reverse sweep from a scalar output. Leaf gradients accumulate.
template <class S>
void backward(const Tensor<S>& output, GradTape<S>& tape) {
  if (tape.consumed()) throw UsageError("backward on a consumed tape");
  if (output.numel() != 1)
    throw UsageError("backward needs a scalar output, got " + shape_str(output.shape()));
  if (!output.requires_grad())
    throw UsageError("output was not produced through recorded operations");
  auto& n = *output.node();
  n.ensure_grad();
  n.grad[0] += S(1);
  tape.replay();
}

namespace detail {

/// Returns the tape to record on if any input needs a gradient.
template <class S, class... Ts>
GradTape<S>* recording_tape(const Ts&... inputs) {
  GradTape<S>* tape = active_tape<S>();
  if (!tape) return nullptr;
  const bool any = (inputs.requires_grad() || ...);
  return any ? tape : nullptr;
}

}  // namespace detail

}  // namespace histm

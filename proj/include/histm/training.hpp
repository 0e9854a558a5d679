#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "histm/data.hpp"
#include "histm/model.hpp"

namespace histm {

enum class Precision { kFloat32, kFloat64 };

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t max_epochs = 40;
  double lr = 1e-4;
  std::size_t early_stop_patience = 15;
  std::size_t plateau_patience = 7;
  double plateau_factor = 0.5;
  double improvement_threshold = 1e-8;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 7;
  Precision precision = Precision::kFloat32;
  bool shuffle = true;

  void validate() const {
    if (batch_size < 1 || max_epochs < 1 || early_stop_patience < 1 || plateau_patience < 1)
      throw ValidationError("batch_size, max_epochs and patiences must be >= 1");
    if (!(plateau_factor > 0 && plateau_factor < 1)) throw ValidationError("plateau_factor must lie in (0, 1)");
    if (!(lr >= 0)) throw ValidationError("lr must be >= 0");
    if (!(grad_clip >= 0)) throw ValidationError("grad_clip must be >= 0");
  }
};

/// Mean absolute error, subgradient 0 at ties.
template <class S>
Tensor<S> mae_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  if (pred.numel() == 0 || target.numel() == 0) throw ValidationError("mae_loss: empty batch");
  if (pred.shape() != target.shape())
    throw ValidationError("mae_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                          shape_str(target.shape()));
  return mean(abs(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// Adam

template <class S>
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<S>> m, v;
};

/// One bias-corrected Adam update over `params` using their accumulated grads.
template <class S>
void adam_step(const std::vector<Tensor<S>*>& params, AdamState<S>& state, double lr) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->numel(), S(0));
      state.v.emplace_back(p->numel(), S(0));
    }
  }
  if (state.m.size() != params.size()) throw UsageError("adam_step: parameter list changed between steps");
  for (std::size_t k = 0; k < params.size(); ++k)
    if (!params[k]->has_grad()) throw UsageError("adam_step: parameter " + std::to_string(k) + " has no gradient");
  ++state.step;
  const S b1 = static_cast<S>(state.beta1), b2 = static_cast<S>(state.beta2);
  const S c1 = static_cast<S>(1.0 - std::pow(state.beta1, static_cast<double>(state.step)));
  const S c2 = static_cast<S>(1.0 - std::pow(state.beta2, static_cast<double>(state.step)));
  const S eps = static_cast<S>(state.eps), lr_s = static_cast<S>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k]->data();
    auto g = params[k]->grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (S(1) - b1) * g[i];
      v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
      const S mhat = m[i] / c1, vhat = v[i] / c2;
      w[i] -= lr_s * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Schedules

/// Reduce-on-plateau: after `patience` consecutive epochs without strict
/// improvement (by more than `threshold`), lr *= factor and the count resets.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, std::size_t patience, double factor, double threshold = 1e-8)
      : lr_(lr), patience_(patience), factor_(factor), threshold_(threshold) {}

  /// Returns true when the learning rate was reduced.
  bool update(double val_loss) {
    if (val_loss < best_ - threshold_) {
      best_ = val_loss;
      bad_ = 0;
      return false;
    }
    if (++bad_ >= patience_) {
      lr_ *= factor_;
      bad_ = 0;
      return true;
    }
    return false;
  }
  double lr() const { return lr_; }
  std::size_t bad_epochs() const { return bad_; }

 private:
  double lr_;
  std::size_t patience_;
  double factor_, threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience, double threshold = 1e-8) : patience_(patience), threshold_(threshold) {}

  /// Returns true when training should stop after this epoch.
  bool update(double val_loss) {
    if (val_loss < best_ - threshold_) {
      best_ = val_loss;
      bad_ = 0;
      return false;
    }
    return ++bad_ >= patience_;
  }
  std::size_t bad_epochs() const { return bad_; }

 private:
  std::size_t patience_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mae = 0, val_mae = 0, lr = 0, seconds = 0;
};

using TrainHistory = std::vector<EpochRecord>;

/// `epoch,train_mae,val_mae,lr,seconds`
inline std::string format_history_csv(const TrainHistory& h) {
  std::string out = "epoch,train_mae,val_mae,lr,seconds\n";
  for (const auto& e : h)
    out += std::to_string(e.epoch) + "," + io::format_double(e.train_mae) + "," + io::format_double(e.val_mae) + "," +
           io::format_double(e.lr) + "," + io::format_double(std::round(e.seconds * 1000) / 1000) + "\n";
  return out;
}

struct TrainMeta {
  std::size_t epoch = 0;
  double best_val_loss = 0;
  std::uint64_t seed = 0;
};

/// Everything needed to reproduce predictions: weights are always stored
/// in 32-bit.
struct Checkpoint {
  HiSTMConfig config;
  ScalerParams scaler;
  HiSTMParams<float> params;
  TrainMeta meta;
};

struct TrainResult {
  Checkpoint best;
  TrainHistory history;
};

namespace detail {

template <class S>
Tensor<S> batch_inputs(const SampleSet& set, std::span<const std::size_t> ids) {
  const auto& sp = set.spec;
  std::vector<S> v(ids.size() * sp.window_size());
  for (std::size_t b = 0; b < ids.size(); ++b) {
    auto src = set.input(ids[b]);
    std::copy(src.begin(), src.end(), v.begin() + static_cast<std::ptrdiff_t>(b * sp.window_size()));
  }
  return Tensor<S>({ids.size(), sp.T, sp.K, sp.K}, std::move(v));
}

template <class S>
Tensor<S> batch_targets(const SampleSet& set, std::span<const std::size_t> ids) {
  std::vector<S> v(ids.size());
  for (std::size_t b = 0; b < ids.size(); ++b) v[b] = static_cast<S>(set.targets[ids[b]]);
  return Tensor<S>({ids.size()}, std::move(v));
}

template <class S>
void clip_grad_norm(const std::vector<Tensor<S>*>& params, double max_norm) {
  double sq = 0;
  for (auto* p : params)
    for (S g : p->grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const S f = static_cast<S>(max_norm / norm);
  for (auto* p : params) {
    auto& g = p->node()->grad;
    for (auto& x : g) x *= f;
  }
}

}  // namespace detail

/// Normalized predictions for every sample of `set`, inference only.
template <class S>
std::vector<double> predict_set(const HiSTMParams<S>& params, const SampleSet& set, std::size_t batch = 512) {
  NoGradScope<S> no_grad;
  std::vector<double> out(set.size());
  std::vector<std::size_t> ids;
  for (std::size_t start = 0; start < set.size(); start += batch) {
    ids.resize(std::min(batch, set.size() - start));
    std::iota(ids.begin(), ids.end(), start);
    Tensor<S> y = predict_batch(detail::batch_inputs<S>(set, ids), params);
    for (std::size_t b = 0; b < ids.size(); ++b) out[start + b] = static_cast<double>(y[b]);
  }
  return out;
}

/// MAE on the normalized scale over a whole set.
template <class S>
double normalized_mae(const HiSTMParams<S>& params, const SampleSet& set) {
  const auto pred = predict_set(params, set);
  double acc = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) acc += std::abs(pred[k] - static_cast<double>(set.targets[k]));
  return acc / static_cast<double>(pred.size());
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch MAE training with Adam, reduce-on-plateau and early stopping.
/// Returns the parameters of the epoch with the lowest validation MAE.
template <class S>
TrainResult train_loop(HiSTMParams<S> params, const SampleSet& train, const SampleSet& val, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.size() == 0) throw ValidationError("training set is empty");
  if (val.size() == 0) throw ValidationError("validation set is empty");
  const auto& mc = params.config;
  if (train.spec.T != mc.T || train.spec.K != mc.K || val.spec.T != mc.T || val.spec.K != mc.K)
    throw ValidationError("sample windows do not match the model's T/K");

  auto plist = params.tensors();
  AdamState<S> adam;
  PlateauScheduler sched(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.improvement_threshold);
  EarlyStopper stopper(cfg.early_stop_patience, cfg.improvement_threshold);

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const RandomSource shuffle_root = RandomSource(cfg.seed).fork(0x5348);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = sched.lr();
    if (cfg.shuffle) {
      RandomSource rng = shuffle_root.fork(epoch);
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    }
    double loss_sum = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const std::span<const std::size_t> ids(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      for (auto* p : plist) p->zero_grad();
      GradTape<S> tape;
      double loss_value = 0;
      {
        TapeScope<S> scope(tape);
        const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no);
        Tensor<S> loss;
        try {
          loss = mae_loss(predict_batch(detail::batch_inputs<S>(train, ids), params),
                          detail::batch_targets<S>(train, ids));
        } catch (const NumericDomainError& e) {
          throw DivergenceError(std::string("non-finite activation at ") + where + ": " + e.what());
        }
        loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value)) throw DivergenceError("non-finite loss at " + where);
        backward(loss, tape);
      }
      if (cfg.grad_clip > 0) detail::clip_grad_norm(plist, cfg.grad_clip);
      adam_step(plist, adam, lr);
      loss_sum += loss_value * static_cast<double>(ids.size());
    }
    for (auto* p : plist) p->zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mae = loss_sum / static_cast<double>(train.size());
    try {
      rec.val_mae = normalized_mae(params, val);
    } catch (const NumericDomainError& e) {
      throw DivergenceError("non-finite validation activation at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    rec.lr = lr;
    if (!std::isfinite(rec.val_mae))
      throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));

    if (rec.val_mae < best_val) {
      best_val = rec.val_mae;
      result.best.params = params.template cast<float>();
      result.best.meta = {epoch, rec.val_mae, cfg.seed};
    }
    sched.update(rec.val_mae);
    const bool stop = stopper.update(rec.val_mae);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stop) break;
  }
  result.best.config = mc;
  result.best.scaler = train.scaler;
  return result;
}

}  // namespace histm

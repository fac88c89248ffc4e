#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mkst/config.hpp"
#include "mkst/forecaster.hpp"

namespace mkst {

struct TrainConfig {
  double learning_rate = 5e-4;
  std::size_t batch_size = 8;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 5;
  double min_lr = 1e-6;
  std::size_t early_stop_patience = 15;
  bool early_stopping = true;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  std::optional<double> dropout;  // overrides the model config when set
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (!(learning_rate > 0)) p.push_back("learning_rate must be positive");
    if (batch_size == 0) p.push_back("batch_size must be >= 1");
    if (!(plateau_factor > 0 && plateau_factor < 1)) p.push_back("plateau_factor must lie in (0, 1)");
    if (plateau_patience == 0) p.push_back("plateau_patience must be >= 1");
    if (!(min_lr > 0)) p.push_back("min_lr must be positive");
    if (early_stop_patience == 0) p.push_back("early_stop_patience must be >= 1");
    if (max_epochs == 0) p.push_back("max_epochs must be >= 1");
    if (dropout && !(*dropout >= 0 && *dropout < 1)) p.push_back("dropout must lie in [0, 1)");
    return p;
  }

  static TrainConfig parse(KeyValueConfig& kv) {
    TrainConfig c;
    c.learning_rate = kv.optional<double>("learning_rate", c.learning_rate);
    c.batch_size = kv.optional<std::size_t>("batch_size", c.batch_size);
    c.plateau_factor = kv.optional<double>("plateau_factor", c.plateau_factor);
    c.plateau_patience = kv.optional<std::size_t>("plateau_patience", c.plateau_patience);
    c.min_lr = kv.optional<double>("min_lr", c.min_lr);
    c.early_stop_patience = kv.optional<std::size_t>("early_stop_patience", c.early_stop_patience);
    c.early_stopping = kv.optional<bool>("early_stopping", c.early_stopping);
    c.max_epochs = kv.optional<std::size_t>("max_epochs", c.max_epochs);
    c.seed = kv.optional<std::uint64_t>("seed", c.seed);
    if (kv.has("dropout")) c.dropout = kv.optional<double>("dropout", 0.1);
    for (auto& p : c.problems()) kv.error(p);
    return c;
  }
};

/// Mean over sites and steps of the squared error.
template <typename T>
T mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.size() != target.size())
    throw ShapeError("mse_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  if (!target.all_finite()) throw ValidationError("mse_loss: non-finite target");
  T s{0};
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<T>(pred.size());
}

template <typename T>
class Adam {
 public:
  Adam(const ParamList<T>& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params) {
      first_.emplace_back(p.var.shape());
      second_.emplace_back(p.var.shape());
    }
  }

  /// Applies one update from the accumulated grads, then clears them.
  void step(ParamList<T>& params, double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& var = params[i].var;
      if (!var.has_grad()) continue;
      auto& value = var.mutable_value();
      const auto& g = var.grad();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t k = 0; k < value.size(); ++k) {
        m[k] = static_cast<T>(beta1_ * m[k] + (1 - beta1_) * g[k]);
        v[k] = static_cast<T>(beta2_ * v[k] + (1 - beta2_) * g[k] * g[k]);
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        value[k] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
      var.zero_grad();
    }
  }

 private:
  double beta1_, beta2_, eps_;
  std::uint64_t steps_ = 0;
  std::vector<Tensor<T>> first_, second_;
};

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs pass without a strict improvement; never drops below `min_lr`.
class PlateauScheduler {
 public:
  PlateauScheduler(double factor, std::size_t patience, double min_lr)
      : factor_(factor), patience_(patience), min_lr_(min_lr) {}

  double step(double metric, double lr) {
    if (metric < best_) {
      best_ = metric;
      bad_ = 0;
      return lr;
    }
    if (++bad_ >= patience_) {
      bad_ = 0;
      return std::max(lr * factor_, min_lr_);
    }
    return lr;
  }

 private:
  double factor_;
  std::size_t patience_;
  double min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

/// Signals a stop `patience` epochs after the last strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  bool step(double metric) {
    if (metric < best_) {
      best_ = metric;
      bad_ = 0;
      return false;
    }
    return ++bad_ >= patience_;
  }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;
  double seconds = 0;
};

struct FitResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
};

template <typename T>
std::vector<Tensor<T>> snapshot(const ParamList<T>& params) {
  std::vector<Tensor<T>> out;
  for (const auto& p : params) out.push_back(p.var.value());
  return out;
}

template <typename T>
void restore(ParamList<T>& params, const std::vector<Tensor<T>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].var.mutable_value() = values[i];
}

/// Mean sample MSE in eval mode.
template <typename T>
double evaluate_loss(const Forecaster<T>& model, const std::vector<data::ForecastSample<T>>& samples) {
  if (samples.empty()) throw ValidationError("evaluate_loss: no samples");
  NoGradGuard guard;
  double total = 0;
  for (const auto& s : samples) total += static_cast<double>(mse_loss(model.forward(s, Mode::eval).prediction.value(), s.target));
  return total / static_cast<double>(samples.size());
}

/// Mini-batch Adam on the MSE loss with plateau LR decay and early stopping.
/// The model ends holding the parameters of the best validation epoch
/// (earliest on ties).
template <typename T>
FitResult fit(Forecaster<T>& model, const std::vector<data::ForecastSample<T>>& train,
              const std::vector<data::ForecastSample<T>>& validation, const TrainConfig& cfg,
              const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (auto p = cfg.problems(); !p.empty()) throw ValidationError("train config: " + p.front());
  if (train.empty()) throw ValidationError("fit: empty training set");
  if (validation.empty()) throw ValidationError("fit: empty validation set");
  for (const auto& s : train) {
    model.check_sample(s);
    if (!s.has_target()) throw ValidationError("fit: training sample without target");
  }
  for (const auto& s : validation) {
    model.check_sample(s);
    if (!s.has_target()) throw ValidationError("fit: validation sample without target");
  }

  if (cfg.dropout) model.set_dropout(*cfg.dropout);
  auto params = model.parameters();
  Adam<T> optimizer(params, cfg.beta1, cfg.beta2, cfg.adam_eps);
  PlateauScheduler plateau(cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
  EarlyStopping stopper(cfg.early_stop_patience);
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  FitResult result;
  std::vector<Tensor<T>> best = snapshot(params);
  double lr = cfg.learning_rate;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double train_total = 0;
    std::size_t batch_index = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size, ++batch_index) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      const T inv = T{1} / static_cast<T>(b1 - b0);
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& s = train[order[i]];
        auto out = model.forward(s, Mode::train, &dropout_rng);
        auto loss = mse(out.prediction, s.target);
        const double lv = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(lv))
          throw NumericalError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch_index));
        train_total += lv;
        backward(scale(loss, inv));
      }
      optimizer.step(params, lr);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_total / static_cast<double>(train.size());
    rec.val_loss = evaluate_loss(model, validation);
    if (!std::isfinite(rec.val_loss))
      throw NumericalError("training diverged: non-finite validation loss at epoch " + std::to_string(epoch));
    rec.lr = lr;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
      best = snapshot(params);
    }
    lr = plateau.step(rec.val_loss, lr);
    if (cfg.early_stopping && stopper.step(rec.val_loss)) {
      result.early_stopped = true;
      break;
    }
  }
  restore(params, best);
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst;  // "<param>[index]"
};

inline constexpr double kGradCheckFloor = 1e-6;

/// Compares analytic gradients of `loss` with central differences for a
/// random `fraction` of the scalars in `params` (at least `min_checked`).
/// Relative error is |a-n| / max(|a|, |n|, 1e-6).
template <typename T>
GradCheckReport gradient_check(const std::function<Var<T>()>& loss, ParamList<T>& params, double epsilon,
                               double fraction = 1.0, std::uint64_t seed = 0, std::size_t min_checked = 20) {
  if (!(epsilon > 0)) throw ValidationError("gradient_check: epsilon must be positive");
  for (auto& p : params) p.var.zero_grad();
  backward(loss());
  std::vector<Tensor<T>> analytic;
  for (auto& p : params) analytic.push_back(p.var.has_grad() ? p.var.grad() : Tensor<T>(p.var.shape()));

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < params[i].var.value().size(); ++k) coords.emplace_back(i, k);
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  const auto want = std::max<std::size_t>(min_checked, static_cast<std::size_t>(std::ceil(fraction * coords.size())));
  coords.resize(std::min(coords.size(), want));

  GradCheckReport report;
  NoGradGuard guard;
  for (auto [i, k] : coords) {
    T& x = params[i].var.mutable_value()[k];
    const T saved = x;
    x = saved + static_cast<T>(epsilon);
    const double up = static_cast<double>(loss().value()[0]);
    x = saved - static_cast<T>(epsilon);
    const double down = static_cast<double>(loss().value()[0]);
    x = saved;
    const double numeric = (up - down) / (2 * epsilon);
    const double a = static_cast<double>(analytic[i][k]);
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst = params[i].name + "[" + std::to_string(k) + "]";
    }
    ++report.checked;
  }
  for (auto& p : params) p.var.zero_grad();
  return report;
}

/// Gradient check of the forecaster's MSE loss on one sample (eval mode).
template <typename T>
GradCheckReport gradient_check(Forecaster<T>& model, const data::ForecastSample<T>& sample, double epsilon,
                               double fraction = 0.01, std::uint64_t seed = 0) {
  if (!sample.has_target()) throw ValidationError("gradient_check: sample needs a target");
  auto params = model.parameters();
  return gradient_check<T>([&] { return mse(model.forward(sample, Mode::eval).prediction, sample.target); }, params,
                           epsilon, fraction, seed);
}

}  // namespace mkst

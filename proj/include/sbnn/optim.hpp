#pragma once

// SGD with momentum (learning rate inside the momentum buffer), Adam with
// bias-corrected moments, the linear learning-rate decay and the
// stage-dependent weight-decay policy.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sbnn/tensor.hpp"

namespace sbnn {

enum class OptimizerKind : std::uint8_t { sgd = 0, adam = 1 };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 3e-4;
  double momentum = 0.9;  // SGD β
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // coupled L2: g += λθ
};

/// One SGD update on raw buffers: m = β·m + η·(g + λθ); θ -= m.
template <typename T>
void sgd_update(std::span<T> theta, std::span<const T> grad, std::span<T> momentum, T lr, T beta,
                T weight_decay) {
  if (theta.size() != grad.size() || theta.size() != momentum.size())
    throw DimensionError("sgd_update: buffer sizes differ");
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T g = grad[i] + weight_decay * theta[i];
    momentum[i] = beta * momentum[i] + lr * g;
    theta[i] -= momentum[i];
  }
}

/// One Adam update at step `t` (1-based), bias-corrected.
template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::int64_t t, T lr, T beta1, T beta2, T eps, T weight_decay) {
  if (theta.size() != grad.size() || theta.size() != m.size() || theta.size() != v.size())
    throw DimensionError("adam_update: buffer sizes differ");
  const T c1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1), static_cast<double>(t)));
  const T c2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2), static_cast<double>(t)));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T g = grad[i] + weight_decay * theta[i];
    m[i] = beta1 * m[i] + (T(1) - beta1) * g;
    v[i] = beta2 * v[i] + (T(1) - beta2) * g * g;
    const T mhat = m[i] / c1;
    const T vhat = v[i] / c2;
    theta[i] -= lr / (std::sqrt(vhat) + eps) * mhat;
  }
}

/// Optimizer over a fixed list of parameter tensors. Parameters without a
/// gradient buffer are treated as having zero gradient.
template <typename T>
class BasicOptimizer {
 public:
  BasicOptimizer(std::vector<BasicTensor<T>> params, OptimizerConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      first_.emplace_back(p.numel(), T(0));
      if (cfg_.kind == OptimizerKind::adam) second_.emplace_back(p.numel(), T(0));
    }
  }

  void step() {
    ++t_;
    std::vector<T> zero;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      std::span<const T> g = p.grad();
      if (!p.has_grad()) {
        zero.assign(p.numel(), T(0));
        g = zero;
      }
      if (cfg_.kind == OptimizerKind::sgd)
        sgd_update<T>(p.data(), g, first_[i], static_cast<T>(cfg_.lr), static_cast<T>(cfg_.momentum),
                      static_cast<T>(cfg_.weight_decay));
      else
        adam_update<T>(p.data(), g, first_[i], second_[i], t_, static_cast<T>(cfg_.lr),
                       static_cast<T>(cfg_.beta1), static_cast<T>(cfg_.beta2), static_cast<T>(cfg_.eps),
                       static_cast<T>(cfg_.weight_decay));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  const OptimizerConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

  /// SGD momentum / Adam first moment of parameter i.
  const std::vector<T>& first_moment(std::size_t i) const { return first_[i]; }
  /// Adam second moment of parameter i.
  const std::vector<T>& second_moment(std::size_t i) const { return second_[i]; }

 private:
  std::vector<BasicTensor<T>> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<T>> first_, second_;
  std::int64_t t_ = 0;
};

using Optimizer = BasicOptimizer<float>;

/// lr(e) = initial · (1 − e / total).
struct LrSchedule {
  double initial = 3e-4;
  int total_epochs = 200;

  double lr_at(int epoch) const {
    if (total_epochs <= 0) throw ConfigError("LrSchedule: total epochs must be positive");
    if (epoch < 0 || epoch > total_epochs)
      throw ConfigError("LrSchedule: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(total_epochs) + "]");
    return initial * (1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs));
  }
};

inline double lr_at(const LrSchedule& s, int epoch) { return s.lr_at(epoch); }

enum class Stage : std::uint8_t { pretrain_step1 = 0, pretrain_step2 = 1, linear_eval = 2, finetune = 3, exported = 4 };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::pretrain_step1: return "pretrain-step1";
    case Stage::pretrain_step2: return "pretrain-step2";
    case Stage::linear_eval: return "linear-eval";
    case Stage::finetune: return "finetune";
    case Stage::exported: return "export";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "pretrain-step1" || s == "step1") return Stage::pretrain_step1;
  if (s == "pretrain-step2" || s == "step2") return Stage::pretrain_step2;
  if (s == "linear-eval") return Stage::linear_eval;
  if (s == "finetune" || s == "fine-tune") return Stage::finetune;
  throw ConfigError("unknown stage '" + s + "'");
}

inline constexpr double kDefaultStep2WeightDecay = 1e-5;
inline constexpr double kFinetuneWeightDecay = 1e-4;

/// Weight decay for a training stage. The first progressive step trains
/// without decay; `configured` is the step-2 value.
inline double weight_decay_for_stage(Stage stage, double configured = kDefaultStep2WeightDecay) {
  switch (stage) {
    case Stage::pretrain_step1: return 0.0;
    case Stage::pretrain_step2: return configured;
    case Stage::linear_eval: return 0.0;
    case Stage::finetune: return kFinetuneWeightDecay;
    case Stage::exported: break;
  }
  throw ConfigError("no weight-decay policy for stage '" + std::string(to_string(stage)) + "'");
}

}  // namespace sbnn

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include <json.hpp>

#include "rgbdvit/autograd.hpp"
#include "rgbdvit/error.hpp"

namespace rgbdvit::nn {

enum class OptimizerKind { sgd_momentum, adamw };
enum class Schedule { constant, linear_decay };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 9e-5;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  Schedule schedule = Schedule::constant;
  // Length of the linear decay in optimizer steps.
  std::size_t total_steps = 0;

  static OptimizerConfig sgd(double lr, double momentum = 0.9) {
    OptimizerConfig c;
    c.kind = OptimizerKind::sgd_momentum;
    c.lr = lr;
    c.momentum = momentum;
    return c;
  }
  static OptimizerConfig adamw(double lr, double weight_decay, std::size_t decay_steps) {
    OptimizerConfig c;
    c.kind = OptimizerKind::adamw;
    c.lr = lr;
    c.weight_decay = weight_decay;
    c.schedule = decay_steps > 0 ? Schedule::linear_decay : Schedule::constant;
    c.total_steps = decay_steps;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", c.kind == OptimizerKind::adamw ? "adamw" : "sgd-momentum"},
       {"lr", c.lr},
       {"schedule", c.schedule == Schedule::linear_decay ? "linear-decay" : "constant"},
       {"weight_decay", c.weight_decay}};
  if (c.kind == OptimizerKind::adamw) {
    j["betas"] = {c.beta1, c.beta2};
    j["eps"] = c.eps;
  } else {
    j["momentum"] = c.momentum;
  }
  if (c.schedule == Schedule::linear_decay) j["decay_steps"] = c.total_steps;
}

template <class T>
struct OptimizerState {
  OptimizerConfig config;
  ParamMap<T> first;   // momentum buffer (SGD) or first moment (AdamW)
  ParamMap<T> second;  // AdamW second moment
  std::size_t step = 0;

  explicit OptimizerState(OptimizerConfig c = {}) : config(c) {}

  // Learning rate used by the update with zero-based index `at`.
  double lr_at(std::size_t at) const {
    if (config.schedule == Schedule::constant || config.total_steps == 0) return config.lr;
    double frac = static_cast<double>(at) / static_cast<double>(config.total_steps);
    return config.lr * std::max(0.0, 1.0 - frac);
  }
  double current_lr() const { return lr_at(step); }
};

template <class T>
void optimizer_step(ParamMap<T>& params, const ParamMap<T>& grads, OptimizerState<T>& st) {
  for (const auto& [path, g] : grads) {
    auto it = params.find(path);
    if (it == params.end()) throw InvalidArgument("gradient for unknown parameter '" + path + "'");
    if (it->second.shape != g.shape) throw InvalidArgument("gradient shape mismatch for '" + path + "'");
    if (!g.all_finite())
      throw TrainingError("non-finite gradient for '" + path + "' at step " + std::to_string(st.step));
  }
  const auto& c = st.config;
  const T lr = static_cast<T>(st.current_lr());
  ++st.step;
  for (const auto& [path, g] : grads) {
    auto& p = params.at(path).data;
    auto& m = st.first.try_emplace(path, Tensor<T>(g.shape)).first->second.data;
    if (c.kind == OptimizerKind::sgd_momentum) {
      const T mu = static_cast<T>(c.momentum), wd = static_cast<T>(c.weight_decay);
      for (std::size_t i = 0; i < p.size(); ++i) {
        T gi = g.data[i] + wd * p[i];
        m[i] = mu * m[i] + gi;
        p[i] -= lr * m[i];
      }
    } else {
      auto& v = st.second.try_emplace(path, Tensor<T>(g.shape)).first->second.data;
      const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
      const T eps = static_cast<T>(c.eps), wd = static_cast<T>(c.weight_decay);
      const T bc1 = T(1) - static_cast<T>(std::pow(c.beta1, static_cast<double>(st.step)));
      const T bc2 = T(1) - static_cast<T>(std::pow(c.beta2, static_cast<double>(st.step)));
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] -= lr * wd * p[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g.data[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g.data[i] * g.data[i];
        p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
      }
    }
  }
}

}  // namespace rgbdvit::nn

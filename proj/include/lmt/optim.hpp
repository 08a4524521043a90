#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "lmt/rng.hpp"
#include "lmt/tensor.hpp"

namespace lmt {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first/second moment accumulators plus the shared step count.
struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

inline OptimState make_optim_state(std::span<Tensor* const> params) {
  OptimState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Tensor* p : params) {
    s.m.emplace_back(p->numel(), 0.0);
    s.v.emplace_back(p->numel(), 0.0);
  }
  return s;
}

// One AdamW update. Weight decay is decoupled: w -= lr*wd*w is applied
// independently of the moment-based step. Returns false (and leaves the
// parameters untouched) when any gradient entry is non-finite.
inline bool adamw_step(std::span<Tensor* const> params,
                       std::span<const std::span<const double>> grads,
                       OptimState& state, const AdamWConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adamw_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i]->numel())
      throw std::invalid_argument("adamw_step: gradient size mismatch at " +
                                  std::to_string(i));
    for (double g : grads[i])
      if (!std::isfinite(g)) return false;
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->data;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] -= cfg.lr * cfg.weight_decay * w[j];
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  return true;
}

// One-cycle learning rate: cosine warmup from max_lr/25 to max_lr over the
// first 30% of steps, cosine anneal down to max_lr/1e4 over the rest.
inline double onecycle_lr(long step, long total_steps, double max_lr) {
  if (total_steps <= 0)
    throw std::invalid_argument("onecycle_lr: total_steps must be > 0");
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("onecycle_lr: step " + std::to_string(step) +
                                " outside [0, " + std::to_string(total_steps) +
                                "]");
  constexpr double kWarmupFrac = 0.3;
  constexpr double kDivFactor = 25.0;
  constexpr double kFinalDiv = 1e4;
  const double start_lr = max_lr / kDivFactor;
  const double final_lr = max_lr / kFinalDiv;
  const double p = static_cast<double>(step) / static_cast<double>(total_steps);
  if (p <= kWarmupFrac) {
    const double u = p / kWarmupFrac;
    return start_lr + (max_lr - start_lr) * 0.5 * (1.0 - std::cos(kPi * u));
  }
  const double u = (p - kWarmupFrac) / (1.0 - kWarmupFrac);
  return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + std::cos(kPi * u));
}

}  // namespace lmt

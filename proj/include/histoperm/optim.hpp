#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "histoperm/errors.hpp"
#include "histoperm/tensor.hpp"

namespace histoperm {

namespace detail {

template <class T>
void require_same_length(std::span<const T> a, std::span<const T> b, const char* op) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": parameter has " + std::to_string(a.size()) + " values, gradient " +
                         std::to_string(b.size()));
  }
}

template <class T>
double norm2(std::span<const T> v) {
  double s = 0.0;
  for (auto x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template <class T>
void ensure_buffers(std::vector<std::vector<T>>& buffers, std::span<const BasicTensor<T>> params) {
  if (buffers.empty()) {
    for (const auto& p : params) buffers.emplace_back(p.size(), T(0));
  }
  if (buffers.size() != params.size()) throw DimensionError("optimizer state does not match parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (buffers[i].size() != params[i].size()) throw DimensionError("optimizer buffer does not match parameter shape");
  }
}

template <class T>
std::span<const T> grad_or_empty(const BasicTensor<T>& p) {
  if (!p.has_grad()) throw ContractError("optimizer step on a parameter without a gradient");
  return p.grad();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// LARS

struct LarsConfig {
  double momentum = 0.9;
  double weight_decay = 1e-6;
  double trust_coefficient = 1e-3;
};

/// One LARS update of a single parameter.
///
///   g' = grad + wd * param
///   adapt:  trust = eta * |param| / |g'|  (1 if either norm is 0)
///   m <- momentum * m + trust * lr * g';  param <- param - m
///
/// Parameters with adapt == false (biases) take the same momentum update with
/// trust fixed to 1.
template <class T>
void lars_update(std::span<T> param, std::span<const T> grad, std::span<T> momentum_buf, bool adapt,
                 const LarsConfig& cfg, double lr) {
  detail::require_same_length<T>(param, grad, "lars_step");
  if (momentum_buf.size() != param.size()) throw DimensionError("lars_step: momentum buffer shape mismatch");
  std::vector<double> g(param.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(grad[i]) + cfg.weight_decay * param[i];
  double trust = 1.0;
  if (adapt) {
    const double wn = detail::norm2<T>(param);
    const double gn = detail::norm2<double>(g);
    if (wn > 0.0 && gn > 0.0) trust = cfg.trust_coefficient * wn / gn;
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    momentum_buf[i] = static_cast<T>(cfg.momentum * momentum_buf[i] + trust * lr * g[i]);
    param[i] -= momentum_buf[i];
  }
}

template <class T>
struct LarsState {
  std::vector<std::vector<T>> momentum;
};

/// Steps every parameter from its accumulated gradient. Parameters with one
/// dimension skip trust-ratio adaptation.
template <class T>
void lars_step(std::span<BasicTensor<T>> params, LarsState<T>& state, const LarsConfig& cfg, double lr) {
  detail::ensure_buffers<T>(state.momentum, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    lars_update<T>(p.mutable_values(), detail::grad_or_empty(p), state.momentum[i], p.ndim() > 1, cfg, lr);
  }
}

// ---------------------------------------------------------------------------
// SGD with Nesterov momentum

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// m <- mu * m + g;  param <- param - lr * (g + mu * m)
template <class T>
void sgd_nesterov_update(std::span<T> param, std::span<const T> grad, std::span<T> momentum_buf,
                         const SgdConfig& cfg, double lr) {
  detail::require_same_length<T>(param, grad, "sgd_nesterov_step");
  if (momentum_buf.size() != param.size()) throw DimensionError("sgd_nesterov_step: momentum buffer shape mismatch");
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]) + cfg.weight_decay * param[i];
    momentum_buf[i] = static_cast<T>(cfg.momentum * momentum_buf[i] + g);
    param[i] -= static_cast<T>(lr * (g + cfg.momentum * momentum_buf[i]));
  }
}

template <class T>
struct SgdState {
  std::vector<std::vector<T>> momentum;
};

template <class T>
void sgd_nesterov_step(std::span<BasicTensor<T>> params, SgdState<T>& state, const SgdConfig& cfg, double lr) {
  detail::ensure_buffers<T>(state.momentum, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    sgd_nesterov_update<T>(params[i].mutable_values(), detail::grad_or_empty(params[i]), state.momentum[i], cfg, lr);
  }
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 term added to the gradient
};

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::size_t step = 0;
};

template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::size_t step,
                 const AdamConfig& cfg, double lr) {
  detail::require_same_length<T>(param, grad, "adam_step");
  if (m.size() != param.size() || v.size() != param.size()) throw DimensionError("adam_step: moment buffer mismatch");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]) + cfg.weight_decay * param[i];
    m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g);
    v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g);
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    param[i] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
  }
}

template <class T>
void adam_step(std::span<BasicTensor<T>> params, AdamState<T>& state, const AdamConfig& cfg, double lr) {
  detail::ensure_buffers<T>(state.m, params);
  detail::ensure_buffers<T>(state.v, params);
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam_update<T>(params[i].mutable_values(), detail::grad_or_empty(params[i]), state.m[i], state.v[i], state.step,
                   cfg, lr);
  }
}

// ---------------------------------------------------------------------------
// Learning-rate schedules

enum class ScheduleKind { cosine_warmup, exp_decay, constant };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::cosine_warmup;
  double base_lr = 0.45;
  double warmup_epochs = 5.0;
  double total_epochs = 50.0;
  double decay_factor = 0.85;

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (warmup_epochs < 0.0 || warmup_epochs > total_epochs) {
      throw ConfigError("warmup epochs must lie in [0, total epochs]");
    }
  }
};

/// Linear warm-up from 0 then half-cosine to 0 at `total_epochs`;
/// exp_decay steps once per whole epoch.
inline double lr_at(const LrSchedule& s, double epoch) {
  switch (s.kind) {
    case ScheduleKind::constant:
      return s.base_lr;
    case ScheduleKind::exp_decay:
      return s.base_lr * std::pow(s.decay_factor, std::floor(std::max(0.0, epoch)));
    case ScheduleKind::cosine_warmup:
      break;
  }
  if (epoch < s.warmup_epochs) return s.base_lr * epoch / s.warmup_epochs;
  const double span = s.total_epochs - s.warmup_epochs;
  if (span <= 0.0) return s.base_lr;
  const double t = std::min(1.0, (epoch - s.warmup_epochs) / span);
  return 0.5 * s.base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace histoperm

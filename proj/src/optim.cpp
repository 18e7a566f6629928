#include "mmoe/optim.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>

namespace mmoe {

void OptimizerConfig::validate() const {
  if (!(beta1 > 0.0f && beta1 < beta2 && beta2 < 1.0f)) {
    throw ConfigError("optimizer: require 0 < beta1 < beta2 < 1, got beta1=" + std::to_string(beta1) +
                      " beta2=" + std::to_string(beta2));
  }
  if (!(eps > 0.0f)) throw ConfigError("optimizer: eps must be positive");
  if (!(lr_peak >= 0.0f)) throw ConfigError("optimizer: lr_peak must be non-negative");
  if (weight_decay < 0.0f) throw ConfigError("optimizer: weight_decay must be non-negative");
  if (warmup_steps < 0 || total_steps < 1 || warmup_steps > total_steps) {
    throw ConfigError("optimizer: require 0 <= warmup_steps <= total_steps, got " + std::to_string(warmup_steps) +
                      " and " + std::to_string(total_steps));
  }
}

float lr_at(const OptimizerConfig& cfg, std::int64_t step) {
  if (step <= 0) return 0.0f;
  if (step < cfg.warmup_steps) {
    return cfg.lr_peak * static_cast<float>(static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
  }
  if (step >= cfg.total_steps) return step == cfg.warmup_steps ? cfg.lr_peak : 0.0f;
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_peak * static_cast<float>(static_cast<double>(cfg.total_steps - step) / span);
}

template <typename T>
void adamw_step(std::span<ParameterT<T>* const> params, const OptimizerConfig& cfg, std::int64_t step) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const double lr = lr_at(cfg, step);
  const T b1 = cfg.beta1, b2 = cfg.beta2;
  for (ParameterT<T>* p : params) {
    if (!p->value.has_grad()) continue;
    p->step_count += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(p->step_count));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(p->step_count));
    const T keep = static_cast<T>(1.0 - (p->decay ? lr * cfg.weight_decay : 0.0));
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const auto n = static_cast<Eigen::Index>(p->value.numel());
    Eigen::Map<Arr> w(p->value.data().data(), n), m(p->adam_m.data(), n), v(p->adam_v.data(), n);
    Eigen::Map<const Arr> g(std::as_const(p->value).grad().data(), n);
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.square();
    w = w * keep - step_size * m / ((v * inv_bc2).sqrt() + static_cast<T>(cfg.eps));
  }
}

template <typename T>
double clip_grad_norm(std::span<ParameterT<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (const ParameterT<T>* p : params) {
    if (!p->value.has_grad()) continue;
    for (T g : p->value.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (ParameterT<T>* p : params) {
      if (!p->value.has_grad()) continue;
      for (T& g : p->value.grad()) g = static_cast<T>(g * s);
    }
  }
  return norm;
}

template void adamw_step<float>(std::span<ParameterT<float>* const>, const OptimizerConfig&, std::int64_t);
template void adamw_step<double>(std::span<ParameterT<double>* const>, const OptimizerConfig&, std::int64_t);
template double clip_grad_norm<float>(std::span<ParameterT<float>* const>, double);
template double clip_grad_norm<double>(std::span<ParameterT<double>* const>, double);

}  // namespace mmoe

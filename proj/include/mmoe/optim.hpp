#pragma once

#include <cstdint>
#include <span>

#include "mmoe/autograd.hpp"

namespace mmoe {

// AdamW with decoupled weight decay and a warmup-then-linear-decay schedule.
struct OptimizerConfig {
  float lr_peak = 2.6e-4f;
  std::int64_t warmup_steps = 2000;
  std::int64_t total_steps = 10000;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float eps = 1e-9f;
  float weight_decay = 0.1f;
  float grad_clip = 1.0f;  // global-norm clip; <= 0 disables

  void validate() const;
};

// Learning rate used for optimizer step `step` (1-based count of updates).
// Rises linearly to lr_peak at warmup_steps, then falls linearly to 0 at total_steps.
float lr_at(const OptimizerConfig& cfg, std::int64_t step);

// Applies one AdamW update to every parameter using its accumulated gradient.
template <typename T>
void adamw_step(std::span<ParameterT<T>* const> params, const OptimizerConfig& cfg, std::int64_t step);

// Scales all gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(std::span<ParameterT<T>* const> params, double max_norm);

}  // namespace mmoe

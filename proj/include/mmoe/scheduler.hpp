#pragma once

// Expert-count scheduling for every training strategy: fixed Top-k, Top-p,
// batch-level randomisation (global batch / micro-batch), layer-wise
// randomisation with uniform or capacity-aware weighted sampling, and the
// activation-budget cap.

#include <optional>
#include <string>
#include <vector>

#include "mmoe/rng.hpp"
#include "mmoe/tensor.hpp"

namespace mmoe {

enum class StrategyKind { fixed_topk, top_p, mmoe_global_batch, mmoe_micro_batch, mmoe_layer };
enum class GranularityEvent { optimizer_step, micro_batch, forward_pass };

std::string to_string(StrategyKind k);
StrategyKind parse_strategy_kind(const std::string& s);  // accepts "mmoe_layer" and "mmoe-layer"

struct StrategyConfig {
  StrategyKind kind = StrategyKind::fixed_topk;
  int k_fixed = 1;
  double p = 0.5;
  int k_min = 1;
  int k_max = 1;
  std::optional<double> tau;         // absent: uniform sampling
  std::optional<double> budget_avg;  // mean experts per layer cap (layer-wise only)

  bool randomized() const;
  int max_k() const;  // largest expert count the strategy can request (N for top_p)
  void validate(int num_experts) const;
};

struct KSchedule {
  std::vector<int> per_layer_k;
  std::optional<double> top_p;  // set for Top-p: per-token k decided at routing time
  Rng seed_state;               // generator state before this schedule was drawn

  bool is_top_p() const { return top_p.has_value(); }
  double mean_k() const;
};

// Event at which a strategy draws a fresh schedule.
GranularityEvent resample_event(StrategyKind kind);

int sample_uniform_k(int k_min, int k_max, Rng& rng);

// P(k) proportional to k^(1/tau) over [k_min, k_max].
int sample_weighted_k(int k_min, int k_max, double tau, Rng& rng);
std::vector<double> weighted_k_probabilities(int k_min, int k_max, double tau);

KSchedule schedule(const StrategyConfig& strategy, std::size_t num_layers, GranularityEvent event, Rng& rng);

// Caps sum(k) at B = round(budget_avg * L): proportional scale-down with
// floor and k_min clamp, then random unit redistribution until the sum is B.
KSchedule enforce_budget(const KSchedule& ks, double budget_avg, int k_min, int k_max, Rng& rng);

// Flat schedule of one k for every layer (inference).
KSchedule flat_schedule(std::size_t num_layers, int k);

}  // namespace mmoe

#include "mmoe/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmoe/tensor.hpp"

namespace mmoe {

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::fixed_topk: return "fixed_topk";
    case StrategyKind::top_p: return "top_p";
    case StrategyKind::mmoe_global_batch: return "mmoe_global_batch";
    case StrategyKind::mmoe_micro_batch: return "mmoe_micro_batch";
    case StrategyKind::mmoe_layer: return "mmoe_layer";
  }
  return "?";
}

StrategyKind parse_strategy_kind(const std::string& raw) {
  std::string s = raw;
  std::replace(s.begin(), s.end(), '-', '_');
  if (s == "fixed_topk" || s == "topk" || s == "top_k") return StrategyKind::fixed_topk;
  if (s == "top_p" || s == "topp") return StrategyKind::top_p;
  if (s == "mmoe_global_batch") return StrategyKind::mmoe_global_batch;
  if (s == "mmoe_micro_batch") return StrategyKind::mmoe_micro_batch;
  if (s == "mmoe_layer") return StrategyKind::mmoe_layer;
  throw ConfigError("unknown strategy '" + raw + "'");
}

bool StrategyConfig::randomized() const {
  return kind == StrategyKind::mmoe_global_batch || kind == StrategyKind::mmoe_micro_batch ||
         kind == StrategyKind::mmoe_layer;
}

int StrategyConfig::max_k() const {
  if (kind == StrategyKind::fixed_topk) return k_fixed;
  if (kind == StrategyKind::top_p) return -1;
  return k_max;
}

void StrategyConfig::validate(int num_experts) const {
  switch (kind) {
    case StrategyKind::fixed_topk:
      if (k_fixed < 1 || k_fixed > num_experts) {
        throw ConfigError("fixed_topk: k=" + std::to_string(k_fixed) + " outside [1, " + std::to_string(num_experts) + "]");
      }
      break;
    case StrategyKind::top_p:
      if (!(p > 0.0 && p <= 1.0)) throw ConfigError("top_p: p must lie in (0, 1]");
      break;
    default:
      if (!(1 <= k_min && k_min <= k_max && k_max <= num_experts)) {
        throw ConfigError("require 1 <= k_min <= k_max <= num_experts, got [" + std::to_string(k_min) + ", " +
                          std::to_string(k_max) + "] with " + std::to_string(num_experts) + " experts");
      }
  }
  if (tau && !(*tau > 0.0)) throw ConfigError("tau must be positive");
  if (budget_avg) {
    if (kind != StrategyKind::mmoe_layer) throw ConfigError("budget_avg applies only to the mmoe_layer strategy");
    if (*budget_avg < k_min || *budget_avg > k_max) throw ConfigError("budget_avg must lie in [k_min, k_max]");
  }
}

double KSchedule::mean_k() const {
  if (per_layer_k.empty()) return 0.0;
  return static_cast<double>(std::accumulate(per_layer_k.begin(), per_layer_k.end(), 0)) /
         static_cast<double>(per_layer_k.size());
}

GranularityEvent resample_event(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::mmoe_global_batch: return GranularityEvent::optimizer_step;
    case StrategyKind::mmoe_micro_batch: return GranularityEvent::micro_batch;
    default: return GranularityEvent::forward_pass;
  }
}

int sample_uniform_k(int k_min, int k_max, Rng& rng) {
  if (k_min > k_max) throw ConfigError("sample_uniform_k: k_min > k_max");
  return std::uniform_int_distribution<int>(k_min, k_max)(rng);
}

std::vector<double> weighted_k_probabilities(int k_min, int k_max, double tau) {
  if (k_min < 1 || k_min > k_max) throw ConfigError("weighted sampling needs 1 <= k_min <= k_max");
  if (!(tau > 0.0)) throw ConfigError("weighted sampling needs tau > 0");
  std::vector<double> w;
  for (int k = k_min; k <= k_max; ++k) w.push_back(std::exp(std::log(static_cast<double>(k)) / tau));
  const double z = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= z;
  return w;
}

int sample_weighted_k(int k_min, int k_max, double tau, Rng& rng) {
  const auto probs = weighted_k_probabilities(k_min, k_max, tau);
  std::discrete_distribution<int> dist(probs.begin(), probs.end());
  return k_min + dist(rng);
}

namespace {

int draw_k(const StrategyConfig& s, Rng& rng) {
  return s.tau ? sample_weighted_k(s.k_min, s.k_max, *s.tau, rng) : sample_uniform_k(s.k_min, s.k_max, rng);
}

}  // namespace

KSchedule schedule(const StrategyConfig& strategy, std::size_t num_layers, GranularityEvent event, Rng& rng) {
  KSchedule ks;
  ks.seed_state = rng;
  switch (strategy.kind) {
    case StrategyKind::fixed_topk:
      ks.per_layer_k.assign(num_layers, strategy.k_fixed);
      return ks;
    case StrategyKind::top_p:
      ks.top_p = strategy.p;
      return ks;
    default: break;
  }
  if (event != resample_event(strategy.kind)) {
    throw ConfigError("strategy " + to_string(strategy.kind) + " cannot be resampled at this granularity event");
  }
  if (strategy.kind == StrategyKind::mmoe_layer) {
    ks.per_layer_k.resize(num_layers);
    for (auto& k : ks.per_layer_k) k = draw_k(strategy, rng);
    if (strategy.budget_avg) return enforce_budget(ks, *strategy.budget_avg, strategy.k_min, strategy.k_max, rng);
    return ks;
  }
  ks.per_layer_k.assign(num_layers, draw_k(strategy, rng));
  return ks;
}

KSchedule enforce_budget(const KSchedule& ks, double budget_avg, int k_min, int k_max, Rng& rng) {
  const auto& orig = ks.per_layer_k;
  const long layers = static_cast<long>(orig.size());
  const long budget = std::lround(budget_avg * static_cast<double>(layers));
  if (budget < layers * k_min) {
    throw ConfigError("activation budget " + std::to_string(budget) + " is below num_layers * k_min = " +
                      std::to_string(layers * k_min));
  }
  const long total = std::accumulate(orig.begin(), orig.end(), 0L);
  if (total <= budget) return ks;

  KSchedule out = ks;
  auto& k = out.per_layer_k;
  for (std::size_t l = 0; l < k.size(); ++l) {
    const long scaled = static_cast<long>(orig[l]) * budget / total;  // floor
    k[l] = std::max(k_min, static_cast<int>(scaled));
  }
  long surplus = budget - std::accumulate(k.begin(), k.end(), 0L);

  // The k_min clamp can overshoot; shed units from layers above k_min.
  std::vector<std::size_t> eligible;
  while (surplus < 0) {
    eligible.clear();
    for (std::size_t l = 0; l < k.size(); ++l) {
      if (k[l] > k_min) eligible.push_back(l);
    }
    std::shuffle(eligible.begin(), eligible.end(), rng);
    for (auto l : eligible) {
      if (surplus == 0) break;
      --k[l];
      ++surplus;
    }
  }

  // Hand out the remaining slots, one per layer per pass, never above the
  // originally sampled count unless no such layer remains.
  bool relaxed = false;
  while (surplus > 0) {
    eligible.clear();
    for (std::size_t l = 0; l < k.size(); ++l) {
      const int cap = relaxed ? k_max : std::min(orig[l], k_max);
      if (k[l] < cap) eligible.push_back(l);
    }
    if (eligible.empty()) {
      if (relaxed) throw ConfigError("activation budget exceeds num_layers * k_max");
      relaxed = true;
      continue;
    }
    std::shuffle(eligible.begin(), eligible.end(), rng);
    for (auto l : eligible) {
      if (surplus == 0) break;
      ++k[l];
      --surplus;
    }
  }
  return out;
}

KSchedule flat_schedule(std::size_t num_layers, int k) {
  KSchedule ks;
  ks.per_layer_k.assign(num_layers, k);
  return ks;
}

}  // namespace mmoe

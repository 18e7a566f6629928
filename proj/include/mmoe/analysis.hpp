#pragma once

// Router diagnostics: focused Spearman ranking consistency between inference
// runs at two expert budgets, and mean off-diagonal similarity (MODS) of the
// expert gating vectors.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmoe/data.hpp"
#include "mmoe/model.hpp"

namespace mmoe {

// Raw (pre score-function) router logits for every (layer, token).
struct LogitTrace {
  std::size_t num_layers = 0;
  std::size_t num_tokens = 0;
  std::size_t num_experts = 0;
  std::vector<float> logits;  // [layer][token][expert]
  KSchedule schedule;

  std::span<const float> at(std::size_t layer, std::size_t token) const {
    return std::span<const float>(logits).subspan((layer * num_tokens + token) * num_experts, num_experts);
  }
};

LogitTrace capture_trace(Model& model, const SequenceBatch& inputs, const KSchedule& schedule,
                         std::size_t batch_sequences = 32);

// Spill format for large traces: checkpoint framing, "mmoe-trace" header with
// the dimensions and schedule, raw logits as the payload.
void save_trace(const LogitTrace& trace, const std::filesystem::path& path);
LogitTrace load_trace(const std::filesystem::path& path);

// Spearman rho using average ranks for ties. nullopt when undefined (fewer
// than two values or a constant input).
std::optional<double> spearman_rank(std::span<const double> a, std::span<const double> b);

// Spearman correlation of the two logit vectors restricted to the sorted union
// of the top-k_large experts of logits_large and the top-k_small experts of
// logits_small (ties broken by lower expert id).
std::optional<double> focused_spearman(std::span<const float> logits_large, std::span<const float> logits_small,
                                       int k_large, int k_small);

struct CorrelationHeatmap {
  int k_large = 0;
  std::vector<int> k_small;                       // column labels
  std::vector<std::vector<double>> mean;          // [layer][column], NaN when every token was undefined
  std::vector<std::vector<std::int64_t>> excluded;  // undefined tokens skipped per cell
  std::size_t tokens = 0;

  // Mean over layers of a column (ignoring NaN cells).
  double column_mean(std::size_t column) const;
};

// traces_small[i] was captured at k_small[i]; all traces cover the same inputs.
CorrelationHeatmap heatmap(const LogitTrace& trace_large, const std::vector<LogitTrace>& traces_small,
                           const std::vector<int>& k_small, int k_large);

// rows: layers; columns: k_small values; cells: mean correlation, 6 decimals.
std::string heatmap_csv(const CorrelationHeatmap& h);

// Mean |cosine| over distinct pairs of the rows of gate_weights [N x d].
// Throws ConfigError naming the expert when a row has zero norm.
double mods(const Tensor& gate_weights);

// Per-layer MODS of the router gating vectors (columns of Wg).
std::vector<double> mods_profile(const Model& model);

// layer,mods
std::string mods_csv(const std::vector<double>& profile);

}  // namespace mmoe

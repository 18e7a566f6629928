#pragma once

// Elastic inference: evaluation under arbitrary per-layer expert counts and
// sweeps over flat k values or layer-group activation patterns.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmoe/data.hpp"
#include "mmoe/model.hpp"

namespace mmoe {

// One k per sequential group of layers, e.g. 3-3-2-2.
struct ActivationPattern {
  std::vector<int> group_ks;

  std::size_t num_groups() const { return group_ks.size(); }
  std::string str() const;  // hyphen-joined
  static ActivationPattern parse(const std::string& text);
  static ActivationPattern flat(int k) { return ActivationPattern{{k}}; }
};

// Replicates each group's k over a contiguous span of layers; when the groups
// do not divide the layers evenly the earliest groups take one extra layer.
std::vector<int> expand_pattern(const ActivationPattern& pattern, std::size_t num_layers);

struct EvalReport {
  std::string pattern;
  std::vector<int> per_layer_k;
  double avg_k = 0.0;
  double loss = 0.0;
  double perplexity = 0.0;
  double accuracy = 0.0;  // argmax accuracy on answer positions (all positions if the task has none)
  std::int64_t tokens = 0;
};

// Held-out sequences drawn from the task's eval stream.
SequenceBatch make_eval_set(const SyntheticTask& task, std::uint64_t seed, std::size_t num_sequences, std::size_t seq_len);

// Deterministic Top-k inference with schedule[l] experts in layer l. Losses
// are summed in double and divided once, so partitioning into batches of
// batch_sequences does not change the result beyond rounding.
EvalReport evaluate(Model& model, std::span<const int> schedule, const SequenceBatch& eval,
                    std::size_t batch_sequences = 32, const std::string& label = "");

EvalReport evaluate_pattern(Model& model, const ActivationPattern& pattern, const SequenceBatch& eval,
                            std::size_t batch_sequences = 32);

std::vector<EvalReport> sweep(Model& model, const std::vector<ActivationPattern>& patterns, const SequenceBatch& eval,
                              std::size_t batch_sequences = 32);

// Patterns for "lo..hi" (one flat pattern per k).
std::vector<ActivationPattern> parse_sweep_range(const std::string& range);

// pattern,avg_k,loss,perplexity,accuracy,tokens with 6 decimal places and LF endings.
std::string eval_csv(const std::vector<EvalReport>& reports);

}  // namespace mmoe

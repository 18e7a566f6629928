#pragma once

#include <cstdint>
#include <vector>

#include "mmoe/data.hpp"
#include "mmoe/model.hpp"
#include "mmoe/optim.hpp"
#include "mmoe/scheduler.hpp"

namespace mmoe {

// Batch sizes are counted in sequences of seq_len positions.
struct TrainConfig {
  StrategyConfig strategy;
  OptimizerConfig optimizer;
  std::int64_t tokens_total = 1'000'000;
  std::size_t micro_batch_size = 8;
  std::size_t global_batch_size = 16;
  std::size_t seq_len = 32;
  std::uint64_t seed = 0;
  double balance_coeff = 0.01;

  void validate(const ModelConfig& model) const;
  std::size_t micro_batches_per_step() const { return global_batch_size / micro_batch_size; }
  std::int64_t tokens_per_step() const { return static_cast<std::int64_t>(global_batch_size * seq_len); }
  std::int64_t total_steps() const;
  // Copy whose optimizer schedule spans exactly total_steps().
  TrainConfig resolved() const;
};

struct TrainBatch {
  std::vector<SequenceBatch> micro_batches;
};

struct StepReport {
  std::int64_t step = 0;  // 1-based index of the optimizer update just applied
  double loss = 0.0;      // mean next-token cross-entropy over micro-batches
  double aux_loss = 0.0;
  std::vector<std::vector<int>> per_layer_k;  // schedule used by each micro-batch (empty for top_p)
  std::vector<double> layer_mean_k;           // measured experts per token, averaged over micro-batches
  double mean_k = 0.0;
  std::int64_t tokens = 0;
  float lr = 0.0f;
  double grad_norm = 0.0;
};

struct TrainerState {
  std::int64_t step = 0;
  std::int64_t tokens = 0;
  Rng scheduler_rng;
};

// One optimizer step: per micro-batch a schedule drawn at the strategy's
// granularity, forward/backward with gradient accumulation, then clipping and
// a single AdamW update. Throws NumericError naming the step on a non-finite loss.
StepReport train_step(Model& model, const TrainBatch& batch, const TrainConfig& cfg, TrainerState& state);

class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg, const SyntheticTask& task);

  TrainBatch next_batch();
  StepReport step();
  bool done() const { return state_.step >= cfg_.total_steps(); }

  const TrainConfig& config() const { return cfg_; }
  const TrainerState& state() const { return state_; }

 private:
  Model& model_;
  TrainConfig cfg_;
  SyntheticSource source_;
  TrainerState state_;
};

}  // namespace mmoe

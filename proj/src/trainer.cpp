#include "mmoe/trainer.hpp"

#include <cmath>
#include <string>

#include "mmoe/ops.hpp"

namespace mmoe {

void TrainConfig::validate(const ModelConfig& model) const {
  model.validate();
  strategy.validate(static_cast<int>(model.num_experts));
  optimizer.validate();
  if (micro_batch_size == 0 || global_batch_size == 0 || global_batch_size % micro_batch_size != 0) {
    throw ConfigError("train: global_batch_size " + std::to_string(global_batch_size) +
                      " must be a positive multiple of micro_batch_size " + std::to_string(micro_batch_size));
  }
  if (seq_len == 0 || seq_len > model.max_seq_len) {
    throw ConfigError("train: seq_len must lie in [1, max_seq_len=" + std::to_string(model.max_seq_len) + "]");
  }
  if (tokens_total < tokens_per_step()) {
    throw ConfigError("train: tokens_total is smaller than one global batch (" + std::to_string(tokens_per_step()) +
                      " tokens)");
  }
  if (balance_coeff < 0.0) throw ConfigError("train: balance_coeff must be non-negative");
}

std::int64_t TrainConfig::total_steps() const { return tokens_total / tokens_per_step(); }

TrainConfig TrainConfig::resolved() const {
  TrainConfig out = *this;
  out.optimizer.total_steps = std::max<std::int64_t>(1, total_steps());
  out.optimizer.warmup_steps = std::min(out.optimizer.warmup_steps, out.optimizer.total_steps);
  return out;
}

StepReport train_step(Model& model, const TrainBatch& batch, const TrainConfig& cfg, TrainerState& state) {
  const std::size_t num_micro = batch.micro_batches.size();
  if (num_micro == 0) throw ShapeError("train_step: empty batch");
  const std::size_t layers = model.config.num_layers;
  StepReport report;
  report.step = state.step + 1;
  report.layer_mean_k.assign(layers, 0.0);
  model.zero_grad();

  KSchedule step_schedule;
  const bool per_step = cfg.strategy.kind == StrategyKind::mmoe_global_batch;
  if (per_step) step_schedule = schedule(cfg.strategy, layers, GranularityEvent::optimizer_step, state.scheduler_rng);

  const float inv_micro = 1.0f / static_cast<float>(num_micro);
  for (const SequenceBatch& mb : batch.micro_batches) {
    KSchedule ks = per_step ? step_schedule
                            : schedule(cfg.strategy, layers, resample_event(cfg.strategy.kind), state.scheduler_rng);
    Tape<float> tape;
    ForwardOptions opts;
    opts.balance_coeff = cfg.balance_coeff;
    auto out = forward(model, tape, mb.inputs, mb.seq_len, ks, opts);
    Var<float> ce = cross_entropy(out.logits, std::span<const std::int32_t>(mb.targets));
    const double ce_value = ce.value().item();
    const double aux_value = out.aux_loss.value().item();
    if (!std::isfinite(ce_value) || !std::isfinite(aux_value)) {
      throw NumericError("non-finite loss at step " + std::to_string(report.step));
    }
    tape.backward(scale(add(ce, out.aux_loss), inv_micro));
    report.loss += ce_value / static_cast<double>(num_micro);
    report.aux_loss += aux_value / static_cast<double>(num_micro);
    for (std::size_t l = 0; l < layers; ++l) report.layer_mean_k[l] += out.layer_mean_k[l] / static_cast<double>(num_micro);
    report.per_layer_k.push_back(ks.per_layer_k);
    report.tokens += static_cast<std::int64_t>(mb.tokens());
  }
  for (double k : report.layer_mean_k) report.mean_k += k / static_cast<double>(layers);

  auto params = model.parameters();
  report.grad_norm = clip_grad_norm<float>(params, cfg.optimizer.grad_clip);
  if (!std::isfinite(report.grad_norm)) throw NumericError("non-finite gradient at step " + std::to_string(report.step));
  report.lr = lr_at(cfg.optimizer, report.step);
  adamw_step<float>(params, cfg.optimizer, report.step);
  state.step = report.step;
  state.tokens += report.tokens;
  return report;
}

Trainer::Trainer(Model& model, const TrainConfig& cfg, const SyntheticTask& task)
    : model_(model), cfg_(cfg.resolved()), source_(task, derive_rng(cfg.seed, task.train_stream)) {
  cfg_.validate(model.config);
  if (task.vocab_size() > static_cast<int>(model.config.vocab_size)) {
    throw ConfigError("task vocabulary (" + std::to_string(task.vocab_size()) + ") exceeds model vocab_size (" +
                      std::to_string(model.config.vocab_size) + ")");
  }
  state_.scheduler_rng = derive_rng(cfg.seed, "scheduler");
}

TrainBatch Trainer::next_batch() {
  TrainBatch b;
  for (std::size_t i = 0; i < cfg_.micro_batches_per_step(); ++i) {
    b.micro_batches.push_back(make_sequences(source_, cfg_.micro_batch_size, cfg_.seq_len));
  }
  return b;
}

StepReport Trainer::step() { return train_step(model_, next_batch(), cfg_, state_); }

}  // namespace mmoe

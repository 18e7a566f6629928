#include "mmoe/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <sstream>

namespace mmoe {

namespace {

void check_keys(const Json& j, const char* section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(section) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(std::string(section) + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read(const Json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

template <typename V>
void read_optional(const Json& j, const char* key, std::optional<V>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  V v{};
  read(j, key, v);
  out = v;
}

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

// Shortest decimal that round-trips the float, so 2.6e-4f prints as 0.00026.
Json float_json(float f) {
  char buf[32];
  for (int precision = 6; precision <= 9; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, static_cast<double>(f));
    if (std::strtof(buf, nullptr) == f) break;
  }
  return Json(std::strtod(buf, nullptr));
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate(model);
  task.validate();
  if (task.vocab_size() > static_cast<int>(model.vocab_size)) {
    throw ConfigError("task vocabulary (" + std::to_string(task.vocab_size()) + ") exceeds model.vocab_size (" +
                      std::to_string(model.vocab_size) + ")");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be non-negative");
  if (eval_sequences == 0) throw ConfigError("eval_sequences must be positive");
}

Json to_json(const ModelConfig& c) {
  return Json{{"vocab_size", c.vocab_size},   {"d_model", c.d_model},
              {"d_ff", c.d_ff},               {"num_layers", c.num_layers},
              {"num_heads", c.num_heads},     {"num_experts", c.num_experts},
              {"max_seq_len", c.max_seq_len}, {"score_fn", to_string(c.score_fn)},
              {"expert_kind", to_string(c.expert_kind)}};
}

Json to_json(const StrategyConfig& c) {
  return Json{{"kind", to_string(c.kind)}, {"k_fixed", c.k_fixed}, {"p", c.p},
              {"k_min", c.k_min},          {"k_max", c.k_max},     {"tau", optional_json(c.tau)},
              {"budget_avg", optional_json(c.budget_avg)}};
}

Json to_json(const OptimizerConfig& c) {
  return Json{{"lr_peak", float_json(c.lr_peak)},
              {"warmup_steps", c.warmup_steps},
              {"total_steps", c.total_steps},
              {"beta1", float_json(c.beta1)},
              {"beta2", float_json(c.beta2)},
              {"eps", float_json(c.eps)},
              {"weight_decay", float_json(c.weight_decay)},
              {"grad_clip", float_json(c.grad_clip)}};
}

Json to_json(const TrainConfig& c) {
  return Json{{"strategy", to_json(c.strategy)},
              {"optimizer", to_json(c.optimizer)},
              {"tokens_total", c.tokens_total},
              {"micro_batch_size", c.micro_batch_size},
              {"global_batch_size", c.global_batch_size},
              {"seq_len", c.seq_len},
              {"seed", c.seed},
              {"balance_coeff", c.balance_coeff}};
}

Json to_json(const SyntheticTask& c) {
  return Json{{"kind", to_string(c.kind)},   {"modulus", c.modulus},   {"ops", c.ops},
              {"copy_vocab", c.copy_vocab},  {"span_min", c.span_min}, {"span_max", c.span_max},
              {"path", c.path},              {"train_stream", c.train_stream}, {"eval_stream", c.eval_stream}};
}

Json to_json(const RunConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"train", to_json(c.train)},
              {"task", to_json(c.task)},
              {"output_dir", c.output_dir},
              {"checkpoint_interval", c.checkpoint_interval},
              {"eval_sequences", c.eval_sequences}};
}

ModelConfig model_config_from_json(const Json& j) {
  check_keys(j, "model",
             {"vocab_size", "d_model", "d_ff", "num_layers", "num_heads", "num_experts", "max_seq_len", "score_fn",
              "expert_kind"});
  ModelConfig c;
  read(j, "vocab_size", c.vocab_size);
  read(j, "d_model", c.d_model);
  read(j, "d_ff", c.d_ff);
  read(j, "num_layers", c.num_layers);
  read(j, "num_heads", c.num_heads);
  read(j, "num_experts", c.num_experts);
  read(j, "max_seq_len", c.max_seq_len);
  std::string s;
  if (j.contains("score_fn")) {
    read(j, "score_fn", s);
    c.score_fn = parse_score_fn(s);
  }
  if (j.contains("expert_kind")) {
    read(j, "expert_kind", s);
    c.expert_kind = parse_expert_kind(s);
  }
  return c;
}

StrategyConfig strategy_config_from_json(const Json& j) {
  check_keys(j, "strategy", {"kind", "k_fixed", "p", "k_min", "k_max", "tau", "budget_avg"});
  StrategyConfig c;
  if (j.contains("kind")) {
    std::string s;
    read(j, "kind", s);
    c.kind = parse_strategy_kind(s);
  }
  read(j, "k_fixed", c.k_fixed);
  read(j, "p", c.p);
  read(j, "k_min", c.k_min);
  read(j, "k_max", c.k_max);
  read_optional(j, "tau", c.tau);
  read_optional(j, "budget_avg", c.budget_avg);
  return c;
}

OptimizerConfig optimizer_config_from_json(const Json& j) {
  check_keys(j, "optimizer",
             {"lr_peak", "warmup_steps", "total_steps", "beta1", "beta2", "eps", "weight_decay", "grad_clip"});
  OptimizerConfig c;
  read(j, "lr_peak", c.lr_peak);
  read(j, "warmup_steps", c.warmup_steps);
  read(j, "total_steps", c.total_steps);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "eps", c.eps);
  read(j, "weight_decay", c.weight_decay);
  read(j, "grad_clip", c.grad_clip);
  return c;
}

TrainConfig train_config_from_json(const Json& j) {
  check_keys(j, "train",
             {"strategy", "optimizer", "tokens_total", "micro_batch_size", "global_batch_size", "seq_len", "seed",
              "balance_coeff"});
  TrainConfig c;
  if (j.contains("strategy")) c.strategy = strategy_config_from_json(j.at("strategy"));
  if (j.contains("optimizer")) c.optimizer = optimizer_config_from_json(j.at("optimizer"));
  read(j, "tokens_total", c.tokens_total);
  read(j, "micro_batch_size", c.micro_batch_size);
  read(j, "global_batch_size", c.global_batch_size);
  read(j, "seq_len", c.seq_len);
  read(j, "seed", c.seed);
  read(j, "balance_coeff", c.balance_coeff);
  return c;
}

SyntheticTask task_from_json(const Json& j) {
  check_keys(j, "task",
             {"kind", "modulus", "ops", "copy_vocab", "span_min", "span_max", "path", "train_stream", "eval_stream"});
  SyntheticTask c;
  if (j.contains("kind")) {
    std::string s;
    read(j, "kind", s);
    c.kind = parse_task_kind(s);
  }
  read(j, "modulus", c.modulus);
  read(j, "ops", c.ops);
  read(j, "copy_vocab", c.copy_vocab);
  read(j, "span_min", c.span_min);
  read(j, "span_max", c.span_max);
  read(j, "path", c.path);
  read(j, "train_stream", c.train_stream);
  read(j, "eval_stream", c.eval_stream);
  return c;
}

RunConfig run_config_from_json(const Json& j) {
  check_keys(j, "config", {"model", "train", "task", "output_dir", "checkpoint_interval", "eval_sequences"});
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("task")) c.task = task_from_json(j.at("task"));
  read(j, "output_dir", c.output_dir);
  read(j, "checkpoint_interval", c.checkpoint_interval);
  read(j, "eval_sequences", c.eval_sequences);
  return c;
}

void apply_override(Json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form path=value");
  }
  const std::string path(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  Json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError("override path '" + path + "' crosses a non-object");
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = Json::object();
  }
  (*node)[parts.back()] = value;
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
}

}  // namespace mmoe

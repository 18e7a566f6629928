#pragma once

// JSON (de)serialisation of every configuration type, plus the run-level
// config driving the CLI and its dotted-path overrides.

#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "mmoe/data.hpp"
#include "mmoe/model.hpp"
#include "mmoe/trainer.hpp"

namespace mmoe {

using Json = nlohmann::ordered_json;

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticTask task;
  std::string output_dir = "run";
  std::int64_t checkpoint_interval = 0;  // optimizer steps between checkpoints; 0 = final only
  std::size_t eval_sequences = 128;

  void validate() const;
};

Json to_json(const ModelConfig& c);
Json to_json(const StrategyConfig& c);
Json to_json(const OptimizerConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const SyntheticTask& c);
Json to_json(const RunConfig& c);

ModelConfig model_config_from_json(const Json& j);
StrategyConfig strategy_config_from_json(const Json& j);
OptimizerConfig optimizer_config_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);
SyntheticTask task_from_json(const Json& j);
RunConfig run_config_from_json(const Json& j);

// Applies "a.b.c=value". The value is parsed as JSON when possible, else taken as a string.
void apply_override(Json& j, std::string_view assignment);

Json read_json_file(const std::string& path);

}  // namespace mmoe

#pragma once

// Command implementations behind the `mmoe` executable. Each returns a process
// exit code: 0 success, 1 runtime failure, 2 invalid configuration or
// arguments, 3 non-finite loss during training.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mmoe::cli {

inline constexpr const char* kArtifactVersion = "0.1.0";

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

struct TrainArgs {
  std::string config_path;             // optional JSON config
  std::vector<std::string> overrides;  // dotted path=value, applied in order
  std::optional<std::string> output_dir;
  bool quiet = false;
};

struct EvalArgs {
  std::string checkpoint;
  std::optional<int> k;
  std::vector<std::string> patterns;
  std::optional<std::string> sweep;  // "lo..hi"
  std::string output_dir = ".";
  std::optional<std::string> task_config;  // JSON task section overriding the checkpoint's
  std::size_t sequences = 128;
  std::optional<std::size_t> seq_len;
  std::uint64_t seed = 0;
};

struct SpearmanArgs {
  std::string checkpoint;
  std::optional<int> k_large;
  std::size_t tokens = 8192;
  std::string output_dir = ".";
  bool save_traces = false;
  std::optional<std::string> task_config;
  std::optional<std::size_t> seq_len;
  std::uint64_t seed = 0;
};

struct ModsArgs {
  std::string checkpoint;
  std::string output_dir = ".";
};

struct GenDataArgs {
  std::string config_path;
  std::vector<std::string> overrides;  // applied to the task section
  std::size_t tokens = 100000;
  std::uint64_t seed = 0;
  std::string output_dir = ".";
};

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err);
int cmd_analyze_spearman(const SpearmanArgs& args, std::ostream& out, std::ostream& err);
int cmd_analyze_mods(const ModsArgs& args, std::ostream& out, std::ostream& err);
int cmd_gen_data(const GenDataArgs& args, std::ostream& out, std::ostream& err);

// Parses argv and dispatches to one of the commands above.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mmoe::cli

#pragma once

// Synthetic token corpora standing in for a pretraining mixture.

#include <cstdint>
#include <string>
#include <vector>

#include "mmoe/rng.hpp"

namespace mmoe {

enum class TaskKind { char_lm_from_file, modular_arithmetic, token_copy };

std::string to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

struct SyntheticTask {
  TaskKind kind = TaskKind::modular_arithmetic;
  // modular_arithmetic: "a op b = c ;" with c = (a op b) mod modulus
  int modulus = 7;
  std::string ops = "+-*";
  // token_copy: "span | span |" with span length in [span_min, span_max]
  int copy_vocab = 8;
  int span_min = 2;
  int span_max = 8;
  // char_lm_from_file: byte-level stream over the file contents
  std::string path;
  // Sub-stream names; train and eval draw from distinct seeds.
  std::string train_stream = "data";
  std::string eval_stream = "eval";

  void validate() const;
  int vocab_size() const;
  std::string token_name(int id) const;
};

// Tokens plus a per-token flag marking answer positions (the tokens scored by
// task accuracy: equation results, the repeated copy span).
struct TokenStream {
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> answer;

  std::size_t size() const { return tokens.size(); }
};

// Stateful generator emitting whole units (equations, copy spans, file chunks).
class SyntheticSource {
 public:
  SyntheticSource(SyntheticTask task, Rng rng);

  // Appends exactly n tokens to out.
  void take(std::size_t n, TokenStream& out);
  const Rng& rng() const { return rng_; }

 private:
  void refill();

  SyntheticTask task_;
  Rng rng_;
  TokenStream pending_;
  std::size_t cursor_ = 0;
  std::vector<std::uint8_t> file_;
};

TokenStream generate_synthetic(const SyntheticTask& task, std::size_t num_tokens, Rng& rng);

// Evaluates "a op b" for one of the supported operator characters.
int apply_mod_op(char op, int a, int b, int modulus);

// Windows of seq_len + 1 consecutive tokens cut into inputs and next-token targets.
struct SequenceBatch {
  std::size_t num_sequences = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> target_is_answer;

  std::size_t tokens() const { return inputs.size(); }
  SequenceBatch slice(std::size_t first_sequence, std::size_t count) const;
};

SequenceBatch make_sequences(SyntheticSource& source, std::size_t num_sequences, std::size_t seq_len);

}  // namespace mmoe

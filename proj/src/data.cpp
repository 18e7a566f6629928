#include "mmoe/data.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include "mmoe/tensor.hpp"

namespace mmoe {

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::char_lm_from_file: return "char_lm_from_file";
    case TaskKind::modular_arithmetic: return "modular_arithmetic";
    case TaskKind::token_copy: return "token_copy";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& raw) {
  std::string s = raw;
  std::replace(s.begin(), s.end(), '-', '_');
  if (s == "char_lm_from_file" || s == "char_lm") return TaskKind::char_lm_from_file;
  if (s == "modular_arithmetic") return TaskKind::modular_arithmetic;
  if (s == "token_copy") return TaskKind::token_copy;
  throw ConfigError("unknown task '" + raw + "'");
}

void SyntheticTask::validate() const {
  switch (kind) {
    case TaskKind::modular_arithmetic:
      if (modulus < 2) throw ConfigError("modular_arithmetic: modulus must be at least 2");
      if (ops.empty()) throw ConfigError("modular_arithmetic: need at least one operator");
      for (char c : ops) {
        if (c != '+' && c != '-' && c != '*') throw ConfigError(std::string("modular_arithmetic: unsupported operator ") + c);
      }
      break;
    case TaskKind::token_copy:
      if (copy_vocab < 1) throw ConfigError("token_copy: copy_vocab must be positive");
      if (span_min < 1 || span_min > span_max) throw ConfigError("token_copy: need 1 <= span_min <= span_max");
      break;
    case TaskKind::char_lm_from_file:
      if (path.empty()) throw ConfigError("char_lm_from_file: path is required");
      break;
  }
  if (train_stream == eval_stream) throw ConfigError("task: train and eval streams must differ");
}

int SyntheticTask::vocab_size() const {
  switch (kind) {
    case TaskKind::modular_arithmetic: return modulus + static_cast<int>(ops.size()) + 2;
    case TaskKind::token_copy: return copy_vocab + 2;
    case TaskKind::char_lm_from_file: return 256;
  }
  return 0;
}

std::string SyntheticTask::token_name(int id) const {
  if (kind == TaskKind::modular_arithmetic) {
    if (id < modulus) return std::to_string(id);
    const int o = id - modulus;
    if (o < static_cast<int>(ops.size())) return std::string(1, ops[static_cast<std::size_t>(o)]);
    return o == static_cast<int>(ops.size()) ? "=" : ";";
  }
  if (kind == TaskKind::token_copy) return id < copy_vocab ? "t" + std::to_string(id) : id == copy_vocab ? "|" : ";";
  return std::string(1, static_cast<char>(id));
}

int apply_mod_op(char op, int a, int b, int modulus) {
  switch (op) {
    case '+': return (a + b) % modulus;
    case '-': return ((a - b) % modulus + modulus) % modulus;
    case '*': return (a * b) % modulus;
  }
  throw ConfigError(std::string("unsupported operator ") + op);
}

SyntheticSource::SyntheticSource(SyntheticTask task, Rng rng) : task_(std::move(task)), rng_(std::move(rng)) {
  task_.validate();
  if (task_.kind == TaskKind::char_lm_from_file) {
    std::ifstream in(task_.path, std::ios::binary);
    if (!in) throw ConfigError("char_lm_from_file: cannot open " + task_.path);
    file_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (file_.empty()) throw ConfigError("char_lm_from_file: " + task_.path + " is empty");
  }
}

void SyntheticSource::refill() {
  pending_.tokens.clear();
  pending_.answer.clear();
  cursor_ = 0;
  auto push = [&](int tok, bool ans) {
    pending_.tokens.push_back(tok);
    pending_.answer.push_back(ans ? 1 : 0);
  };
  switch (task_.kind) {
    case TaskKind::modular_arithmetic: {
      const int m = task_.modulus;
      std::uniform_int_distribution<int> operand(0, m - 1);
      std::uniform_int_distribution<std::size_t> op_pick(0, task_.ops.size() - 1);
      const int a = operand(rng_);
      const std::size_t oi = op_pick(rng_);
      const int b = operand(rng_);
      const int c = apply_mod_op(task_.ops[oi], a, b, m);
      const int n_ops = static_cast<int>(task_.ops.size());
      push(a, false);
      push(m + static_cast<int>(oi), false);
      push(b, false);
      push(m + n_ops, false);  // =
      push(c, true);
      push(m + n_ops + 1, false);  // ;
      break;
    }
    case TaskKind::token_copy: {
      std::uniform_int_distribution<int> len(task_.span_min, task_.span_max);
      std::uniform_int_distribution<int> tok(0, task_.copy_vocab - 1);
      std::vector<int> span(static_cast<std::size_t>(len(rng_)));
      for (int& t : span) t = tok(rng_);
      for (int t : span) push(t, false);
      push(task_.copy_vocab, false);
      for (int t : span) push(t, true);
      push(task_.copy_vocab + 1, true);
      break;
    }
    case TaskKind::char_lm_from_file: {
      constexpr std::size_t kChunk = 256;
      std::uniform_int_distribution<std::size_t> start(0, file_.size() - 1);
      std::size_t pos = start(rng_);
      for (std::size_t i = 0; i < kChunk; ++i) push(file_[(pos + i) % file_.size()], true);
      break;
    }
  }
}

void SyntheticSource::take(std::size_t n, TokenStream& out) {
  while (n > 0) {
    if (cursor_ >= pending_.tokens.size()) refill();
    const std::size_t avail = std::min(n, pending_.tokens.size() - cursor_);
    out.tokens.insert(out.tokens.end(), pending_.tokens.begin() + static_cast<std::ptrdiff_t>(cursor_),
                      pending_.tokens.begin() + static_cast<std::ptrdiff_t>(cursor_ + avail));
    out.answer.insert(out.answer.end(), pending_.answer.begin() + static_cast<std::ptrdiff_t>(cursor_),
                      pending_.answer.begin() + static_cast<std::ptrdiff_t>(cursor_ + avail));
    cursor_ += avail;
    n -= avail;
  }
}

TokenStream generate_synthetic(const SyntheticTask& task, std::size_t num_tokens, Rng& rng) {
  SyntheticSource src(task, rng);
  TokenStream out;
  out.tokens.reserve(num_tokens);
  out.answer.reserve(num_tokens);
  src.take(num_tokens, out);
  rng = src.rng();
  return out;
}

SequenceBatch SequenceBatch::slice(std::size_t first, std::size_t count) const {
  if (first + count > num_sequences) throw IndexError("SequenceBatch::slice out of range");
  SequenceBatch out;
  out.num_sequences = count;
  out.seq_len = seq_len;
  const auto b = static_cast<std::ptrdiff_t>(first * seq_len), e = static_cast<std::ptrdiff_t>((first + count) * seq_len);
  out.inputs.assign(inputs.begin() + b, inputs.begin() + e);
  out.targets.assign(targets.begin() + b, targets.begin() + e);
  out.target_is_answer.assign(target_is_answer.begin() + b, target_is_answer.begin() + e);
  return out;
}

SequenceBatch make_sequences(SyntheticSource& source, std::size_t num_sequences, std::size_t seq_len) {
  SequenceBatch batch;
  batch.num_sequences = num_sequences;
  batch.seq_len = seq_len;
  batch.inputs.reserve(num_sequences * seq_len);
  batch.targets.reserve(num_sequences * seq_len);
  batch.target_is_answer.reserve(num_sequences * seq_len);
  TokenStream window;
  for (std::size_t s = 0; s < num_sequences; ++s) {
    window.tokens.clear();
    window.answer.clear();
    source.take(seq_len + 1, window);
    batch.inputs.insert(batch.inputs.end(), window.tokens.begin(), window.tokens.end() - 1);
    batch.targets.insert(batch.targets.end(), window.tokens.begin() + 1, window.tokens.end());
    batch.target_is_answer.insert(batch.target_is_answer.end(), window.answer.begin() + 1, window.answer.end());
  }
  return batch;
}

}  // namespace mmoe

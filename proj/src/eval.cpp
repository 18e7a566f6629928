#include "mmoe/eval.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "mmoe/ops.hpp"

namespace mmoe {

std::string ActivationPattern::str() const {
  std::string s;
  for (std::size_t i = 0; i < group_ks.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(group_ks[i]);
  }
  return s;
}

ActivationPattern ActivationPattern::parse(const std::string& text) {
  ActivationPattern p;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '-')) {
    std::size_t used = 0;
    int k = 0;
    try {
      k = std::stoi(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (part.empty() || used != part.size()) throw ConfigError("invalid activation pattern '" + text + "'");
    p.group_ks.push_back(k);
  }
  if (p.group_ks.empty()) throw ConfigError("empty activation pattern");
  return p;
}

std::vector<int> expand_pattern(const ActivationPattern& pattern, std::size_t num_layers) {
  const std::size_t groups = pattern.num_groups();
  if (groups == 0 || groups > num_layers) {
    throw ConfigError("pattern " + pattern.str() + " has " + std::to_string(groups) + " groups for " +
                      std::to_string(num_layers) + " layers");
  }
  const std::size_t base = num_layers / groups, extra = num_layers % groups;
  std::vector<int> out;
  out.reserve(num_layers);
  for (std::size_t g = 0; g < groups; ++g) {
    if (pattern.group_ks[g] < 1) throw ConfigError("pattern " + pattern.str() + " has a group with k < 1");
    out.insert(out.end(), base + (g < extra ? 1 : 0), pattern.group_ks[g]);
  }
  return out;
}

SequenceBatch make_eval_set(const SyntheticTask& task, std::uint64_t seed, std::size_t num_sequences, std::size_t seq_len) {
  SyntheticSource source(task, derive_rng(seed, task.eval_stream));
  return make_sequences(source, num_sequences, seq_len);
}

EvalReport evaluate(Model& model, std::span<const int> schedule, const SequenceBatch& eval, std::size_t batch_sequences,
                    const std::string& label) {
  const std::size_t layers = model.config.num_layers;
  if (schedule.size() != layers) {
    throw ShapeError("evaluate: schedule has " + std::to_string(schedule.size()) + " entries for " +
                     std::to_string(layers) + " layers");
  }
  for (int k : schedule) {
    if (k < 1 || static_cast<std::size_t>(k) > model.config.num_experts) {
      throw ConfigError("evaluate: k=" + std::to_string(k) + " outside [1, " + std::to_string(model.config.num_experts) +
                        "]");
    }
  }
  if (batch_sequences == 0) throw ConfigError("evaluate: batch size must be positive");
  KSchedule ks;
  ks.per_layer_k.assign(schedule.begin(), schedule.end());

  bool has_answers = false;
  for (auto a : eval.target_is_answer) has_answers = has_answers || a;
  double loss_sum = 0.0;
  std::int64_t correct = 0, scored = 0;
  const std::size_t vocab = model.config.vocab_size;
  for (std::size_t first = 0; first < eval.num_sequences; first += batch_sequences) {
    const SequenceBatch mb = eval.slice(first, std::min(batch_sequences, eval.num_sequences - first));
    Tape<float> tape(false);
    auto out = forward(model, tape, mb.inputs, mb.seq_len, ks);
    const Tensor& logits = out.logits.value();
    for (std::size_t t = 0; t < mb.tokens(); ++t) {
      const auto row = logits.row(t);
      double mx = -INFINITY;
      std::size_t arg = 0;
      for (std::size_t j = 0; j < vocab; ++j) {
        if (row[j] > mx) {
          mx = row[j];
          arg = j;
        }
      }
      double z = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      loss_sum += mx + std::log(z) - static_cast<double>(row[static_cast<std::size_t>(mb.targets[t])]);
      if (!has_answers || mb.target_is_answer[t]) {
        ++scored;
        if (static_cast<std::int32_t>(arg) == mb.targets[t]) ++correct;
      }
    }
  }
  EvalReport r;
  r.pattern = label.empty() ? ActivationPattern{ks.per_layer_k}.str() : label;
  r.per_layer_k = ks.per_layer_k;
  r.avg_k = ks.mean_k();
  r.tokens = static_cast<std::int64_t>(eval.tokens());
  r.loss = r.tokens ? loss_sum / static_cast<double>(r.tokens) : 0.0;
  r.perplexity = std::exp(r.loss);
  r.accuracy = scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
  return r;
}

EvalReport evaluate_pattern(Model& model, const ActivationPattern& pattern, const SequenceBatch& eval,
                            std::size_t batch_sequences) {
  const auto schedule = expand_pattern(pattern, model.config.num_layers);
  return evaluate(model, schedule, eval, batch_sequences, pattern.str());
}

std::vector<EvalReport> sweep(Model& model, const std::vector<ActivationPattern>& patterns, const SequenceBatch& eval,
                              std::size_t batch_sequences) {
  std::vector<EvalReport> out;
  for (const auto& p : patterns) out.push_back(evaluate_pattern(model, p, eval, batch_sequences));
  return out;
}

std::vector<ActivationPattern> parse_sweep_range(const std::string& range) {
  const auto dots = range.find("..");
  int lo = 0, hi = 0;
  try {
    if (dots == std::string::npos) throw ConfigError("");
    lo = std::stoi(range.substr(0, dots));
    hi = std::stoi(range.substr(dots + 2));
  } catch (const std::exception&) {
    throw ConfigError("invalid sweep range '" + range + "' (expected lo..hi)");
  }
  if (lo < 1 || hi < lo) throw ConfigError("invalid sweep range '" + range + "'");
  std::vector<ActivationPattern> out;
  for (int k = lo; k <= hi; ++k) out.push_back(ActivationPattern::flat(k));
  return out;
}

std::string eval_csv(const std::vector<EvalReport>& reports) {
  std::string s = "pattern,avg_k,loss,perplexity,accuracy,tokens\n";
  char buf[256];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%lld\n", r.pattern.c_str(), r.avg_k, r.loss, r.perplexity,
                  r.accuracy, static_cast<long long>(r.tokens));
    s += buf;
  }
  return s;
}

}  // namespace mmoe

#include "mmoe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "mmoe/checkpoint.hpp"
#include "mmoe/ops.hpp"

namespace mmoe {

LogitTrace capture_trace(Model& model, const SequenceBatch& inputs, const KSchedule& schedule,
                         std::size_t batch_sequences) {
  LogitTrace trace;
  trace.num_layers = model.config.num_layers;
  trace.num_experts = model.config.num_experts;
  trace.num_tokens = inputs.tokens();
  trace.schedule = schedule;
  trace.logits.resize(trace.num_layers * trace.num_tokens * trace.num_experts);
  ForwardOptions opts;
  opts.capture_router_logits = true;
  std::size_t token0 = 0;
  for (std::size_t first = 0; first < inputs.num_sequences; first += batch_sequences) {
    const SequenceBatch mb = inputs.slice(first, std::min(batch_sequences, inputs.num_sequences - first));
    Tape<float> tape(false);
    auto out = forward(model, tape, mb.inputs, mb.seq_len, schedule, opts);
    for (std::size_t l = 0; l < trace.num_layers; ++l) {
      const auto src = out.router_logits[l].data();
      std::copy(src.begin(), src.end(),
                trace.logits.begin() + static_cast<std::ptrdiff_t>((l * trace.num_tokens + token0) * trace.num_experts));
    }
    token0 += mb.tokens();
  }
  return trace;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::vector<std::uint32_t> top_indices(std::span<const float> logits, int k) {
  std::vector<std::uint32_t> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0u);
  const auto kk = static_cast<std::ptrdiff_t>(k);
  std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&](std::uint32_t a, std::uint32_t b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

}  // namespace

void save_trace(const LogitTrace& trace, const std::filesystem::path& path) {
  Json header{{"format", "mmoe-trace"},
              {"num_layers", trace.num_layers},
              {"num_tokens", trace.num_tokens},
              {"num_experts", trace.num_experts},
              {"per_layer_k", trace.schedule.per_layer_k}};
  if (trace.schedule.top_p) header["top_p"] = *trace.schedule.top_p;
  write_binary_file(path, frame_f32(std::move(header), trace.logits));
}

LogitTrace load_trace(const std::filesystem::path& path) {
  auto [header, payload] = unframe_f32(read_binary_file(path));
  LogitTrace t;
  try {
    if (header.at("format") != "mmoe-trace") throw FormatError(path.string() + " is not a logit trace");
    t.num_layers = header.at("num_layers").get<std::size_t>();
    t.num_tokens = header.at("num_tokens").get<std::size_t>();
    t.num_experts = header.at("num_experts").get<std::size_t>();
    t.schedule.per_layer_k = header.at("per_layer_k").get<std::vector<int>>();
    if (header.contains("top_p")) t.schedule.top_p = header["top_p"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("trace header is malformed: ") + e.what());
  }
  if (payload.size() != t.num_layers * t.num_tokens * t.num_experts) {
    throw FormatError("trace payload holds " + std::to_string(payload.size()) + " logits, header implies " +
                      std::to_string(t.num_layers * t.num_tokens * t.num_experts));
  }
  t.logits = std::move(payload);
  return t;
}

std::optional<double> spearman_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("spearman_rank: inputs differ in length");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double mean = (static_cast<double>(n) + 1.0) / 2.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::optional<double> focused_spearman(std::span<const float> logits_large, std::span<const float> logits_small,
                                       int k_large, int k_small) {
  const std::size_t n = logits_large.size();
  if (logits_small.size() != n) throw ShapeError("focused_spearman: logit vectors differ in length");
  if (k_small < 1 || k_large < 1 || static_cast<std::size_t>(std::max(k_small, k_large)) > n) {
    throw ConfigError("focused_spearman: k_large and k_small must lie in [1, " + std::to_string(n) + "]");
  }
  std::set<std::uint32_t> relevant;
  for (auto i : top_indices(logits_large, k_large)) relevant.insert(i);
  for (auto i : top_indices(logits_small, k_small)) relevant.insert(i);
  std::vector<double> a, b;
  for (auto i : relevant) {
    a.push_back(logits_large[i]);
    b.push_back(logits_small[i]);
  }
  return spearman_rank(a, b);
}

double CorrelationHeatmap::column_mean(std::size_t column) const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& row : mean) {
    if (!std::isnan(row[column])) {
      s += row[column];
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : std::nan("");
}

CorrelationHeatmap heatmap(const LogitTrace& large, const std::vector<LogitTrace>& smalls, const std::vector<int>& k_small,
                           int k_large) {
  if (smalls.size() != k_small.size()) throw ShapeError("heatmap: one trace per k_small value is required");
  for (const auto& s : smalls) {
    if (s.num_layers != large.num_layers || s.num_tokens != large.num_tokens || s.num_experts != large.num_experts) {
      throw ShapeError("heatmap: traces are not aligned (" + std::to_string(s.num_tokens) + " vs " +
                       std::to_string(large.num_tokens) + " tokens)");
    }
  }
  CorrelationHeatmap h;
  h.k_large = k_large;
  h.k_small = k_small;
  h.tokens = large.num_tokens;
  h.mean.assign(large.num_layers, std::vector<double>(k_small.size(), std::nan("")));
  h.excluded.assign(large.num_layers, std::vector<std::int64_t>(k_small.size(), 0));
  for (std::size_t l = 0; l < large.num_layers; ++l) {
    for (std::size_t c = 0; c < k_small.size(); ++c) {
      double sum = 0.0;
      std::int64_t used = 0;
      for (std::size_t t = 0; t < large.num_tokens; ++t) {
        const auto rho = focused_spearman(large.at(l, t), smalls[c].at(l, t), k_large, k_small[c]);
        if (rho) {
          sum += *rho;
          ++used;
        } else {
          ++h.excluded[l][c];
        }
      }
      if (used) h.mean[l][c] = sum / static_cast<double>(used);
    }
  }
  return h;
}

std::string heatmap_csv(const CorrelationHeatmap& h) {
  std::string s = "layer";
  for (int k : h.k_small) s += ",k_small_" + std::to_string(k);
  s += '\n';
  char buf[64];
  for (std::size_t l = 0; l < h.mean.size(); ++l) {
    s += std::to_string(l);
    for (double v : h.mean[l]) {
      if (std::isnan(v)) {
        s += ",nan";
      } else {
        std::snprintf(buf, sizeof buf, ",%.6f", v);
        s += buf;
      }
    }
    s += '\n';
  }
  return s;
}

double mods(const Tensor& w) {
  if (w.rank() != 2 || w.rows() < 2) throw ShapeError("mods: need an [N x d] matrix with N >= 2, got " + shape_str(w.shape()));
  const std::size_t n = w.rows(), d = w.cols();
  std::vector<double> unit(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t c = 0; c < d; ++c) norm += static_cast<double>(w.at(i, c)) * w.at(i, c);
    norm = std::sqrt(norm);
    if (norm == 0.0) throw ConfigError("mods: expert " + std::to_string(i) + " has a zero gating vector");
    for (std::size_t c = 0; c < d; ++c) unit[i * d + c] = w.at(i, c) / norm;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += unit[i * d + c] * unit[j * d + c];
      total += 2.0 * std::abs(dot);
    }
  }
  return std::clamp(total / static_cast<double>(n * (n - 1)), 0.0, 1.0);
}

std::vector<double> mods_profile(const Model& model) {
  std::vector<double> out;
  for (const auto& b : model.blocks) {
    const Tensor& wg = b.moe.router.wg.value;  // d x N
    const std::size_t d = wg.dim(0), n = wg.dim(1);
    Tensor gates({n, d});
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t e = 0; e < n; ++e) gates.at(e, r) = wg.at(r, e);
    }
    out.push_back(mods(gates));
  }
  return out;
}

std::string mods_csv(const std::vector<double>& profile) {
  std::string s = "layer,mods\n";
  char buf[64];
  for (std::size_t l = 0; l < profile.size(); ++l) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", l, profile[l]);
    s += buf;
  }
  return s;
}

}  // namespace mmoe

#include "mmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "mmoe/ops.hpp"

namespace mmoe {

std::string to_string(ScoreFn f) { return f == ScoreFn::softmax ? "softmax" : "sigmoid"; }
std::string to_string(ExpertKind k) { return k == ExpertKind::gelu ? "gelu" : "swiglu"; }

ScoreFn parse_score_fn(const std::string& s) {
  if (s == "softmax") return ScoreFn::softmax;
  if (s == "sigmoid") return ScoreFn::sigmoid;
  throw ConfigError("unknown score function '" + s + "' (expected softmax|sigmoid)");
}

ExpertKind parse_expert_kind(const std::string& s) {
  if (s == "gelu") return ExpertKind::gelu;
  if (s == "swiglu") return ExpertKind::swiglu;
  throw ConfigError("unknown expert activation '" + s + "' (expected gelu|swiglu)");
}

template <typename T>
std::vector<ParameterT<T>*> MoELayerT<T>::parameters() {
  std::vector<ParameterT<T>*> out{&router.wg};
  for (auto& e : experts) {
    out.push_back(&e.w_in);
    if (e.w_gate) out.push_back(&*e.w_gate);
    out.push_back(&e.w_out);
  }
  return out;
}

template <typename T>
MoELayerT<T> make_moe_layer(const MoELayerShape& s, Rng& rng, double in_std, double out_std) {
  if (s.num_experts < 2) throw ConfigError("MoE layer needs at least 2 experts");
  if (s.d_model == 0 || s.d_ff == 0) throw ConfigError("MoE layer dimensions must be positive");
  const std::string prefix = "layer." + std::to_string(s.layer_index) + ".";
  MoELayerT<T> layer;
  layer.layer_index = s.layer_index;
  layer.kind = s.kind;
  layer.router.score_fn = s.score_fn;
  layer.router.wg = ParameterT<T>(prefix + "router.Wg", TensorT<T>({s.d_model, s.num_experts}));
  fill_truncated_normal(layer.router.wg.value.data(), in_std, rng);
  for (std::size_t e = 0; e < s.num_experts; ++e) {
    const std::string ep = prefix + "expert." + std::to_string(e) + ".";
    ExpertT<T> ex;
    ex.w_in = ParameterT<T>(ep + "w_in", TensorT<T>({s.d_model, s.d_ff}));
    fill_truncated_normal(ex.w_in.value.data(), in_std, rng);
    if (s.kind == ExpertKind::swiglu) {
      ex.w_gate = ParameterT<T>(ep + "w_gate", TensorT<T>({s.d_model, s.d_ff}));
      fill_truncated_normal(ex.w_gate->value.data(), in_std, rng);
    }
    ex.w_out = ParameterT<T>(ep + "w_out", TensorT<T>({s.d_ff, s.d_model}));
    fill_truncated_normal(ex.w_out.value.data(), out_std, rng);
    layer.experts.push_back(std::move(ex));
  }
  return layer;
}

template <typename T>
RouterOutput<T> router_scores(MoELayerT<T>& layer, const Var<T>& x) {
  if (x.shape().size() != 2 || x.shape()[1] != layer.d_model()) {
    throw ShapeError("router_scores: input " + shape_str(x.shape()) + " does not match router " +
                     shape_str(layer.router.wg.value.shape()));
  }
  Tape<T>& tape = *x.tape();
  Var<T> logits = matmul(x, tape.param(layer.router.wg));
  Var<T> scores = layer.router.score_fn == ScoreFn::softmax ? softmax(logits, 1) : sigmoid(logits);
  return {logits, scores};
}

namespace {

// Expert ids of one score row ordered by descending score, ties by lower id.
template <typename T>
void rank_row(std::span<const T> row, std::vector<std::uint32_t>& order, std::size_t keep) {
  order.resize(row.size());
  std::iota(order.begin(), order.end(), 0u);
  auto cmp = [&](std::uint32_t a, std::uint32_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); };
  if (keep < row.size()) {
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), cmp);
  } else {
    std::sort(order.begin(), order.end(), cmp);
  }
}

template <typename T>
void append_token(ExpertSelection& sel, std::span<const T> row, std::span<const std::uint32_t> chosen) {
  double denom = 0.0;
  for (auto e : chosen) denom += static_cast<double>(row[e]);
  for (auto e : chosen) {
    sel.experts.push_back(e);
    sel.weights.push_back(static_cast<double>(row[e]) / denom);
  }
  sel.offsets.push_back(static_cast<std::uint32_t>(sel.experts.size()));
}

template <typename T>
void require_score_matrix(const TensorT<T>& scores, const char* op) {
  if (scores.rank() != 2) throw ShapeError(std::string(op) + ": expected [tokens x experts], got " + shape_str(scores.shape()));
}

}  // namespace

template <typename T>
ExpertSelection select_topk(const TensorT<T>& scores, int k) {
  require_score_matrix(scores, "select_topk");
  const std::size_t n = scores.cols();
  if (k < 1 || static_cast<std::size_t>(k) > n) {
    throw ConfigError("select_topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  ExpertSelection sel;
  sel.experts.reserve(scores.rows() * static_cast<std::size_t>(k));
  sel.weights.reserve(sel.experts.capacity());
  std::vector<std::uint32_t> order;
  for (std::size_t t = 0; t < scores.rows(); ++t) {
    const auto row = scores.row(t);
    rank_row(row, order, static_cast<std::size_t>(k));
    append_token(sel, row, std::span<const std::uint32_t>(order).first(static_cast<std::size_t>(k)));
  }
  return sel;
}

template <typename T>
ExpertSelection select_topp(const TensorT<T>& scores, double p) {
  require_score_matrix(scores, "select_topp");
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("select_topp: p=" + std::to_string(p) + " outside (0, 1]");
  const std::size_t n = scores.cols();
  ExpertSelection sel;
  std::vector<std::uint32_t> order;
  for (std::size_t t = 0; t < scores.rows(); ++t) {
    const auto row = scores.row(t);
    rank_row(row, order, n);
    std::size_t kp = n;
    double cum = 0.0;
    for (std::size_t i = 0; p < 1.0 && i + 1 < n; ++i) {
      cum += static_cast<double>(row[order[i]]);
      if (cum >= p) {
        kp = i + 1;
        break;
      }
    }
    append_token(sel, row, std::span<const std::uint32_t>(order).first(kp));
  }
  return sel;
}

template <typename T>
Var<T> selection_weights(const Var<T>& scores, const ExpertSelection& sel) {
  const auto& sv = scores.value();
  if (sv.rank() != 2 || sv.rows() != sel.num_tokens()) {
    throw ShapeError("selection_weights: scores " + shape_str(sv.shape()) + " vs selection over " +
                     std::to_string(sel.num_tokens()) + " tokens");
  }
  const std::size_t n = sv.cols();
  TensorT<T> out({sel.experts.size()});
  auto denoms = std::make_shared<std::vector<double>>(sel.num_tokens());
  for (std::size_t t = 0; t < sel.num_tokens(); ++t) {
    double d = 0.0;
    for (auto e : sel.indices(t)) d += static_cast<double>(sv[t * n + e]);
    (*denoms)[t] = d;
    for (std::size_t s = sel.offsets[t]; s < sel.offsets[t + 1]; ++s) {
      out[s] = static_cast<T>(static_cast<double>(sv[t * n + sel.experts[s]]) / d);
    }
  }
  auto shared_sel = std::make_shared<ExpertSelection>(sel);
  return scores.tape()->record("selection_weights", std::move(out), {scores},
                               [scores, shared_sel, denoms, n](Tape<T>& tape, std::span<const T> g) {
                                 const auto& sv = scores.value();
                                 auto gs = tape.grad(scores);
                                 const ExpertSelection& sel = *shared_sel;
                                 for (std::size_t t = 0; t < sel.num_tokens(); ++t) {
                                   const double d = (*denoms)[t];
                                   double gsum = 0.0;
                                   for (std::size_t s = sel.offsets[t]; s < sel.offsets[t + 1]; ++s) {
                                     gsum += static_cast<double>(g[s]) * sv[t * n + sel.experts[s]];
                                   }
                                   for (std::size_t s = sel.offsets[t]; s < sel.offsets[t + 1]; ++s) {
                                     gs[t * n + sel.experts[s]] += static_cast<T>(g[s] / d - gsum / (d * d));
                                   }
                                 }
                               });
}

template <typename T>
Var<T> expert_forward(ExpertT<T>& expert, const Var<T>& x) {
  Tape<T>& tape = *x.tape();
  Var<T> h = matmul(x, tape.param(expert.w_in));
  if (expert.w_gate) {
    h = mul(silu(h), matmul(x, tape.param(*expert.w_gate)));
  } else {
    h = gelu(h);
  }
  return matmul(h, tape.param(expert.w_out));
}

template <typename T>
Var<T> moe_forward(MoELayerT<T>& layer, const Var<T>& x, const ExpertSelection& sel, const Var<T>& scores) {
  const std::size_t tokens = x.value().rows(), d = layer.d_model();
  if (x.shape().size() != 2 || x.shape()[1] != d) {
    throw ShapeError("moe_forward: input " + shape_str(x.shape()) + " does not match d_model " + std::to_string(d));
  }
  if (sel.num_tokens() != tokens) {
    throw ShapeError("moe_forward: selection covers " + std::to_string(sel.num_tokens()) + " tokens, input has " +
                     std::to_string(tokens));
  }
  const std::size_t n = layer.num_experts();
  std::vector<std::vector<std::uint32_t>> token_ids(n), slot_ids(n);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t s = sel.offsets[t]; s < sel.offsets[t + 1]; ++s) {
      const auto e = sel.experts[s];
      if (e >= n) throw IndexError("moe_forward: expert id " + std::to_string(e) + " out of range");
      token_ids[e].push_back(static_cast<std::uint32_t>(t));
      slot_ids[e].push_back(static_cast<std::uint32_t>(s));
    }
  }
  Var<T> weights = selection_weights(scores, sel);
  std::vector<std::pair<Var<T>, std::vector<std::uint32_t>>> parts;
  for (std::size_t e = 0; e < n; ++e) {
    if (token_ids[e].empty()) continue;
    Var<T> xe = gather_rows(x, std::span<const std::uint32_t>(token_ids[e]));
    Var<T> ye = expert_forward(layer.experts[e], xe);
    Var<T> we = gather(weights, std::span<const std::uint32_t>(slot_ids[e]));
    parts.emplace_back(scale_rows(ye, we), std::move(token_ids[e]));
  }
  return scatter_add_rows(*x.tape(), tokens, d, parts);
}

template <typename T>
Var<T> balance_loss(const Var<T>& scores, const ExpertSelection& sel, T coeff) {
  if (coeff < T{0}) throw ConfigError("balance_loss: coefficient must be non-negative");
  Tape<T>& tape = *scores.tape();
  if (coeff == T{0}) return tape.constant(TensorT<T>::scalar(T{0}));
  const auto& sv = scores.value();
  const std::size_t tokens = sv.rows(), n = sv.cols();
  if (tokens != sel.num_tokens()) throw ShapeError("balance_loss: selection does not match scores");
  auto frac = std::make_shared<std::vector<double>>(n, 0.0);
  for (auto e : sel.experts) (*frac)[e] += 1.0;
  const double slots = static_cast<double>(sel.experts.size());
  for (auto& f : *frac) f /= slots;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = 0.0;
    for (std::size_t t = 0; t < tokens; ++t) p += sv[t * n + i];
    loss += (*frac)[i] * p / static_cast<double>(tokens);
  }
  const double c = static_cast<double>(coeff) * static_cast<double>(n);
  return tape.record("balance_loss", TensorT<T>::scalar(static_cast<T>(c * loss)), {scores},
                     [scores, frac, c, tokens, n](Tape<T>& t, std::span<const T> g) {
                       auto gs = t.grad(scores);
                       for (std::size_t r = 0; r < tokens; ++r) {
                         for (std::size_t i = 0; i < n; ++i) {
                           gs[r * n + i] += static_cast<T>(g[0] * c * (*frac)[i] / static_cast<double>(tokens));
                         }
                       }
                     });
}

#define MMOE_INSTANTIATE_MOE(T)                                                                        \
  template struct MoELayerT<T>;                                                                        \
  template MoELayerT<T> make_moe_layer<T>(const MoELayerShape&, Rng&, double, double);                 \
  template RouterOutput<T> router_scores(MoELayerT<T>&, const Var<T>&);                                \
  template ExpertSelection select_topk(const TensorT<T>&, int);                                        \
  template ExpertSelection select_topp(const TensorT<T>&, double);                                     \
  template Var<T> selection_weights(const Var<T>&, const ExpertSelection&);                            \
  template Var<T> expert_forward(ExpertT<T>&, const Var<T>&);                                          \
  template Var<T> moe_forward(MoELayerT<T>&, const Var<T>&, const ExpertSelection&, const Var<T>&);    \
  template Var<T> balance_loss(const Var<T>&, const ExpertSelection&, T);

MMOE_INSTANTIATE_MOE(float)
MMOE_INSTANTIATE_MOE(double)

}  // namespace mmoe

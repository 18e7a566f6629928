#pragma once

// MoE feed-forward sublayer: router scoring, sparse Top-k / Top-p expert
// selection with renormalised weights, and the weighted expert combination.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmoe/autograd.hpp"
#include "mmoe/rng.hpp"

namespace mmoe {

enum class ScoreFn { softmax, sigmoid };
enum class ExpertKind { gelu, swiglu };

std::string to_string(ScoreFn f);
std::string to_string(ExpertKind k);
ScoreFn parse_score_fn(const std::string& s);
ExpertKind parse_expert_kind(const std::string& s);

// Per-token chosen experts and their mixture weights, stored CSR-style.
// Within a token, experts are listed by descending router score (ties: lower
// expert id first) and weights are the scores renormalised over the chosen set.
struct ExpertSelection {
  std::vector<std::uint32_t> offsets{0};  // num_tokens + 1 entries
  std::vector<std::uint32_t> experts;
  std::vector<double> weights;

  std::size_t num_tokens() const { return offsets.size() - 1; }
  std::size_t k(std::size_t t) const { return offsets[t + 1] - offsets[t]; }
  std::span<const std::uint32_t> indices(std::size_t t) const {
    return std::span<const std::uint32_t>(experts).subspan(offsets[t], k(t));
  }
  std::span<const double> token_weights(std::size_t t) const {
    return std::span<const double>(weights).subspan(offsets[t], k(t));
  }
  double mean_k() const {
    return num_tokens() ? static_cast<double>(experts.size()) / static_cast<double>(num_tokens()) : 0.0;
  }
};

template <typename T>
struct RouterWeightsT {
  ParameterT<T> wg;  // d_model x num_experts
  ScoreFn score_fn = ScoreFn::softmax;
};

template <typename T>
struct ExpertT {
  ParameterT<T> w_in;                   // d_model x d_ff
  ParameterT<T> w_out;                  // d_ff x d_model
  std::optional<ParameterT<T>> w_gate;  // d_model x d_ff, swiglu only
};

template <typename T>
struct MoELayerT {
  RouterWeightsT<T> router;
  std::vector<ExpertT<T>> experts;
  std::size_t layer_index = 0;
  ExpertKind kind = ExpertKind::gelu;

  std::size_t num_experts() const { return experts.size(); }
  std::size_t d_model() const { return router.wg.value.dim(0); }
  std::size_t d_ff() const { return experts.front().w_in.value.dim(1); }
  std::vector<ParameterT<T>*> parameters();
};

using MoELayer = MoELayerT<float>;

struct MoELayerShape {
  std::size_t layer_index = 0;
  std::size_t d_model = 0;
  std::size_t d_ff = 0;
  std::size_t num_experts = 0;
  ScoreFn score_fn = ScoreFn::softmax;
  ExpertKind kind = ExpertKind::gelu;
};

// Truncated-normal init: in_std for router and input projections, out_std for
// the expert output projection (residual branch).
template <typename T>
MoELayerT<T> make_moe_layer(const MoELayerShape& shape, Rng& rng, double in_std = 0.02, double out_std = 0.02);

template <typename T>
struct RouterOutput {
  Var<T> logits;  // x . Wg, kept for tracing
  Var<T> scores;  // score_fn(logits)
};

template <typename T>
RouterOutput<T> router_scores(MoELayerT<T>& layer, const Var<T>& x);

template <typename T>
ExpertSelection select_topk(const TensorT<T>& scores, int k);

// Smallest prefix of descending scores whose cumulative sum reaches p. The
// final prefix sum is taken as exactly 1 so p = 1 always selects every expert.
template <typename T>
ExpertSelection select_topp(const TensorT<T>& scores, double p);

// Differentiable renormalised weights s_i / sum_{j in T} s_j, flattened in
// selection order.
template <typename T>
Var<T> selection_weights(const Var<T>& scores, const ExpertSelection& sel);

template <typename T>
Var<T> expert_forward(ExpertT<T>& expert, const Var<T>& x);

// y_t = sum_{i in T_t} w_{t,i} E_i(x_t). Tokens are grouped per expert
// (gather / compute / scatter); experts with no tokens do no work.
template <typename T>
Var<T> moe_forward(MoELayerT<T>& layer, const Var<T>& x, const ExpertSelection& sel, const Var<T>& scores);

// coeff * N * sum_i f_i P_i with f_i the fraction of routed slots and P_i the
// mean router probability of expert i.
template <typename T>
Var<T> balance_loss(const Var<T>& scores, const ExpertSelection& sel, T coeff);

}  // namespace mmoe

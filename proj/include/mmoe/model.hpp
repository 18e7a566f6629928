#pragma once

// Toy decoder-only MoE transformer: token + position embeddings, pre-norm
// blocks of causal multi-head attention and an MoE feed-forward sublayer,
// final norm and output projection.

#include <cstdint>
#include <span>
#include <vector>

#include "mmoe/autograd.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/rng.hpp"
#include "mmoe/scheduler.hpp"

namespace mmoe {

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t num_experts = 16;
  std::size_t max_seq_len = 64;
  ScoreFn score_fn = ScoreFn::softmax;
  ExpertKind expert_kind = ExpertKind::gelu;

  void validate() const;
  std::size_t parameter_count() const;
};

template <typename T>
struct BlockT {
  ParameterT<T> attn_norm;
  ParameterT<T> wq, wk, wv, wo;
  ParameterT<T> moe_norm;
  MoELayerT<T> moe;
};

template <typename T>
struct ModelT {
  ModelConfig config;
  ParameterT<T> tok_emb;
  ParameterT<T> pos_emb;
  std::vector<BlockT<T>> blocks;
  ParameterT<T> final_norm;
  ParameterT<T> w_out;

  // Stable order: embeddings, blocks front to back, final norm, output head.
  std::vector<ParameterT<T>*> parameters();
  std::vector<const ParameterT<T>*> parameters() const;
  std::vector<MoELayerT<T>*> moe_layers();
  void zero_grad();
};

using Model = ModelT<float>;

template <typename T>
ModelT<T> build_model(const ModelConfig& cfg, Rng& rng);

// Converts parameter storage to another precision (e.g. float -> double for
// finite-difference checks).
template <typename U, typename T>
ModelT<U> cast_model(const ModelT<T>& model);

// Hooks into one forward pass.
template <typename T>
struct ForwardOutput {
  Var<T> logits;                       // [batch*seq_len x vocab]
  Var<T> aux_loss;                     // summed balance loss over layers
  std::vector<double> layer_mean_k;    // experts per token actually used, per layer
  std::vector<TensorT<T>> router_logits;  // filled when capture_router_logits is set
};

struct ForwardOptions {
  double balance_coeff = 0.0;
  bool capture_router_logits = false;
};

// tokens: batch*seq_len ids, row-major by sequence. The schedule gives k per
// layer, or a Top-p threshold.
template <typename T>
ForwardOutput<T> forward(ModelT<T>& model, Tape<T>& tape, std::span<const std::int32_t> tokens, std::size_t seq_len,
                         const KSchedule& schedule, const ForwardOptions& opts = {});

}  // namespace mmoe

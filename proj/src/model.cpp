#include "mmoe/model.hpp"

#include <cmath>
#include <string>

#include "mmoe/ops.hpp"

namespace mmoe {

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model: vocab_size must be at least 2");
  if (d_model == 0 || d_ff == 0 || num_layers == 0 || max_seq_len == 0) {
    throw ConfigError("model: dimensions must be positive");
  }
  if (num_heads == 0 || d_model % num_heads != 0) {
    throw ConfigError("model: d_model " + std::to_string(d_model) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (num_experts < 2) throw ConfigError("model: need at least 2 experts");
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t d = d_model;
  const std::size_t ffn_mats = expert_kind == ExpertKind::swiglu ? 3 : 2;
  const std::size_t per_layer = 2 * d + 4 * d * d + d * num_experts + num_experts * ffn_mats * d * d_ff;
  return vocab_size * d + max_seq_len * d + num_layers * per_layer + d + d * vocab_size;
}

template <typename T>
std::vector<ParameterT<T>*> ModelT<T>::parameters() {
  std::vector<ParameterT<T>*> out{&tok_emb, &pos_emb};
  for (auto& b : blocks) {
    for (auto* p : {&b.attn_norm, &b.wq, &b.wk, &b.wv, &b.wo, &b.moe_norm}) out.push_back(p);
    for (auto* p : b.moe.parameters()) out.push_back(p);
  }
  out.push_back(&final_norm);
  out.push_back(&w_out);
  return out;
}

template <typename T>
std::vector<const ParameterT<T>*> ModelT<T>::parameters() const {
  auto ps = const_cast<ModelT<T>*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

template <typename T>
std::vector<MoELayerT<T>*> ModelT<T>::moe_layers() {
  std::vector<MoELayerT<T>*> out;
  for (auto& b : blocks) out.push_back(&b.moe);
  return out;
}

template <typename T>
void ModelT<T>::zero_grad() {
  for (auto* p : parameters()) {
    p->value.ensure_grad();
    p->value.zero_grad();
  }
}

template <typename T>
ModelT<T> build_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  constexpr double kStd = 0.02;
  const double out_std = kStd / std::sqrt(2.0 * static_cast<double>(cfg.num_layers));
  const std::size_t d = cfg.d_model;
  auto matrix = [&](std::string name, std::size_t r, std::size_t c, double sd) {
    ParameterT<T> p(std::move(name), TensorT<T>({r, c}));
    fill_truncated_normal(p.value.data(), sd, rng);
    return p;
  };
  auto gain = [&](std::string name) { return ParameterT<T>(std::move(name), TensorT<T>::ones({d}), false); };

  ModelT<T> m;
  m.config = cfg;
  m.tok_emb = matrix("tok_emb", cfg.vocab_size, d, kStd);
  m.pos_emb = matrix("pos_emb", cfg.max_seq_len, d, kStd);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    BlockT<T> b;
    b.attn_norm = gain(p + "attn_norm");
    b.wq = matrix(p + "attn.wq", d, d, kStd);
    b.wk = matrix(p + "attn.wk", d, d, kStd);
    b.wv = matrix(p + "attn.wv", d, d, kStd);
    b.wo = matrix(p + "attn.wo", d, d, out_std);
    b.moe_norm = gain(p + "moe_norm");
    b.moe = make_moe_layer<T>({l, d, cfg.d_ff, cfg.num_experts, cfg.score_fn, cfg.expert_kind}, rng, kStd, out_std);
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = gain("final_norm");
  m.w_out = matrix("w_out", d, cfg.vocab_size, kStd);
  return m;
}

template <typename U, typename T>
ModelT<U> cast_model(const ModelT<T>& src) {
  auto conv = [](const ParameterT<T>& p) {
    ParameterT<U> q(p.name, p.value.template cast<U>(), p.decay);
    q.step_count = p.step_count;
    q.adam_m.assign(p.adam_m.begin(), p.adam_m.end());
    q.adam_v.assign(p.adam_v.begin(), p.adam_v.end());
    return q;
  };
  ModelT<U> m;
  m.config = src.config;
  m.tok_emb = conv(src.tok_emb);
  m.pos_emb = conv(src.pos_emb);
  for (const auto& b : src.blocks) {
    BlockT<U> nb;
    nb.attn_norm = conv(b.attn_norm);
    nb.wq = conv(b.wq);
    nb.wk = conv(b.wk);
    nb.wv = conv(b.wv);
    nb.wo = conv(b.wo);
    nb.moe_norm = conv(b.moe_norm);
    nb.moe.layer_index = b.moe.layer_index;
    nb.moe.kind = b.moe.kind;
    nb.moe.router.score_fn = b.moe.router.score_fn;
    nb.moe.router.wg = conv(b.moe.router.wg);
    for (const auto& e : b.moe.experts) {
      ExpertT<U> ne;
      ne.w_in = conv(e.w_in);
      ne.w_out = conv(e.w_out);
      if (e.w_gate) ne.w_gate = conv(*e.w_gate);
      nb.moe.experts.push_back(std::move(ne));
    }
    m.blocks.push_back(std::move(nb));
  }
  m.final_norm = conv(src.final_norm);
  m.w_out = conv(src.w_out);
  return m;
}

template <typename T>
ForwardOutput<T> forward(ModelT<T>& model, Tape<T>& tape, std::span<const std::int32_t> tokens, std::size_t seq_len,
                         const KSchedule& schedule, const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config;
  if (seq_len == 0 || seq_len > cfg.max_seq_len || tokens.size() % seq_len != 0) {
    throw ShapeError("forward: " + std::to_string(tokens.size()) + " tokens do not form sequences of length " +
                     std::to_string(seq_len) + " (max " + std::to_string(cfg.max_seq_len) + ")");
  }
  if (!schedule.is_top_p() && schedule.per_layer_k.size() != cfg.num_layers) {
    throw ShapeError("forward: schedule has " + std::to_string(schedule.per_layer_k.size()) + " entries for " +
                     std::to_string(cfg.num_layers) + " layers");
  }
  std::vector<std::int32_t> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<std::int32_t>(i % seq_len);

  ForwardOutput<T> out;
  Var<T> h = add(embedding(tape.param(model.tok_emb), tokens), embedding(tape.param(model.pos_emb), positions));
  Var<T> aux = tape.constant(TensorT<T>::scalar(T{0}));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    BlockT<T>& b = model.blocks[l];
    Var<T> a = rms_norm(h, tape.param(b.attn_norm));
    Var<T> att = causal_attention(matmul(a, tape.param(b.wq)), matmul(a, tape.param(b.wk)), matmul(a, tape.param(b.wv)),
                                  cfg.num_heads, seq_len);
    h = add(h, matmul(att, tape.param(b.wo)));

    Var<T> x = rms_norm(h, tape.param(b.moe_norm));
    RouterOutput<T> r = router_scores(b.moe, x);
    if (opts.capture_router_logits) out.router_logits.push_back(r.logits.value());
    const ExpertSelection sel = schedule.is_top_p() ? select_topp(r.scores.value(), *schedule.top_p)
                                                    : select_topk(r.scores.value(), schedule.per_layer_k[l]);
    out.layer_mean_k.push_back(sel.mean_k());
    h = add(h, moe_forward(b.moe, x, sel, r.scores));
    if (opts.balance_coeff > 0.0) aux = add(aux, balance_loss(r.scores, sel, static_cast<T>(opts.balance_coeff)));
  }
  out.logits = matmul(rms_norm(h, tape.param(model.final_norm)), tape.param(model.w_out));
  out.aux_loss = aux;
  return out;
}

#define MMOE_INSTANTIATE_MODEL(T)                                                                             \
  template struct ModelT<T>;                                                                                  \
  template ModelT<T> build_model<T>(const ModelConfig&, Rng&);                                                \
  template ForwardOutput<T> forward(ModelT<T>&, Tape<T>&, std::span<const std::int32_t>, std::size_t,        \
                                    const KSchedule&, const ForwardOptions&);

MMOE_INSTANTIATE_MODEL(float)
MMOE_INSTANTIATE_MODEL(double)
template ModelT<double> cast_model<double, float>(const ModelT<float>&);
template ModelT<float> cast_model<float, double>(const ModelT<double>&);
template ModelT<float> cast_model<float, float>(const ModelT<float>&);

}  // namespace mmoe

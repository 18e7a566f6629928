#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mmoe/autograd.hpp"

namespace mmoe {

// Caps internal data-parallel loops. Initialised from MMOE_THREADS on first use.
int num_threads();
void set_num_threads(int n);

// Differentiable operations. Every function records one node on the tape of
// its first operand. Shapes are validated eagerly and reported with both
// operand shapes on mismatch.

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);

template <typename T> Var<T> gelu(const Var<T>& a);
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);

// Softmax along `axis`, stabilised by subtracting the max along that axis.
template <typename T> Var<T> softmax(const Var<T>& a, std::size_t axis);

// Mean over rows of -log softmax(logits[t])[targets[t]].
template <typename T> Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets);

// x * gain / sqrt(mean(x^2) + eps), row-wise.
template <typename T> Var<T> rms_norm(const Var<T>& x, const Var<T>& gain, T eps = T(1e-6));

// Rows of `table` selected by ids.
template <typename T> Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids);

// Rows of x selected by idx (duplicates allowed).
template <typename T> Var<T> gather_rows(const Var<T>& x, std::span<const std::uint32_t> idx);

// Elements of a flat tensor selected by idx, as a rank-1 tensor.
template <typename T> Var<T> gather(const Var<T>& v, std::span<const std::uint32_t> idx);

// Row r of x multiplied by w[r].
template <typename T> Var<T> scale_rows(const Var<T>& x, const Var<T>& w);

// out[rows x cols] = sum over parts of scatter-add of part rows into idx rows.
template <typename T>
Var<T> scatter_add_rows(Tape<T>& tape, std::size_t rows, std::size_t cols,
                        const std::vector<std::pair<Var<T>, std::vector<std::uint32_t>>>& parts);

// Causal multi-head self-attention over a batch of equally long sequences.
// q, k, v are [batch*seq_len x d]; heads split d evenly.
template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t num_heads, std::size_t seq_len);

}  // namespace mmoe

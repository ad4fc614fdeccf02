#pragma once

#include <cstddef>
#include <vector>

#include "sctx/rng.hpp"
#include "sctx/tape.hpp"

// Differentiable primitives. Every op records its result on the tape of its
// first operand. Broadcasting is limited to two forms: the right operand's
// shape is a suffix of the left operand's shape (leading-batch), or the right
// operand holds a single element. Anything else goes through expand().

namespace sctx {

/// a [..., k] x b [k, n] -> [..., n]; with transpose_b, b is [n, k].
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool transpose_b = false);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);
template <typename T>
Var<T> tanh(const Var<T>& x);

/// Softmax over the last axis. `mask` (1 = keep) has the shape of x or a
/// suffix of it; masked entries come out as exactly 0.
template <typename T>
Var<T> softmax(const Var<T>& x, const BoolTensor* mask = nullptr);

/// Normalizes over the last axis, then applies gamma/beta of shape [d].
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T>
Var<T> concat_last_dim(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> narrow(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
/// Inserts a new axis of extent n at `axis`, repeating x along it.
template <typename T>
Var<T> expand(const Var<T>& x, std::size_t axis, std::size_t n);
/// Gathers entries of the leading axis.
template <typename T>
Var<T> index_select(const Var<T>& x, const std::vector<std::size_t>& indices);

/// table [V, d], ids of any shape -> ids.shape + [d].
template <typename T>
Var<T> embedding(const Var<T>& table, const IdTensor& ids);

/// Mean over valid rows of the label-smoothed negative log-likelihood. The
/// smoothed target puts (1 - smoothing) on the gold id and smoothing / V on
/// every vocabulary entry. `mask` selects the rows that count; null means all.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const IdTensor& targets, const BoolTensor* mask, T smoothing);

/// x [..., T, d], mask [..., T] -> [..., d]; pools over valid positions only.
template <typename T>
Var<T> mean_pool(const Var<T>& x, const BoolTensor& mask);
/// Element-wise max over valid positions. Ties go to the lowest position,
/// which is also the only one that receives gradient.
template <typename T>
Var<T> max_pool(const Var<T>& x, const BoolTensor& mask);

template <typename T>
Var<T> sum(const Var<T>& x);

/// Inverted dropout; identity when rate == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, T rate, Rng& rng);

template <typename T>
struct AttentionSpec {
  std::size_t heads = 1;
  const BoolTensor* key_mask = nullptr;  // [B, Tk], 1 = attend
  bool causal = false;                   // query i sees keys j <= i + (Tk - Tq)
  T dropout = T(0);
  Rng* rng = nullptr;
};

/// Multi-head scaled dot-product attention on already-projected inputs:
/// q [B, Tq, d], k and v [B, Tk, d] -> [B, Tq, d]. Each head uses a
/// contiguous d / heads slice. If `weights` is given it receives the
/// pre-dropout attention weights, shape [B, heads, Tq, Tk].
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionSpec<T>& spec,
                 Tensor<T>* weights = nullptr);

}  // namespace sctx

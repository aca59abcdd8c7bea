#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "llama/tensor.hpp"

// Differentiable kernels. Every op is defined for float and double; the double
// instantiation exists so gradients can be checked against finite differences.

namespace llama {

using TokenId = std::int32_t;

/// c = a·b for a [m×k], b [k×n].
template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);

/// matmul whose product was computed earlier (activation checkpointing).
/// Forward returns `product` as-is; backward is that of matmul(a, b).
template <typename Scalar>
BasicTensor<Scalar> matmul_saved(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b,
                                 std::vector<Scalar> product);

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);

/// Elementwise product.
template <typename Scalar>
BasicTensor<Scalar> mul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b);

template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& x, Scalar factor);

/// x [m×n] plus bias [n] added to every row.
template <typename Scalar>
BasicTensor<Scalar> add_row_bias(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& bias);

/// x·sigmoid(x).
template <typename Scalar>
BasicTensor<Scalar> silu(const BasicTensor<Scalar>& x);

/// Rows of `table` [V×d] selected by ids; backward scatter-adds.
template <typename Scalar>
BasicTensor<Scalar> embedding(const BasicTensor<Scalar>& table, std::span<const TokenId> ids);

template <typename Scalar>
BasicTensor<Scalar> reshape(const BasicTensor<Scalar>& x, Shape shape);

/// Rank-2 transpose.
template <typename Scalar>
BasicTensor<Scalar> transpose(const BasicTensor<Scalar>& x);

/// Concatenation along `axis`; all other extents must agree.
template <typename Scalar>
BasicTensor<Scalar> concat(const std::vector<BasicTensor<Scalar>>& parts, std::int64_t axis);

/// Columns [offset, offset + width) of a rank-2 tensor.
template <typename Scalar>
BasicTensor<Scalar> slice_columns(const BasicTensor<Scalar>& x, std::int64_t offset, std::int64_t width);

template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& x);

template <typename Scalar>
BasicTensor<Scalar> mean(const BasicTensor<Scalar>& x);

/// Row-wise softmax with max subtraction. -inf entries get probability 0.
template <typename Scalar>
BasicTensor<Scalar> softmax_rows(const BasicTensor<Scalar>& x);

/// Sets score[i, j] to -inf where key j lies after query i's absolute
/// position (query_offset + i).
template <typename Scalar>
BasicTensor<Scalar> causal_mask(const BasicTensor<Scalar>& scores, std::int64_t query_offset);

/// Mean of -log softmax(logits)[target] over rows whose target != ignore_index.
template <typename Scalar>
BasicTensor<Scalar> cross_entropy(const BasicTensor<Scalar>& logits, std::span<const TokenId> targets,
                                  TokenId ignore_index = -100);

/// y = gain · x / sqrt(mean(x²) + eps) over the last axis.
template <typename Scalar>
BasicTensor<Scalar> rmsnorm(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& gain, Scalar eps);

/// Rotary embedding over the last axis of x [seq × ... × head_dim].
///
/// Dimension pair (2i, 2i+1) of row s is rotated by positions[s] · base^(-2i/head_dim).
/// Positions are reals so the rotation can be probed at arbitrary angles.
template <typename Scalar>
BasicTensor<Scalar> rope_apply(const BasicTensor<Scalar>& x, std::span<const double> positions, double base);

template <typename Scalar>
BasicTensor<Scalar> rope_apply(const BasicTensor<Scalar>& x, std::span<const std::int64_t> positions,
                               double base);

/// Causal multi-head attention that streams over each query's visible prefix.
///
/// q is [n × d] for absolute positions query_offset..query_offset+n-1; k and v
/// are [L × d] for positions 0..L-1 with L >= query_offset + n. Masked scores
/// are never computed and no n × L buffer exists in either direction: forward
/// keeps an online max/sum per row and backward recomputes the scores from
/// the saved per-row log-sum-exp.
template <typename Scalar>
BasicTensor<Scalar> fused_causal_attention(const BasicTensor<Scalar>& q, const BasicTensor<Scalar>& k,
                                           const BasicTensor<Scalar>& v, std::int64_t n_heads,
                                           std::int64_t query_offset);

}  // namespace llama

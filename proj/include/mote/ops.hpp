// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Every function records a tape node when grad mode
// is on and at least one input requires a gradient. Broadcasting is limited to
// scalar factors and row-vector biases; everything else needs equal shapes.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mote/tensor.hpp"

namespace mote {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// x[R x C] + bias[C] on every row.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);

/// Sum of all elements as a scalar.
Tensor sum(const Tensor& x);
/// Mean of all elements as a scalar.
Tensor mean_all(const Tensor& x);
/// Mean over `axis`; the axis is removed from the shape.
Tensor mean(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
/// Stacks `times` copies of x[R x C] vertically.
Tensor tile_rows(const Tensor& x, std::size_t times);
/// Concatenates along axis 0; trailing dimensions must agree.
Tensor concat(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Normalises over the last axis, then applies gain and bias (both [C]).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// Tanh approximation of GELU.
Tensor gelu(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
/// -log softmax(logits)[target] for a rank-1 logit vector.
Tensor cross_entropy(const Tensor& logits, std::size_t target);
/// Mean over rows of the per-row cross-entropy of logits[B x C].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);
/// Mean over rows of KL(target || softmax(logits)). `target_probs` is constant.
Tensor kl_divergence(const Tensor& target_probs, const Tensor& logits);

/// Euclidean norm over the last axis; that axis is removed.
Tensor l2_norm(const Tensor& x);
/// Rows scaled to unit Euclidean norm over the last axis.
Tensor normalize_rows(const Tensor& x);
/// Mean of squared differences over all elements.
Tensor mse(const Tensor& a, const Tensor& b);
/// Per-row sum of squared differences of a[B x D] and b[B x D]; result [B].
Tensor squared_distance(const Tensor& a, const Tensor& b);

/// Σ coeffs[i] * parts[i]; all parts share one shape.
Tensor weighted_sum(const std::vector<Tensor>& parts, std::span<const double> coeffs);
/// (Σ parts[i]) / n, accumulated left to right.
Tensor average(const std::vector<Tensor>& parts);

/// Block-diagonal attention logits for a batch of sequences laid out as
/// rows. q and k are [B*T x D] with D split into `heads` slices; the result
/// is [B*T x heads*T] holding q_(b,t,h) . k_(b,s,h).
Tensor attention_scores(const Tensor& q, const Tensor& k, std::size_t frames, std::size_t heads);
/// Applies attention weights p[B*T x heads*T] to values v[B*T x D].
Tensor attention_mix(const Tensor& p, const Tensor& v, std::size_t frames, std::size_t heads);

}  // namespace mote

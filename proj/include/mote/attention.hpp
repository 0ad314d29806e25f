// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "mote/tensor.hpp"

namespace mote {

/// Pre-norm multi-head self-attention weights for a width-D residual stream.
struct AttentionParams {
    Tensor norm_gain, norm_bias;  // [D]
    Tensor w_q, w_k, w_v, w_o;    // [D x D]
    Tensor b_q, b_k, b_v, b_o;    // [D]
    std::size_t heads = 1;

    static AttentionParams init(std::size_t dim, std::size_t heads, std::mt19937_64& rng,
                                double stddev = 0.02);
    std::size_t dim() const { return w_q.rows(); }
    std::vector<Tensor> parameters() const;
};

/// x + Attention(LayerNorm(x)) for B sequences of `frames` rows each, packed
/// as x[B*frames x D]. Attention never mixes rows of different sequences and
/// carries no positional bias.
Tensor attention_block(const Tensor& x, const AttentionParams& params, std::size_t frames);

}  // namespace mote

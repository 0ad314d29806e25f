// SPDX-License-Identifier: Apache-2.0

#include "mote/attention.hpp"

#include <cmath>
#include <string>

#include "mote/ops.hpp"

namespace mote {

namespace {

Tensor normal_matrix(std::size_t r, std::size_t c, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(r * c);
    for (auto& x : v) x = dist(rng);
    return Tensor({r, c}, std::move(v), true);
}

}  // namespace

AttentionParams AttentionParams::init(std::size_t dim, std::size_t heads, std::mt19937_64& rng,
                                      double stddev) {
    if (heads == 0 || dim % heads != 0) {
        throw DimensionError("attention width " + std::to_string(dim) + " not divisible by " +
                             std::to_string(heads) + " heads");
    }
    AttentionParams p;
    p.heads = heads;
    p.norm_gain = Tensor::full({dim}, 1.0, true);
    p.norm_bias = Tensor::zeros({dim}, true);
    p.w_q = normal_matrix(dim, dim, stddev, rng);
    p.w_k = normal_matrix(dim, dim, stddev, rng);
    p.w_v = normal_matrix(dim, dim, stddev, rng);
    p.w_o = normal_matrix(dim, dim, stddev, rng);
    p.b_q = Tensor::zeros({dim}, true);
    p.b_k = Tensor::zeros({dim}, true);
    p.b_v = Tensor::zeros({dim}, true);
    p.b_o = Tensor::zeros({dim}, true);
    return p;
}

std::vector<Tensor> AttentionParams::parameters() const {
    return {norm_gain, norm_bias, w_q, w_k, w_v, w_o, b_q, b_k, b_v, b_o};
}

Tensor attention_block(const Tensor& x, const AttentionParams& p, std::size_t frames) {
    if (x.rank() != 2 || x.cols() != p.dim()) {
        throw DimensionError("attention_block: input " + shape_to_string(x.shape()) +
                             " does not match width " + std::to_string(p.dim()));
    }
    const Tensor n = layer_norm(x, p.norm_gain, p.norm_bias);
    const Tensor q = add_bias(matmul(n, p.w_q), p.b_q);
    const Tensor k = add_bias(matmul(n, p.w_k), p.b_k);
    const Tensor v = add_bias(matmul(n, p.w_v), p.b_v);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(p.dim() / p.heads));
    const Tensor scores = scale(attention_scores(q, k, frames, p.heads), inv_sqrt);
    // [B*T x heads*T] viewed as [B*T x heads x T] so softmax runs per head
    const Tensor probs = reshape(
        softmax(reshape(scores, {scores.rows(), p.heads, frames}), 2), {scores.rows(), p.heads * frames});
    const Tensor mixed = attention_mix(probs, v, frames, p.heads);
    return add(x, add_bias(matmul(mixed, p.w_o), p.b_o));
}

}  // namespace mote

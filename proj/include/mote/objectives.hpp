// SPDX-License-Identifier: Apache-2.0
//
// Training losses: the routed task loss, the merged-weights regulariser and
// the spatial consistency term, plus their weighted combination.

#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mote/backbone.hpp"
#include "mote/mote.hpp"
#include "mote/tensor.hpp"

namespace mote {

/// Raised when a loss or gradient stops being finite.
class NumericDivergence : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct LossWeights {
    double lambda = 0.5;  // merged-weights regulariser
    double eta = 0.1;     // spatial consistency

    void validate() const;
};

enum class WmrKind { cross_entropy, kl, mse };
std::string to_string(WmrKind k);
WmrKind wmr_kind_from_string(const std::string& s);

/// Frozen frame embeddings for B videos packed as [B*T x D].
struct EncodedBatch {
    Tensor embeddings;
    std::vector<ClassId> labels;
    std::size_t frames = 1;

    std::size_t size() const { return labels.size(); }
    /// Mean over frames, [B x D].
    Tensor pooled() const;
};

/// Row index in `bank` of every label; std::out_of_range if one is missing.
std::vector<std::size_t> bank_targets(std::span<const ClassId> labels, const EmbeddingBank& bank);

/// Routed-path video features and logits, reused as supervision by the
/// KL and MSE regulariser kinds.
struct RoutedPass {
    Tensor z;       // [B x D]
    Tensor logits;  // [B x C]
    Tensor loss;    // scalar task loss
};

RoutedPass routed_pass(const MoteStack& stack, const EncodedBatch& batch, const RoutingDecision& decision,
                       const EmbeddingBank& bank, double temperature);

/// Mean cross-entropy of the routed-path logits.
Tensor loss_te(const MoteStack& stack, const EncodedBatch& batch, const RoutingDecision& decision,
               const EmbeddingBank& bank, double temperature);

struct WmrResult {
    Tensor loss;
    Tensor z_r;  // merged-path video features [B x D]
};

/// Loss through the merged stack. cross_entropy: task loss on labels. kl:
/// KL(routed || merged) over classes with routed probabilities detached.
/// mse: mean squared error to the detached routed features.
WmrResult loss_wmr(const MoteStack& stack, const EncodedBatch& batch, std::span<const Tau> per_layer,
                   const EmbeddingBank& bank, double temperature, WmrKind kind, const RoutedPass& routed);
WmrResult loss_wmr(const MoteStack& stack, const EncodedBatch& batch, Tau tau, const EmbeddingBank& bank,
                   double temperature, WmrKind kind, const RoutedPass& routed);

/// Squared L2 distance summed over features, averaged over the batch.
Tensor loss_mse(const Tensor& z_r, const Tensor& e_pooled);

/// te + lambda * wmr + eta * mse. Terms with zero weight may be undefined
/// tensors. Throws NumericDivergence if any used term or the total is not
/// finite.
Tensor loss_all(const Tensor& te, const Tensor& wmr, const Tensor& mse, const LossWeights& w);

}  // namespace mote

// SPDX-License-Identifier: Apache-2.0

#include "mote/objectives.hpp"

#include <cmath>

#include "mote/ops.hpp"

namespace mote {

namespace {

void require_finite(const Tensor& t, const char* what) {
    for (double v : t.data())
        if (!std::isfinite(v)) throw NumericDivergence(std::string(what) + " is not finite");
}

}  // namespace

void LossWeights::validate() const {
    if (!(lambda >= 0.0) || !(eta >= 0.0) || !std::isfinite(lambda) || !std::isfinite(eta)) {
        throw std::invalid_argument("loss weights must be finite and non-negative");
    }
}

std::string to_string(WmrKind k) {
    switch (k) {
        case WmrKind::cross_entropy: return "ce";
        case WmrKind::kl: return "kl";
        case WmrKind::mse: return "mse";
    }
    return "unknown";
}

WmrKind wmr_kind_from_string(const std::string& s) {
    if (s == "ce") return WmrKind::cross_entropy;
    if (s == "kl") return WmrKind::kl;
    if (s == "mse") return WmrKind::mse;
    throw std::invalid_argument("unknown regulariser kind '" + s + "'");
}

Tensor EncodedBatch::pooled() const { return pooled_spatial(embeddings, frames); }

std::vector<std::size_t> bank_targets(std::span<const ClassId> labels, const EmbeddingBank& bank) {
    std::vector<std::size_t> out;
    out.reserve(labels.size());
    for (ClassId l : labels) out.push_back(bank.index_of(l));
    return out;
}

RoutedPass routed_pass(const MoteStack& stack, const EncodedBatch& batch, const RoutingDecision& decision,
                       const EmbeddingBank& bank, double temperature) {
    const auto targets = bank_targets(batch.labels, bank);
    RoutedPass out;
    out.z = video_embedding(batch.embeddings, forward_routed(stack, batch.embeddings, decision), batch.frames);
    out.logits = similarity_logits(out.z, bank, temperature);
    out.loss = cross_entropy(out.logits, targets);
    return out;
}

Tensor loss_te(const MoteStack& stack, const EncodedBatch& batch, const RoutingDecision& decision,
               const EmbeddingBank& bank, double temperature) {
    return routed_pass(stack, batch, decision, bank, temperature).loss;
}

WmrResult loss_wmr(const MoteStack& stack, const EncodedBatch& batch, std::span<const Tau> per_layer,
                   const EmbeddingBank& bank, double temperature, WmrKind kind, const RoutedPass& routed) {
    for (const auto& t : per_layer)
        if (!t.is_infinite() && t.value() == 0.0) throw std::invalid_argument("merge temperature is zero");
    WmrResult out;
    out.z_r = video_embedding(batch.embeddings, forward_merged(stack, batch.embeddings, per_layer), batch.frames);
    switch (kind) {
        case WmrKind::cross_entropy: {
            const auto targets = bank_targets(batch.labels, bank);
            out.loss = cross_entropy(similarity_logits(out.z_r, bank, temperature), targets);
            break;
        }
        case WmrKind::kl: {
            const Tensor target = softmax(routed.logits.detach(), 1);
            out.loss = kl_divergence(target, similarity_logits(out.z_r, bank, temperature));
            break;
        }
        case WmrKind::mse: out.loss = mse(out.z_r, routed.z.detach()); break;
    }
    return out;
}

WmrResult loss_wmr(const MoteStack& stack, const EncodedBatch& batch, Tau tau, const EmbeddingBank& bank,
                   double temperature, WmrKind kind, const RoutedPass& routed) {
    const std::vector<Tau> per_layer(stack.layer_count(), tau);
    return loss_wmr(stack, batch, per_layer, bank, temperature, kind, routed);
}

Tensor loss_mse(const Tensor& z_r, const Tensor& e_pooled) {
    return mean_all(squared_distance(z_r, e_pooled.detach()));
}

Tensor loss_all(const Tensor& te, const Tensor& wmr, const Tensor& mse_term, const LossWeights& w) {
    w.validate();
    require_finite(te, "task loss");
    Tensor total = te;
    if (w.lambda > 0.0) {
        require_finite(wmr, "merged-weights loss");
        total = add(total, scale(wmr, w.lambda));
    }
    if (w.eta > 0.0) {
        require_finite(mse_term, "spatial consistency loss");
        total = add(total, scale(mse_term, w.eta));
    }
    require_finite(total, "total loss");
    return total;
}

}  // namespace mote

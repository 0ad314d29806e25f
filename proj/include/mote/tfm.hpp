// SPDX-License-Identifier: Apache-2.0
//
// Test-time temporal feature modulation. The temporal feature is scaled by
// rho in (0, 1], a score of how close the nearest fine-tuning class
// embeddings are to the nearest test class embeddings of a video.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mote/backbone.hpp"
#include "mote/tensor.hpp"

namespace mote {

/// Which proxy set the max runs over before averaging over the other.
enum class AssociationPooling {
    max_over_fine_tuning,  // for each test proxy take its best fine-tuning match
    max_over_test,         // for each fine-tuning proxy take its best test match
};
std::string to_string(AssociationPooling p);
AssociationPooling association_pooling_from_string(const std::string& s);

struct TfmConfig {
    std::size_t k_neighbors = 5;
    double gamma = 0.05;
    bool enabled = true;
    AssociationPooling pooling = AssociationPooling::max_over_fine_tuning;

    void validate() const;
    /// Also checks k against the sizes of the banks it will search.
    void validate(const EmbeddingBank& fine_tuning, const EmbeddingBank& test) const;
};

/// Bank row indices ordered by descending cosine similarity to `e_pooled`;
/// ties keep the lower index first. Throws std::domain_error for a zero vector.
std::vector<std::size_t> nearest_rows(const Tensor& e_pooled, const EmbeddingBank& bank, std::size_t k);

/// The k nearest bank rows as [k x D].
Tensor retrieve_proxies(const Tensor& e_pooled, const EmbeddingBank& bank, std::size_t k);

/// M: max then mean pooling of the proxy similarity matrix y_t y_f^T.
/// Bitwise-equal rows count as similarity 1 and values are clamped to [-1, 1].
double association_score(const Tensor& y_t, const Tensor& y_f,
                         AssociationPooling pooling = AssociationPooling::max_over_fine_tuning);

/// exp(-(1 - M) / gamma).
double semantic_association(const Tensor& y_t, const Tensor& y_f, double gamma,
                            AssociationPooling pooling = AssociationPooling::max_over_fine_tuning);
double rho_from_score(double m, double gamma);

/// e + rho * t. Requires 0 < rho <= 1.
Tensor modulated_embedding(const Tensor& e_pooled, const Tensor& t_pooled, double rho);

/// rho for every row of e_pooled [B x D]; all ones when TFM is disabled.
std::vector<double> batch_rho(const Tensor& e_pooled, const EmbeddingBank& fine_tuning,
                              const EmbeddingBank& test, const TfmConfig& config);

/// Row-wise e + rho_b * t for [B x D] inputs.
Tensor modulate_batch(const Tensor& e_pooled, const Tensor& t_pooled, const std::vector<double>& rho);

}  // namespace mote

// SPDX-License-Identifier: Apache-2.0
//
// Frozen stand-ins for a pretrained image-text model: a per-frame encoder and
// fixed unit-norm class embedding banks. Nothing here is ever trained.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mote/tensor.hpp"

namespace mote {

using ClassId = int;

/// Fixed random projection followed by a fixed layer normalisation.
class FrozenEncoder {
public:
    FrozenEncoder(std::size_t raw_dim, std::size_t dim, std::uint64_t seed);

    std::size_t raw_dim() const { return raw_dim_; }
    std::size_t dim() const { return dim_; }
    std::uint64_t seed() const { return seed_; }
    const Tensor& projection() const { return projection_; }
    const Tensor& norm_gain() const { return norm_gain_; }
    const Tensor& norm_bias() const { return norm_bias_; }

private:
    std::size_t raw_dim_, dim_;
    std::uint64_t seed_;
    Tensor projection_;  // [raw_dim x dim]
    Tensor norm_gain_, norm_bias_;
};

/// Maps raw frames [T x raw_dim] to embeddings [T x D], one frame at a time.
/// The result never participates in the tape.
Tensor encode_frames(const Tensor& video, const FrozenEncoder& encoder);

/// Mean over frames. Accepts a single video [T x D] (returns [D]) or a packed
/// batch [B*T x D] with `frames` = T (returns [B x D]).
Tensor pooled_spatial(const Tensor& embeddings);
Tensor pooled_spatial(const Tensor& embeddings, std::size_t frames);

enum class BankRole { fine_tuning, test, mixed };

std::string to_string(BankRole role);
BankRole bank_role_from_string(const std::string& s);

class EmbeddingBank {
public:
    /// Validates unique labels and unit-norm rows (within 1e-9).
    EmbeddingBank(std::vector<ClassId> labels, Tensor vectors, BankRole role, std::uint64_t seed);

    /// Seeded isotropic Gaussian rows, L2-normalised.
    static EmbeddingBank random(std::vector<ClassId> labels, std::size_t dim, BankRole role,
                                std::uint64_t seed);

    const std::vector<ClassId>& labels() const { return labels_; }
    const Tensor& vectors() const { return vectors_; }
    /// [D x C], kept alongside for logit computation.
    const Tensor& vectors_t() const { return vectors_t_; }
    BankRole role() const { return role_; }
    std::uint64_t seed() const { return seed_; }
    std::size_t size() const { return labels_.size(); }
    std::size_t dim() const { return vectors_.cols(); }

    std::optional<std::size_t> find(ClassId label) const;
    /// Row index of `label`; throws std::out_of_range if absent.
    std::size_t index_of(ClassId label) const;
    bool contains(ClassId label) const { return find(label).has_value(); }
    std::vector<double> row(std::size_t i) const;

    nlohmann::json to_json() const;
    static EmbeddingBank from_json(const nlohmann::json& j);

private:
    std::vector<ClassId> labels_;
    Tensor vectors_;
    Tensor vectors_t_;
    BankRole role_;
    std::uint64_t seed_;
};

/// Test-bank rows as renormalised perturbed mixtures of two fine-tuning rows:
/// normalize(mix * y_a + (1 - mix) * y_b + sigma * n), with n a Gaussian whose
/// expected norm is 1.
EmbeddingBank derive_mixture_bank(const EmbeddingBank& fine_tuning, std::vector<ClassId> labels,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& parents,
                                  std::uint64_t seed, double mix = 0.5, double sigma = 0.3);

/// Cosine similarity of z to every bank row divided by `temperature`.
/// z may be [D] (result [C]) or [B x D] (result [B x C]); differentiable in z.
/// Throws std::domain_error for a zero-norm z.
Tensor similarity_logits(const Tensor& z, const EmbeddingBank& bank, double temperature);

inline constexpr double kDefaultTemperature = 0.07;

}  // namespace mote

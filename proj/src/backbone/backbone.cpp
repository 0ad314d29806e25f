// SPDX-License-Identifier: Apache-2.0

#include "mote/backbone.hpp"

#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "mote/ops.hpp"

namespace mote {

namespace {

std::vector<double> gaussian(std::size_t n, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

void normalize_in_place(std::span<double> row) {
    double acc = 0.0;
    for (double v : row) acc += v * v;
    const double norm = std::sqrt(acc);
    if (norm == 0.0) throw std::domain_error("cannot normalise a zero vector");
    for (auto& v : row) v /= norm;
}

}  // namespace

FrozenEncoder::FrozenEncoder(std::size_t raw_dim, std::size_t dim, std::uint64_t seed)
    : raw_dim_(raw_dim), dim_(dim), seed_(seed) {
    if (raw_dim == 0 || dim == 0) throw std::invalid_argument("encoder dimensions must be positive");
    std::mt19937_64 rng(seed);
    projection_ = Tensor({raw_dim, dim}, gaussian(raw_dim * dim, 1.0 / std::sqrt(double(raw_dim)), rng));
    auto gain = gaussian(dim, 0.1, rng);
    for (auto& g : gain) g += 1.0;
    norm_gain_ = Tensor({dim}, std::move(gain));
    norm_bias_ = Tensor({dim}, gaussian(dim, 0.1, rng));
}

Tensor encode_frames(const Tensor& video, const FrozenEncoder& encoder) {
    if (video.rank() != 2 || video.cols() != encoder.raw_dim()) {
        throw DimensionError("encode_frames: video " + shape_to_string(video.shape()) +
                             " does not have raw width " + std::to_string(encoder.raw_dim()));
    }
    if (video.rows() == 0) throw DimensionError("encode_frames: video has no frames");
    NoGradGuard guard;
    return layer_norm(matmul(video.detach(), encoder.projection()), encoder.norm_gain(),
                      encoder.norm_bias());
}

Tensor pooled_spatial(const Tensor& embeddings) {
    if (embeddings.rank() != 2 || embeddings.rows() == 0) {
        throw DimensionError("pooled_spatial: expected [T x D] with T >= 1, got " +
                             shape_to_string(embeddings.shape()));
    }
    return mean(embeddings, 0);
}

Tensor pooled_spatial(const Tensor& embeddings, std::size_t frames) {
    if (embeddings.rank() != 2 || frames == 0 || embeddings.rows() % frames != 0) {
        throw DimensionError("pooled_spatial: " + shape_to_string(embeddings.shape()) +
                             " is not a batch of " + std::to_string(frames) + "-frame videos");
    }
    const std::size_t batch = embeddings.rows() / frames;
    return mean(reshape(embeddings, {batch, frames, embeddings.cols()}), 1);
}

std::string to_string(BankRole role) {
    switch (role) {
        case BankRole::fine_tuning: return "fine-tuning";
        case BankRole::test: return "test";
        case BankRole::mixed: return "mixed";
    }
    return "unknown";
}

BankRole bank_role_from_string(const std::string& s) {
    if (s == "fine-tuning") return BankRole::fine_tuning;
    if (s == "test") return BankRole::test;
    if (s == "mixed") return BankRole::mixed;
    throw std::invalid_argument("unknown bank role '" + s + "'");
}

EmbeddingBank::EmbeddingBank(std::vector<ClassId> labels, Tensor vectors, BankRole role,
                             std::uint64_t seed)
    : labels_(std::move(labels)), vectors_(vectors.detach()), role_(role), seed_(seed) {
    if (vectors_.rank() != 2 || vectors_.rows() != labels_.size()) {
        throw DimensionError("embedding bank: " + std::to_string(labels_.size()) + " labels for " +
                             shape_to_string(vectors_.shape()) + " vectors");
    }
    if (labels_.empty()) throw std::invalid_argument("embedding bank must not be empty");
    std::set<ClassId> seen;
    for (auto l : labels_) {
        if (!seen.insert(l).second) {
            throw std::invalid_argument("duplicate label " + std::to_string(l) + " in embedding bank");
        }
    }
    const std::size_t d = vectors_.cols();
    for (std::size_t r = 0; r < labels_.size(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += vectors_.at(r, c) * vectors_.at(r, c);
        if (std::abs(std::sqrt(acc) - 1.0) > 1e-9) {
            throw std::invalid_argument("embedding bank row " + std::to_string(r) +
                                        " is not unit norm");
        }
    }
    NoGradGuard guard;
    vectors_t_ = transpose(vectors_);
}

EmbeddingBank EmbeddingBank::random(std::vector<ClassId> labels, std::size_t dim, BankRole role,
                                    std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = labels.size();
    auto v = gaussian(n * dim, 1.0, rng);
    for (std::size_t r = 0; r < n; ++r) normalize_in_place(std::span<double>(v).subspan(r * dim, dim));
    return EmbeddingBank(std::move(labels), Tensor({n, dim}, std::move(v)), role, seed);
}

std::optional<std::size_t> EmbeddingBank::find(ClassId label) const {
    for (std::size_t i = 0; i < labels_.size(); ++i)
        if (labels_[i] == label) return i;
    return std::nullopt;
}

std::size_t EmbeddingBank::index_of(ClassId label) const {
    const auto i = find(label);
    if (!i) {
        throw std::out_of_range("class " + std::to_string(label) + " is not in the " +
                                to_string(role_) + " bank");
    }
    return *i;
}

std::vector<double> EmbeddingBank::row(std::size_t i) const {
    const std::size_t d = dim();
    const auto v = vectors_.data();
    return {v.begin() + static_cast<std::ptrdiff_t>(i * d),
            v.begin() + static_cast<std::ptrdiff_t>((i + 1) * d)};
}

nlohmann::json EmbeddingBank::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < size(); ++i) rows.push_back(row(i));
    return {{"labels", labels_}, {"vectors", rows}, {"seed", seed_}, {"role", to_string(role_)}};
}

EmbeddingBank EmbeddingBank::from_json(const nlohmann::json& j) {
    auto labels = j.at("labels").get<std::vector<ClassId>>();
    const auto rows = j.at("vectors").get<std::vector<std::vector<double>>>();
    return EmbeddingBank(std::move(labels), Tensor::matrix(rows),
                         bank_role_from_string(j.at("role").get<std::string>()),
                         j.at("seed").get<std::uint64_t>());
}

EmbeddingBank derive_mixture_bank(const EmbeddingBank& fine_tuning, std::vector<ClassId> labels,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& parents,
                                  std::uint64_t seed, double mix, double sigma) {
    if (labels.size() != parents.size()) {
        throw std::invalid_argument("derive_mixture_bank: one parent pair per label required");
    }
    const std::size_t d = fine_tuning.dim();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma / std::sqrt(double(d)));
    std::vector<double> v;
    v.reserve(labels.size() * d);
    for (const auto& [a, b] : parents) {
        const auto ya = fine_tuning.row(a);
        const auto yb = fine_tuning.row(b);
        std::vector<double> y(d);
        for (std::size_t c = 0; c < d; ++c) y[c] = mix * ya[c] + (1.0 - mix) * yb[c] + noise(rng);
        normalize_in_place(y);
        v.insert(v.end(), y.begin(), y.end());
    }
    const std::size_t n = labels.size();
    return EmbeddingBank(std::move(labels), Tensor({n, d}, std::move(v)), BankRole::test, seed);
}

Tensor similarity_logits(const Tensor& z, const EmbeddingBank& bank, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (z.rank() == 1) {
        const Tensor row = reshape(z, {1, z.dim(0)});
        return reshape(similarity_logits(row, bank, temperature), {bank.size()});
    }
    if (z.rank() != 2 || z.cols() != bank.dim()) {
        throw DimensionError("similarity_logits: feature " + shape_to_string(z.shape()) +
                             " does not match bank width " + std::to_string(bank.dim()));
    }
    return scale(matmul(normalize_rows(z), bank.vectors_t()), 1.0 / temperature);
}

}  // namespace mote

// SPDX-License-Identifier: Apache-2.0

#include "mote/tfm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mote/ops.hpp"

namespace mote {

namespace {

double cosine_to_row(std::span<const double> unit_e, const EmbeddingBank& bank, std::size_t r) {
    const auto v = bank.vectors().data();
    const std::size_t d = bank.dim();
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += unit_e[c] * v[r * d + c];
    return acc;
}

double proxy_similarity(std::span<const double> a, std::span<const double> b) {
    if (std::equal(a.begin(), a.end(), b.begin())) return 1.0;
    double acc = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) acc += a[c] * b[c];
    return std::clamp(acc, -1.0, 1.0);
}

}  // namespace

std::string to_string(AssociationPooling p) {
    return p == AssociationPooling::max_over_fine_tuning ? "max-over-fine-tuning" : "max-over-test";
}

AssociationPooling association_pooling_from_string(const std::string& s) {
    if (s == "max-over-fine-tuning") return AssociationPooling::max_over_fine_tuning;
    if (s == "max-over-test") return AssociationPooling::max_over_test;
    throw std::invalid_argument("unknown association pooling '" + s + "'");
}

void TfmConfig::validate() const {
    if (k_neighbors == 0) throw std::invalid_argument("tfm k must be at least 1");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("tfm gamma must be positive");
}

void TfmConfig::validate(const EmbeddingBank& fine_tuning, const EmbeddingBank& test) const {
    validate();
    if (k_neighbors > std::min(fine_tuning.size(), test.size())) {
        throw std::invalid_argument("tfm k = " + std::to_string(k_neighbors) + " exceeds a bank size");
    }
}

std::vector<std::size_t> nearest_rows(const Tensor& e_pooled, const EmbeddingBank& bank, std::size_t k) {
    if (e_pooled.numel() != bank.dim()) {
        throw DimensionError("nearest_rows: feature " + shape_to_string(e_pooled.shape()) +
                             " does not match bank width " + std::to_string(bank.dim()));
    }
    if (k == 0 || k > bank.size()) {
        throw std::invalid_argument("cannot retrieve " + std::to_string(k) + " of " +
                                    std::to_string(bank.size()) + " rows");
    }
    std::vector<double> unit(e_pooled.data().begin(), e_pooled.data().end());
    double norm = 0.0;
    for (double v : unit) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw std::domain_error("cannot retrieve proxies for a zero-norm feature");
    for (auto& v : unit) v /= norm;

    std::vector<double> sim(bank.size());
    for (std::size_t r = 0; r < bank.size(); ++r) sim[r] = cosine_to_row(unit, bank, r);
    std::vector<std::size_t> order(bank.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
    order.resize(k);
    return order;
}

Tensor retrieve_proxies(const Tensor& e_pooled, const EmbeddingBank& bank, std::size_t k) {
    const auto rows = nearest_rows(e_pooled, bank, k);
    NoGradGuard guard;
    return gather_rows(bank.vectors(), rows);
}

double association_score(const Tensor& y_t, const Tensor& y_f, AssociationPooling pooling) {
    if (y_t.rank() != 2 || y_f.rank() != 2 || y_t.cols() != y_f.cols() || y_t.rows() == 0 || y_f.rows() == 0) {
        throw DimensionError("association_score: " + shape_to_string(y_t.shape()) + " vs " +
                             shape_to_string(y_f.shape()));
    }
    const std::size_t d = y_t.cols();
    const auto t = y_t.data();
    const auto f = y_f.data();
    const bool over_ft = pooling == AssociationPooling::max_over_fine_tuning;
    const std::size_t outer = over_ft ? y_t.rows() : y_f.rows();
    const std::size_t inner = over_ft ? y_f.rows() : y_t.rows();
    double total = 0.0;
    for (std::size_t i = 0; i < outer; ++i) {
        double best = -1.0;
        for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t ti = over_ft ? i : j;
            const std::size_t fj = over_ft ? j : i;
            best = std::max(best, proxy_similarity(t.subspan(ti * d, d), f.subspan(fj * d, d)));
        }
        total += best;
    }
    return total / static_cast<double>(outer);
}

double rho_from_score(double m, double gamma) {
    if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
    return std::exp(-(1.0 - m) / gamma);
}

double semantic_association(const Tensor& y_t, const Tensor& y_f, double gamma, AssociationPooling pooling) {
    return rho_from_score(association_score(y_t, y_f, pooling), gamma);
}

Tensor modulated_embedding(const Tensor& e_pooled, const Tensor& t_pooled, double rho) {
    if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("rho must lie in (0, 1]");
    return add(e_pooled, scale(t_pooled, rho));
}

std::vector<double> batch_rho(const Tensor& e_pooled, const EmbeddingBank& fine_tuning,
                              const EmbeddingBank& test, const TfmConfig& config) {
    if (e_pooled.rank() != 2) throw DimensionError("batch_rho expects [B x D]");
    std::vector<double> out(e_pooled.rows(), 1.0);
    if (!config.enabled) return out;
    config.validate(fine_tuning, test);
    const std::size_t d = e_pooled.cols();
    for (std::size_t b = 0; b < e_pooled.rows(); ++b) {
        const auto row = e_pooled.data().subspan(b * d, d);
        const Tensor e({d}, std::vector<double>(row.begin(), row.end()));
        out[b] = semantic_association(retrieve_proxies(e, test, config.k_neighbors),
                                      retrieve_proxies(e, fine_tuning, config.k_neighbors), config.gamma,
                                      config.pooling);
    }
    return out;
}

Tensor modulate_batch(const Tensor& e_pooled, const Tensor& t_pooled, const std::vector<double>& rho) {
    if (e_pooled.shape() != t_pooled.shape() || e_pooled.rank() != 2 || rho.size() != e_pooled.rows()) {
        throw DimensionError("modulate_batch: " + shape_to_string(e_pooled.shape()) + " vs " +
                             shape_to_string(t_pooled.shape()));
    }
    const std::size_t d = e_pooled.cols();
    std::vector<double> out(e_pooled.numel());
    const auto e = e_pooled.data();
    const auto t = t_pooled.data();
    for (std::size_t b = 0; b < rho.size(); ++b) {
        if (!(rho[b] > 0.0 && rho[b] <= 1.0)) throw std::invalid_argument("rho must lie in (0, 1]");
        for (std::size_t c = 0; c < d; ++c) out[b * d + c] = e[b * d + c] + rho[b] * t[b * d + c];
    }
    return Tensor(e_pooled.shape(), std::move(out));
}

}  // namespace mote

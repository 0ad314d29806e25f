// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include "doctest.h"
#include "mote/ops.hpp"
#include "mote/tfm.hpp"

using namespace mote;

namespace {

EmbeddingBank axes(std::size_t n) {
    std::vector<std::vector<double>> rows(n, std::vector<double>(n, 0.0));
    std::vector<ClassId> labels;
    for (std::size_t i = 0; i < n; ++i) {
        rows[i][i] = 1.0;
        labels.push_back(static_cast<ClassId>(i));
    }
    return EmbeddingBank(labels, Tensor::matrix(rows), BankRole::test, 0);
}

EmbeddingBank random_bank(std::size_t n, std::size_t dim, std::uint64_t seed, ClassId first = 0) {
    std::vector<ClassId> labels;
    for (std::size_t i = 0; i < n; ++i) labels.push_back(first + static_cast<ClassId>(i));
    return EmbeddingBank::random(labels, dim, BankRole::fine_tuning, seed);
}

Tensor random_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = n(rng);
    return Tensor({rows, cols}, std::move(v));
}

}  // namespace

TEST_CASE("nearest proxies") {
    const auto bank = axes(3);
    SUBCASE("hand ranking on axes") {
        const Tensor e = Tensor::vector({0.9, 0.1, 0.0});
        CHECK(nearest_rows(e, bank, 2) == std::vector<std::size_t>{0, 1});
        const Tensor p = retrieve_proxies(e, bank, 2);
        CHECK(p.shape() == Shape{2, 3});
        CHECK(p.at(0, 0) == 1.0);
        CHECK(p.at(1, 1) == 1.0);
    }
    SUBCASE("ties keep the lower index") {
        CHECK(nearest_rows(Tensor::vector({0.5, 0.5, 0.5}), bank, 3) == std::vector<std::size_t>{0, 1, 2});
        CHECK(nearest_rows(Tensor::vector({0.0, 0.7, 0.7}), bank, 2) == std::vector<std::size_t>{1, 2});
    }
    SUBCASE("a bank row retrieves itself first") {
        const auto b = random_bank(7, 5, 3);
        for (std::size_t j = 0; j < 7; ++j) {
            const auto row = b.row(j);
            CHECK(nearest_rows(Tensor::vector(row), b, 1).front() == j);
        }
    }
    SUBCASE("full bank is a permutation sorted by similarity") {
        const auto b = random_bank(6, 4, 8);
        const Tensor e = Tensor::vector({0.3, -1.2, 0.8, 0.1});
        const auto order = nearest_rows(e, b, 6);
        std::vector<std::size_t> sorted = order;
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
        const Tensor logits = similarity_logits(e, b, 1.0);
        for (std::size_t i = 1; i < 6; ++i) CHECK(logits.at(order[i - 1]) >= logits.at(order[i]));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(nearest_rows(Tensor::vector({0, 0, 0}), bank, 1), std::domain_error);
        CHECK_THROWS_AS(nearest_rows(Tensor::vector({1, 0, 0}), bank, 4), std::invalid_argument);
        CHECK_THROWS_AS(nearest_rows(Tensor::vector({1, 0, 0}), bank, 0), std::invalid_argument);
        CHECK_THROWS_AS(nearest_rows(Tensor::vector({1, 0}), bank, 1), DimensionError);
    }
}

TEST_CASE("semantic association examples") {
    const auto b = random_bank(5, 6, 4);
    const Tensor y = b.vectors();
    CHECK(association_score(y, y) == 1.0);
    CHECK(semantic_association(y, y, 0.05) == 1.0);

    CHECK(rho_from_score(0.9, 0.05) == doctest::Approx(std::exp(-2.0)).epsilon(1e-12));
    CHECK(std::abs(rho_from_score(0.9, 0.05) - 0.1353352832366127) < 1e-12);

    const Tensor a = Tensor::matrix({{1, 0, 0, 0}, {0, 1, 0, 0}});
    const Tensor o = Tensor::matrix({{0, 0, 1, 0}, {0, 0, 0, 1}});
    CHECK(association_score(a, o) == 0.0);
    CHECK(semantic_association(a, o, 0.05) == doctest::Approx(std::exp(-1.0 / 0.05)).epsilon(1e-12));
}

TEST_CASE("association pooling conventions") {
    // Test proxies: x and y axes; fine-tuning proxies: x axis and a vector
    // at 60 degrees from y.
    const double c = 0.5, s = std::sqrt(3.0) / 2.0;
    const Tensor y_t = Tensor::matrix({{1, 0}, {0, 1}});
    const Tensor y_f = Tensor::matrix({{1, 0}, {s, c}});
    // For each test row, best fine-tuning match: 1 and c; mean (1 + c) / 2.
    CHECK(association_score(y_t, y_f, AssociationPooling::max_over_fine_tuning) ==
          doctest::Approx((1.0 + c) / 2.0).epsilon(1e-15));
    // For each fine-tuning row, best test match: 1 and s.
    CHECK(association_score(y_t, y_f, AssociationPooling::max_over_test) ==
          doctest::Approx((1.0 + s) / 2.0).epsilon(1e-15));
    for (auto p : {AssociationPooling::max_over_fine_tuning, AssociationPooling::max_over_test})
        CHECK(association_pooling_from_string(to_string(p)) == p);
    CHECK_THROWS(association_pooling_from_string("mean"));
}

TEST_CASE("association score stays in range and rho in (0, 1]") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor y_t = normalize_rows(random_rows(1 + trial % 5, 4, rng));
        const Tensor y_f = normalize_rows(random_rows(1 + (trial / 5) % 5, 4, rng));
        const double m = association_score(y_t, y_f);
        CHECK(m >= -1.0);
        CHECK(m <= 1.0);
        const double rho = semantic_association(y_t, y_f, 0.05);
        CHECK(rho > 0.0);
        CHECK(rho <= 1.0);
    }
}

TEST_CASE("rho monotonicity") {
    double prev = 0.0;
    for (int i = -10; i <= 10; ++i) {
        const double r = rho_from_score(i / 10.0, 0.05);
        CHECK(r >= prev);
        prev = r;
    }
    for (double m : {-0.5, 0.0, 0.5, 0.99}) {
        double last = 0.0;
        for (double g : {0.01, 0.05, 0.1, 0.5, 2.0}) {
            const double r = rho_from_score(m, g);
            CHECK(r > last);
            last = r;
        }
    }
    CHECK(rho_from_score(1.0, 0.01) == 1.0);
    CHECK_THROWS_AS(rho_from_score(0.5, 0.0), std::invalid_argument);
}

TEST_CASE("modulated embedding") {
    const Tensor e = Tensor::vector({1, 0});
    const Tensor t = Tensor::vector({0, 2});
    const Tensor z = modulated_embedding(e, t, 0.5);
    CHECK(z.at(0) == 1.0);
    CHECK(z.at(1) == 1.0);
    const Tensor full = modulated_embedding(e, t, 1.0);
    CHECK(full.at(1) == 2.0);
    const Tensor tiny = modulated_embedding(e, t, 1e-300);
    CHECK(tiny.at(0) == 1.0);
    CHECK(tiny.at(1) < 1e-299);
    CHECK_THROWS_AS(modulated_embedding(e, t, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(modulated_embedding(e, t, 1.5), std::invalid_argument);
}

TEST_CASE("global temporal scaling is absorbed by rho") {
    std::mt19937_64 rng(3);
    const Tensor e = random_rows(4, 5, rng);
    const Tensor t = random_rows(4, 5, rng);
    const std::vector<double> rho = {0.5, 0.25, 1.0, 0.125};
    const double c = 4.0;
    std::vector<double> rho_c;
    for (double r : rho) rho_c.push_back(r / c);
    const Tensor a = modulate_batch(e, t, rho);
    const Tensor b = modulate_batch(e, scale(t, c), rho_c);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("batch rho") {
    const auto ft = random_bank(12, 16, 1);
    const auto test = random_bank(8, 16, 2, 12);
    std::mt19937_64 rng(4);
    const Tensor e = random_rows(10, 16, rng);
    TfmConfig cfg;

    SUBCASE("identical banks give exactly one") {
        for (double r : batch_rho(e, ft, ft, cfg)) CHECK(r == 1.0);
    }
    SUBCASE("disabled gives ones") {
        cfg.enabled = false;
        for (double r : batch_rho(e, ft, test, cfg)) CHECK(r == 1.0);
    }
    SUBCASE("distinct banks give per-row values in (0, 1)") {
        const auto rho = batch_rho(e, ft, test, cfg);
        REQUIRE(rho.size() == 10);
        for (std::size_t b = 0; b < 10; ++b) {
            CHECK(rho[b] > 0.0);
            CHECK(rho[b] < 1.0);
            const Tensor row = Tensor::vector({e.data().begin() + static_cast<std::ptrdiff_t>(b * 16),
                                               e.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * 16)});
            CHECK(rho[b] == semantic_association(retrieve_proxies(row, test, 5), retrieve_proxies(row, ft, 5), 0.05));
        }
    }
    SUBCASE("modulation with unit rho is the plain sum") {
        const Tensor t = random_rows(10, 16, rng);
        const Tensor z = modulate_batch(e, t, batch_rho(e, ft, ft, cfg));
        const Tensor plain = add(e, t);
        for (std::size_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) == plain.at(i));
    }
    SUBCASE("invalid settings") {
        cfg.k_neighbors = 9;
        CHECK_THROWS(batch_rho(e, ft, test, cfg));
        cfg.k_neighbors = 0;
        CHECK_THROWS(cfg.validate());
        cfg.k_neighbors = 5;
        cfg.gamma = 0.0;
        CHECK_THROWS(cfg.validate());
    }
}

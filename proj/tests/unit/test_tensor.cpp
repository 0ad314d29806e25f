// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "mote/attention.hpp"
#include "mote/ops.hpp"
#include "mote/tensor.hpp"
#include "../support/gradcheck.hpp"

using namespace mote;
using mote::testing::gradcheck;
using mote::testing::probe;
using mote::testing::random_tensor;

TEST_CASE("tensor shape invariant") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    const Tensor t = Tensor::zeros({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK_FALSE(t.has_grad());
}

TEST_CASE("matmul examples") {
    const Tensor m = Tensor::matrix({{1.5, -2.0}, {0.25, 4.0}});
    const Tensor id = Tensor::matrix({{1, 0}, {0, 1}});
    const Tensor r = matmul(id, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.at(i) == m.at(i));

    const Tensor p = matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5}, {6}}));
    CHECK(p.shape() == Shape{2, 1});
    CHECK(p.at(0) == 17.0);
    CHECK(p.at(1) == 39.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    const Tensor a = Tensor::zeros({2, 3});
    const Tensor b = Tensor::zeros({2, 3});
    try {
        (void)matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2 x 3] x [2 x 3]") != std::string::npos);
    }
}

TEST_CASE("gradient of sum(matmul(a, b)) wrt a is ones x b^T") {
    std::mt19937_64 rng(3);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng, false);
    backward(sum(matmul(a, b)));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            const double expected = b.at(k, 0) + b.at(k, 1);
            CHECK(a.grad()[i * 4 + k] == doctest::Approx(expected).epsilon(1e-14));
        }
    const auto r = gradcheck([](const std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); },
                             {a, b});
    CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("softmax examples") {
    const Tensor u = softmax(Tensor::vector({0, 0, 0}), 0);
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    const Tensor s = softmax(Tensor::vector({1, 2, 3, 4}), 0);
    const double expected[] = {0.03206, 0.08714, 0.23688, 0.64391};
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(s.at(i) - expected[i]) < 5e-6);

    const Tensor shifted = softmax(Tensor::vector({1 + 7.5, 2 + 7.5, 3 + 7.5, 4 + 7.5}), 0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(shifted.at(i) == doctest::Approx(s.at(i)).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one and survive large inputs") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor x = random_tensor({5, 7}, rng, false, 30.0);
        const Tensor p = softmax(x, 1);
        for (std::size_t r = 0; r < 5; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                CHECK(p.at(r, c) >= 0.0);
                acc += p.at(r, c);
            }
            CHECK(std::abs(acc - 1.0) <= 1e-12);
        }
    }
    const Tensor big = softmax(Tensor::vector({1000.0, 1000.0}), 0);
    CHECK(big.at(0) == 0.5);
}

TEST_CASE("cross entropy examples") {
    const Tensor uniform = cross_entropy(Tensor::vector({0.3, 0.3, 0.3, 0.3, 0.3}), 2);
    CHECK(uniform.item() == doctest::Approx(std::log(5.0)).epsilon(1e-14));

    const Tensor sharp = cross_entropy(Tensor::vector({10.0, -10.0}), 0);
    CHECK(sharp.item() == doctest::Approx(2.061153620314381e-9).epsilon(1e-6));

    CHECK_THROWS_AS((void)cross_entropy(Tensor::vector({1.0, 2.0}), 2), std::out_of_range);
}

TEST_CASE("attention block single frame and shape") {
    std::mt19937_64 rng(5);
    const auto params = AttentionParams::init(4, 2, rng, 0.3);
    const Tensor x = random_tensor({1, 4}, rng, false);
    const Tensor y = attention_block(x, params, 1);
    CHECK(y.shape() == Shape{1, 4});
    for (double v : y.data()) CHECK(std::isfinite(v));
}

TEST_CASE("attention is permutation equivariant without positional bias") {
    std::mt19937_64 rng(8);
    const auto params = AttentionParams::init(4, 1, rng, 0.5);
    const Tensor x = random_tensor({3, 4}, rng, false);
    const std::vector<std::size_t> perm = {2, 0, 1};
    const Tensor y = attention_block(x, params, 3);
    const Tensor yp = attention_block(gather_rows(x, perm), params, 3);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 4; ++c)
            CHECK(yp.at(r, c) == doctest::Approx(y.at(perm[r], c)).epsilon(1e-12));
}

TEST_CASE("attention never mixes sequences in a batch") {
    std::mt19937_64 rng(9);
    const auto params = AttentionParams::init(4, 2, rng, 0.5);
    const Tensor a = random_tensor({3, 4}, rng, false);
    const Tensor b = random_tensor({3, 4}, rng, false);
    const Tensor batched = attention_block(concat({a, b}), params, 3);
    const Tensor alone = attention_block(b, params, 3);
    for (std::size_t i = 0; i < alone.numel(); ++i) CHECK(batched.at(12 + i) == alone.at(i));
}

TEST_CASE("attention gradient matches finite differences on D=4, T=3") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        auto params = AttentionParams::init(4, 2, rng, 0.4);
        Tensor x = random_tensor({3, 4}, rng);
        std::vector<Tensor> inputs = {x};
        for (auto& p : params.parameters()) inputs.push_back(p);
        const auto r = gradcheck(
            [&params](const std::vector<Tensor>& in) { return probe(attention_block(in[0], params, 3)); },
            inputs);
        CHECK(r.max_relative_error < 1e-4);
    }
}

TEST_CASE("backward populates every reachable leaf and clears the tape") {
    Tensor a = Tensor::vector({1.0, 2.0}, true);
    Tensor unused = Tensor::vector({3.0}, true);
    Tensor b = Tensor::vector({0.5, 0.5}, true);
    const Tensor loss = sum(mul(a, b));
    (void)scale(unused, 2.0);
    CHECK(Tape::current().size() > 0);
    backward(loss);
    CHECK(Tape::current().size() == 0);
    CHECK(a.has_grad());
    CHECK(b.has_grad());
    CHECK_FALSE(unused.has_grad());
    CHECK(a.grad()[1] == 0.5);
    CHECK(b.grad()[1] == 2.0);
}

TEST_CASE("no-grad guard suppresses recording") {
    Tensor a = Tensor::vector({1.0}, true);
    {
        NoGradGuard guard;
        const Tensor y = scale(a, 3.0);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(Tape::current().size() == 0);
    CHECK(scale(a, 3.0).requires_grad());
    Tape::current().clear();
}

TEST_CASE("deterministic op sequence is bit-identical") {
    auto run = [] {
        std::mt19937_64 rng(77);
        const auto params = AttentionParams::init(8, 2, rng);
        const Tensor x = random_tensor({4, 8}, rng, false);
        return attention_block(x, params, 4);
    };
    const Tensor a = run();
    const Tensor b = run();
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("mac counter counts matmul work") {
    const MacCounter counter;
    (void)matmul(Tensor::zeros({3, 4}), Tensor::zeros({4, 5}));
    CHECK(counter.count() == 60);
}

TEST_CASE("reductions and reshapes") {
    const Tensor x = Tensor::matrix({{1, 3}, {3, 5}});
    const Tensor m0 = mean(x, 0);
    CHECK(m0.shape() == Shape{2});
    CHECK(m0.at(0) == 2.0);
    CHECK(m0.at(1) == 4.0);
    CHECK(mean(x, 1).at(1) == 4.0);
    CHECK(l2_norm(Tensor::matrix({{3, 4}})).at(0) == 5.0);
    CHECK(squared_distance(Tensor::matrix({{4, 6}}), Tensor::matrix({{1, 2}})).at(0) == 25.0);
    CHECK(mse(Tensor::vector({1, 2}), Tensor::vector({1, 1})).item() == 0.5);
    CHECK_THROWS_AS((void)reshape(x, {3}), DimensionError);
    CHECK_THROWS_AS((void)normalize_rows(Tensor::zeros({1, 3})), std::domain_error);
    const Tensor t = tile_rows(Tensor::matrix({{1, 2}}), 3);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at(2, 1) == 2.0);
    const std::vector<std::size_t> rows = {1, 1, 0};
    CHECK(gather_rows(x, rows).at(0, 1) == 5.0);
}

TEST_CASE("average divides the running sum") {
    const Tensor a = Tensor::vector({1.0, 2.0});
    const Tensor b = Tensor::vector({-1.0, 4.0});
    const Tensor m = average({a, b});
    CHECK(m.at(0) == 0.0);
    CHECK(m.at(1) == 3.0);
    const std::vector<double> w = {0.25, 0.75};
    CHECK(weighted_sum({a, b}, w).at(1) == 3.5);
}

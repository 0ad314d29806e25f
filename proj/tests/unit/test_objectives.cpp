// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"
#include "mote/objectives.hpp"
#include "mote/ops.hpp"
#include "../support/gradcheck.hpp"

using namespace mote;
using mote::testing::gradcheck;
using mote::testing::random_tensor;

namespace {

StackConfig tiny(std::size_t experts, std::size_t dim = 4, std::size_t frames = 3) {
    StackConfig c;
    c.dim = dim;
    c.hidden = 5;
    c.layers = 2;
    c.experts = experts;
    c.heads = dim % 2 == 0 ? 2 : 1;
    c.frames = frames;
    c.init_std = 0.3;
    return c;
}

void zero_all(MoteStack& s) {
    for (auto t : s.parameters())
        for (auto& v : t.mutable_data()) v = 0.0;
}

void copy_first_expert(MoteStack& s) {
    for (auto& layer : s.layers()) {
        const auto src = layer.experts.front().parameters();
        for (std::size_t i = 1; i < layer.experts.size(); ++i) {
            auto dst = layer.experts[i].parameters();
            for (std::size_t k = 0; k < dst.size(); ++k)
                std::copy(src[k].data().begin(), src[k].data().end(), dst[k].mutable_data().begin());
        }
    }
}

EmbeddingBank unit_bank(std::size_t classes, std::size_t dim, std::uint64_t seed) {
    std::vector<ClassId> labels(classes);
    for (std::size_t i = 0; i < classes; ++i) labels[i] = static_cast<ClassId>(i);
    return EmbeddingBank::random(labels, dim, BankRole::fine_tuning, seed);
}

EncodedBatch random_batch(std::size_t videos, std::size_t frames, std::size_t dim, std::size_t classes,
                          std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    EncodedBatch b;
    b.embeddings = random_tensor({videos * frames, dim}, rng, false);
    b.frames = frames;
    for (std::size_t i = 0; i < videos; ++i) b.labels.push_back(static_cast<ClassId>(i % classes));
    return b;
}

}  // namespace

TEST_CASE("task loss for an embedding equal to its class vector") {
    MoteStack stack(tiny(2, 2, 2), 1);
    zero_all(stack);
    const EmbeddingBank bank({0, 1}, Tensor::matrix({{1, 0}, {0, 1}}), BankRole::fine_tuning, 0);
    EncodedBatch b{Tensor::matrix({{1, 0}, {1, 0}}), {0}, 2};
    const double got = loss_te(stack, b, RoutingDecision::uniform(2, 0), bank, 0.07).item();
    const double oracle = std::log1p(std::exp(-1.0 / 0.07));
    CHECK(got == doctest::Approx(oracle).epsilon(1e-9));
    CHECK(got == doctest::Approx(6.2487e-7).epsilon(1e-4));
}

TEST_CASE("task loss matches a hand-built cross-entropy") {
    MoteStack stack(tiny(3), 4);
    const auto bank = unit_bank(5, 4, 2);
    const auto b = random_batch(4, 3, 4, 5, 3);
    const auto d = RoutingDecision{{2, 1}};
    const Tensor z = video_embedding(b.embeddings, forward_routed(stack, b.embeddings, d), 3);
    double expect = 0.0;
    for (std::size_t r = 0; r < 4; ++r) {
        double n = 0.0;
        for (std::size_t c = 0; c < 4; ++c) n += z.at(r, c) * z.at(r, c);
        std::vector<double> logit(5);
        double mx = -1e300;
        for (std::size_t k = 0; k < 5; ++k) {
            double dot = 0.0;
            for (std::size_t c = 0; c < 4; ++c) dot += z.at(r, c) * bank.vectors().at(k, c);
            logit[k] = dot / std::sqrt(n) / 0.07;
            mx = std::max(mx, logit[k]);
        }
        double s = 0.0;
        for (double l : logit) s += std::exp(l - mx);
        expect += -(logit[b.labels[r]] - mx - std::log(s));
    }
    expect /= 4.0;
    CHECK(loss_te(stack, b, d, bank, 0.07).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("task loss reaches attention and only the activated experts") {
    MoteStack stack(tiny(3), 5);
    const auto bank = unit_bank(3, 4, 1);
    const auto b = random_batch(3, 3, 4, 3, 9);
    Tape::current().clear();
    backward(loss_te(stack, b, RoutingDecision{{1, 2}}, bank, 0.07));
    for (const auto& p : stack.layer(0).attention.parameters()) CHECK(p.has_grad());
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t i = 0; i < 3; ++i) {
            const bool active = i == (l == 0 ? 1u : 2u);
            for (const auto& p : stack.expert_parameters(l, i)) CHECK(p.has_grad() == active);
        }
}

TEST_CASE("regulariser with identical experts reduces to the routed path") {
    MoteStack stack(tiny(4), 11);
    copy_first_expert(stack);
    const auto bank = unit_bank(4, 4, 12);
    const auto b = random_batch(5, 3, 4, 4, 13);
    const auto d = RoutingDecision{{3, 0}};
    const RoutedPass routed = routed_pass(stack, b, d, bank, 0.07);
    for (Tau tau : {Tau::finite(0.6), Tau::finite(-2.4), Tau::infinity()}) {
        CAPTURE(tau.to_string());
        const double ce = loss_wmr(stack, b, tau, bank, 0.07, WmrKind::cross_entropy, routed).loss.item();
        CHECK(ce == doctest::Approx(routed.loss.item()).epsilon(1e-10));
        CHECK(std::abs(loss_wmr(stack, b, tau, bank, 0.07, WmrKind::kl, routed).loss.item()) < 1e-10);
        CHECK(std::abs(loss_wmr(stack, b, tau, bank, 0.07, WmrKind::mse, routed).loss.item()) < 1e-20);
    }
}

TEST_CASE("regulariser supervision is detached from the routed path") {
    const auto bank = unit_bank(3, 4, 22);
    const auto b = random_batch(3, 3, 4, 3, 23);
    const auto d = RoutingDecision{{0, 1}};
    for (WmrKind kind : {WmrKind::kl, WmrKind::mse}) {
        CAPTURE(to_string(kind));
        MoteStack stack(tiny(2), 21);
        // Supervision from a copy shares values but not the graph.
        const MoteStack copy = stack.clone();
        auto grads = [&](const MoteStack& source) {
            Tape::current().clear();
            for (auto p : stack.parameters()) p.clear_grad();
            const RoutedPass routed = routed_pass(source, b, d, bank, 0.07);
            backward(loss_wmr(stack, b, Tau::finite(2.4), bank, 0.07, kind, routed).loss);
            std::vector<double> out;
            for (const auto& p : stack.parameters())
                if (p.has_grad()) out.insert(out.end(), p.grad().begin(), p.grad().end());
            return out;
        };
        const auto own = grads(stack);
        const auto foreign = grads(copy);
        REQUIRE(own.size() == foreign.size());
        for (std::size_t i = 0; i < own.size(); ++i) CHECK(own[i] == foreign[i]);
    }
}

TEST_CASE("regulariser and task loss agree with finite differences") {
    const auto bank = unit_bank(3, 4, 31);
    for (WmrKind kind : {WmrKind::cross_entropy, WmrKind::kl, WmrKind::mse}) {
        CAPTURE(to_string(kind));
        MoteStack stack(tiny(3), 30 + static_cast<int>(kind));
        const auto b = random_batch(2, 3, 4, 3, 32);
        const auto d = RoutingDecision{{2, 1}};
        const auto params = stack.parameters();
        // The regulariser treats its supervision as constant; so does the
        // numeric side when the supervision comes from a frozen copy.
        const MoteStack frozen = stack.clone();
        const auto r = gradcheck(
            [&](const std::vector<Tensor>&) {
                const RoutedPass target = routed_pass(frozen, b, d, bank, 0.07);
                const Tensor te = loss_te(stack, b, d, bank, 0.07);
                const auto w = loss_wmr(stack, b, Tau::finite(1.2), bank, 0.07, kind, target);
                return loss_all(te, w.loss, loss_mse(w.z_r, b.pooled()), LossWeights{});
            },
            params);
        CHECK(r.checked_inputs == params.size());
        CHECK(r.max_relative_error < 1e-4);
    }
}

TEST_CASE("spatial consistency loss") {
    SUBCASE("single sample") {
        const Tensor z = Tensor::matrix({{4, 6}}, true);
        const Tensor e = Tensor::matrix({{1, 2}});
        CHECK(loss_mse(z, e).item() == 25.0);
    }
    SUBCASE("gradient is 2 (z - e) / batch") {
        const Tensor z = Tensor::matrix({{4, 6}, {0.5, -1}, {2, 2}}, true);
        const Tensor e = Tensor::matrix({{1, 2}, {0, 0}, {2, 3}}, true);
        Tape::current().clear();
        backward(loss_mse(z, e));
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < 2; ++c)
                CHECK(z.grad()[r * 2 + c] == doctest::Approx(2.0 * (z.at(r, c) - e.at(r, c)) / 3.0));
        CHECK_FALSE(e.has_grad());
    }
    SUBCASE("finite differences") {
        std::mt19937_64 rng(5);
        const Tensor z = random_tensor({4, 3}, rng);
        const Tensor e = random_tensor({4, 3}, rng, false);
        const auto r = gradcheck([&](const std::vector<Tensor>& in) { return loss_mse(in[0], e); }, {z});
        CHECK(r.max_relative_error < 1e-6);
    }
}

TEST_CASE("weighted total") {
    const Tensor te = Tensor::scalar(1.0), wmr = Tensor::scalar(2.0), ms = Tensor::scalar(3.0);
    CHECK(loss_all(te, wmr, ms, LossWeights{0.5, 0.1}).item() == doctest::Approx(2.3).epsilon(1e-15));
    CHECK(loss_all(te, Tensor(), Tensor(), LossWeights{0.0, 0.0}).item() == 1.0);
    CHECK(loss_all(te, wmr, Tensor(), LossWeights{0.25, 0.0}).item() == 1.5);

    const double nan = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(loss_all(Tensor::scalar(nan), wmr, ms, LossWeights{}), NumericDivergence);
    CHECK_THROWS_AS(loss_all(te, Tensor::scalar(INFINITY), ms, LossWeights{}), NumericDivergence);
    CHECK_NOTHROW(loss_all(te, Tensor::scalar(nan), ms, LossWeights{0.0, 0.1}));
    CHECK_THROWS_AS(loss_all(te, wmr, ms, LossWeights{-0.1, 0.1}), std::invalid_argument);
}

TEST_CASE("bank targets") {
    const EmbeddingBank bank({7, 3, 9}, Tensor::matrix({{1, 0}, {0, 1}, {-1, 0}}), BankRole::fine_tuning, 0);
    const std::vector<ClassId> labels = {9, 7, 3, 9};
    CHECK(bank_targets(labels, bank) == std::vector<std::size_t>{2, 0, 1, 2});
    const std::vector<ClassId> bad = {7, 4};
    CHECK_THROWS_AS(bank_targets(bad, bank), std::out_of_range);
}

TEST_CASE("regulariser errors and names") {
    MoteStack stack(tiny(2), 1);
    const auto bank = unit_bank(3, 4, 1);
    const auto b = random_batch(2, 3, 4, 3, 1);
    const RoutedPass routed = routed_pass(stack, b, RoutingDecision{{0, 1}}, bank, 0.07);
    const std::vector<Tau> short_list = {Tau::finite(1.0)};
    CHECK_THROWS(loss_wmr(stack, b, short_list, bank, 0.07, WmrKind::cross_entropy, routed));
    CHECK_THROWS_AS(loss_wmr(stack, b, Tau::finite(0.0), bank, 0.07, WmrKind::cross_entropy, routed),
                    std::invalid_argument);
    for (WmrKind k : {WmrKind::cross_entropy, WmrKind::kl, WmrKind::mse})
        CHECK(wmr_kind_from_string(to_string(k)) == k);
    CHECK_THROWS_AS(wmr_kind_from_string("l1"), std::invalid_argument);
}

// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "mote/harness.hpp"
#include "mote/seed.hpp"
#include "../support/grad_suite.hpp"

using namespace mote;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Verdict {
    bool pass = true;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Verdict& v, double seconds) {
    if (!v.pass) ++failures;
    std::printf("criterion %2d %-22s %s  (%.2f s)  %s\n", id, name.c_str(), v.pass ? "PASS" : "FAIL", seconds,
                v.detail.c_str());
    std::fflush(stdout);
}

template <typename F>
void run(int id, const std::string& name, F&& f) {
    const auto t0 = Clock::now();
    Verdict v;
    try {
        v = f();
    } catch (const std::exception& e) {
        v = {false, std::string("exception: ") + e.what()};
    }
    report(id, name, v, seconds_since(t0));
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

Verdict gradients() {
    const auto t0 = Clock::now();
    const auto results = testing::run_grad_suite(20);
    const double s = seconds_since(t0);
    Verdict v;
    double worst = 0.0;
    std::string worst_op;
    for (const auto& r : results) {
        if (r.instances < 20 || !(r.max_relative_error < 1e-4)) v.pass = false;
        if (r.max_relative_error >= worst) worst = r.max_relative_error, worst_op = r.op;
    }
    if (s >= 10.0) v.pass = false;
    v.detail = std::to_string(results.size()) + " ops x 20, worst " + worst_op + fmt(" %.2e", worst) + fmt(", %.2f s", s);
    return v;
}

Verdict routing_law() {
    const auto t0 = Clock::now();
    Verdict v;
    double worst = 0.0;
    for (std::size_t n : {2, 4, 6}) {
        Rng rng(derive_seed(7, {n}));
        std::vector<double> counts(n, 0.0);
        constexpr int draws = 100000;
        for (int i = 0; i < draws; ++i) counts[route(n, rng)] += 1.0;
        const auto p = routing_probabilities(n);
        for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(counts[i] / draws - p[i]));
    }
    const double s = seconds_since(t0);
    v.pass = worst <= 0.01 && s < 1.0;
    v.detail = fmt("max |freq - p| %.4f", worst) + fmt(", %.3f s", s);
    return v;
}

Verdict merge_algebra() {
    Verdict v;
    // tau = infinity against the uniform mean, bitwise.
    for (std::size_t n = 1; n <= 8; ++n) {
        StackConfig c;
        c.dim = 8, c.hidden = 6, c.layers = 2, c.experts = n, c.heads = 2, c.frames = 3;
        const MoteStack stack(c, 40 + n);
        NoGradGuard guard;
        for (const auto& layer : stack.layers()) {
            const auto u = merge_uniform(layer).parameters();
            const auto s = merge_soft(layer, Tau::infinity()).parameters();
            for (std::size_t k = 0; k < u.size(); ++k)
                if (!std::equal(u[k].data().begin(), u[k].data().end(), s[k].data().begin())) v.pass = false;
        }
    }
    // Finite tau: a probability vector, and exact reversal under tau -> -tau.
    Rng rng(11);
    std::normal_distribution<double> dist(0.0, 4.0);
    double worst_sum = 0.0;
    for (int trial = 0; trial < 2000; ++trial) {
        const double t = dist(rng);
        if (t == 0.0) continue;
        const std::size_t n = 1 + trial % 8;
        const auto pos = merge_coefficients(n, Tau::finite(t));
        const auto neg = merge_coefficients(n, Tau::finite(-t));
        double total = 0.0;
        for (double x : pos) total += x;
        worst_sum = std::max(worst_sum, std::abs(total - 1.0));
        for (std::size_t i = 0; i < n; ++i)
            if (neg[i] != pos[n - 1 - i]) v.pass = false;
    }
    // Direct evaluation at tau = 0.6, N = 4.
    const auto c = merge_coefficients(4, Tau::finite(0.6));
    double z = 0.0;
    for (int i = 1; i <= 4; ++i) z += std::exp(i / 0.6);
    double worst_direct = 0.0;
    for (int i = 1; i <= 4; ++i) worst_direct = std::max(worst_direct, std::abs(c[i - 1] - std::exp(i / 0.6) / z));
    if (worst_sum > 1e-12 || worst_direct > 1e-12) v.pass = false;
    v.detail = fmt("sum err %.1e", worst_sum) + fmt(", tau=0.6 err %.1e", worst_direct);
    return v;
}

Verdict compute_parity() {
    std::vector<std::uint64_t> macs;
    for (std::size_t n : {1, 4, 8}) {
        StackConfig c;
        c.dim = 16, c.hidden = 32, c.layers = 3, c.experts = n, c.heads = 4, c.frames = 8;
        const MoteStack stack(c, 5);
        Rng rng(derive_seed(3, {n}));
        const auto decision = sample_routing(stack, RoutingPolicy::multinomial, rng);
        std::vector<double> e(4 * 8 * 16, 0.25);
        NoGradGuard guard;
        const MacCounter counter;
        (void)forward_routed(stack, Tensor({32, 16}, e), decision);
        macs.push_back(counter.count());
    }
    Verdict v;
    v.pass = macs[0] > 0 && macs[0] == macs[1] && macs[1] == macs[2];
    v.detail = "MACs N=1/4/8: " + std::to_string(macs[0]) + " / " + std::to_string(macs[1]) + " / " +
               std::to_string(macs[2]);
    return v;
}

Verdict collapse() {
    RunConfig cfg;
    cfg.data.train_per_class = 8;
    cfg.data.eval_per_class = 2;
    cfg.init_policy = InitPolicy::same;
    cfg.data_policy = DataPolicy::all_experts;
    // Temperature-weighted merging treats experts asymmetrically by design;
    // the collapse concerns the plain objective.
    cfg.weights.lambda = 0.0;
    cfg.weights.eta = 0.0;
    const PreparedData data = prepare_data(cfg.data, 0);
    const std::size_t per_epoch = (data.train.size() + cfg.batch_size - 1) / cfg.batch_size;
    cfg.epochs = (200 + per_epoch - 1) / per_epoch;
    MoteStack stack(cfg.stack_config(), cfg.seeds.init, cfg.init_policy);
    const auto initial = stack.clone();
    const auto result = train(cfg, data.train, data.world().fine_tuning_bank);
    Verdict v;
    bool equal = true, moved = false;
    for (std::size_t l = 0; l < result.stack.layer_count(); ++l) {
        const auto& layer = result.stack.layer(l);
        const auto first = layer.experts[0].parameters();
        for (std::size_t i = 1; i < layer.experts.size(); ++i) {
            const auto other = layer.experts[i].parameters();
            for (std::size_t k = 0; k < first.size(); ++k)
                if (!std::equal(first[k].data().begin(), first[k].data().end(), other[k].data().begin()))
                    equal = false;
        }
        const auto w0 = initial.layer(l).experts[0].w_up.data();
        if (!std::equal(w0.begin(), w0.end(), layer.experts[0].w_up.data().begin())) moved = true;
    }
    v.pass = result.steps >= 200 && equal && moved;
    v.detail = std::to_string(result.steps) + " steps, " + std::to_string(cfg.experts) + " experts x " +
               std::to_string(cfg.layers) + " layers " + (equal ? "bitwise equal" : "diverged") +
               (moved ? "" : ", weights never moved");
    return v;
}

Verdict tfm_invariants() {
    RunConfig cfg;
    cfg.epochs = 2;
    const PreparedData data = prepare_data(cfg.data, 0);
    const auto& w = data.world();
    const auto result = train(cfg, data.train, w.fine_tuning_bank);
    EvalOptions o;
    o.bank = &w.fine_tuning_bank;
    o.tfm.enabled = false;
    const auto off = evaluate(result.stack, data.close_eval, o);
    o.tfm = cfg.tfm;
    o.tfm.enabled = true;
    o.fine_tuning_proxies = &w.fine_tuning_bank;
    o.test_proxies = &w.fine_tuning_bank;
    const auto on = evaluate(result.stack, data.close_eval, o);
    Verdict v;
    const bool same = on.predictions == off.predictions;
    bool unit_rho = on.mean_rho == 1.0;
    {
        NoGradGuard guard;
        const auto all = data.close_eval.all();
        const Tensor e = mean(reshape(all.embeddings, {all.labels.size(), all.frames, w.fine_tuning_bank.dim()}), 1);
        for (double r : batch_rho(e, w.fine_tuning_bank, w.fine_tuning_bank, o.tfm))
            if (r != 1.0) unit_rho = false;
    }
    const double rho = rho_from_score(0.9, 0.05);
    const double err = std::abs(rho - std::exp(-2.0));
    v.pass = same && unit_rho && err <= 1e-12;
    v.detail = std::string(same ? "argmax identical" : "argmax differs") + (unit_rho ? ", rho = 1" : ", rho != 1") +
               fmt(", |rho(0.9) - e^-2| %.1e", err);
    return v;
}

struct SeedRuns {
    std::map<std::string, EvalReport> runs;
};

RunConfig variant(const RunConfig& base, const std::string& name, std::uint64_t seed) {
    RunConfig c = base;
    c.seeds = {seed, seed, seed};
    c.tfm.enabled = false;
    if (name == "base") {
        c.experts = 1;
        c.weights.lambda = 0.0;
        c.weights.eta = 0.0;
    } else if (name == "experts") {
        c.weights.lambda = 0.0;
        c.weights.eta = 0.0;
    } else if (name == "wmr") {
        c.weights.eta = 0.0;
    }
    return c;
}

std::vector<SeedRuns> trade_off_runs(const RunConfig& base, std::size_t seeds) {
    std::vector<SeedRuns> out;
    for (std::size_t s = 0; s < seeds; ++s) {
        SeedRuns sr;
        const PreparedData data = prepare_data(base.data, s);
        for (const char* name : {"base", "experts", "wmr", "full"}) {
            const RunConfig c = variant(base, name, s);
            const auto result = train(c, data.train, data.world().fine_tuning_bank);
            sr.runs.emplace(name, build_report(c, result.stack, data, result.history));
        }
        const auto& b = sr.runs.at("base");
        const auto& f = sr.runs.at("full");
        double best = 0.0;
        for (std::size_t i = 0; i + 1 < f.experts.size(); ++i) best = std::max(best, f.experts[i].zeroshot_top1);
        std::printf("  seed %zu  close base %.1f experts %.1f wmr %.1f full %.1f | zs base %.1f full %.1f | "
                    "experts max %.1f merged %.1f | mixed zs off %.1f on %.1f\n",
                    s, b.close.top1, sr.runs.at("experts").close.top1, sr.runs.at("wmr").close.top1, f.close.top1,
                    b.zeroshot.top1, f.zeroshot.top1, best, f.experts.back().zeroshot_top1,
                    f.mixed_zeroshot_tfm_off.top1, f.mixed_zeroshot_tfm_on.top1);
        std::fflush(stdout);
        out.push_back(std::move(sr));
    }
    return out;
}

Verdict trade_off(const std::vector<SeedRuns>& runs, double seconds) {
    const std::size_t n = runs.size();
    std::size_t a = 0, b = 0, c = 0;
    double close_base = 0, close_experts = 0, close_wmr = 0;
    for (const auto& sr : runs) {
        const auto& base = sr.runs.at("base");
        const auto& full = sr.runs.at("full");
        a += full.zeroshot.top1 > base.zeroshot.top1;
        b += std::abs(full.close.top1 - base.close.top1) <= 2.0;
        double best = 0.0;
        for (std::size_t i = 0; i + 1 < full.experts.size(); ++i) best = std::max(best, full.experts[i].zeroshot_top1);
        c += full.experts.back().zeroshot_top1 >= best;
        close_base += base.close.top1 / n;
        close_experts += sr.runs.at("experts").close.top1 / n;
        close_wmr += sr.runs.at("wmr").close.top1 / n;
    }
    const double drop = close_base - close_experts;
    const bool d = drop <= 0.0 || close_wmr - close_experts >= 0.5 * drop;
    const std::size_t need = (8 * n + 9) / 10, need_c = (7 * n + 9) / 10;
    Verdict v;
    v.pass = a >= need && b >= need && c >= need_c && d && seconds < 900.0;
    std::ostringstream os;
    os << "(a) " << a << "/" << n << " (b) " << b << "/" << n << " (c) " << c << "/" << n << " (d) drop "
       << fmt("%.2f", drop) << " recovered " << fmt("%.2f", close_wmr - close_experts) << fmt(", %.0f s", seconds);
    v.detail = os.str();
    return v;
}

Verdict mixed_bank_stress(const std::vector<SeedRuns>& runs) {
    std::size_t wins = 0;
    for (const auto& sr : runs) {
        const auto& f = sr.runs.at("full");
        wins += f.mixed_zeroshot_tfm_on.top1 > f.mixed_zeroshot_tfm_off.top1;
    }
    Verdict v;
    v.pass = wins >= (8 * runs.size() + 9) / 10;
    v.detail = "TFM on > off in " + std::to_string(wins) + "/" + std::to_string(runs.size()) + " seeds";
    return v;
}

Verdict metric_fidelity() {
    const std::vector<double> three = {83.4, 55.8, 70.2}, two = {83.0, 67.9};
    const double h3 = harmonic_mean(three), h2 = harmonic_mean(two);
    Verdict v;
    v.pass = std::abs(h3 - 67.9) <= 0.05 && std::abs(h2 - 74.7) <= 0.05;
    v.detail = fmt("HM3 %.3f", h3) + fmt(", HM2 %.3f", h2);
    return v;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

Verdict determinism(const std::string& cli, const fs::path& work) {
    if (cli.empty()) return {false, "no --cli given"};
    fs::remove_all(work);
    std::vector<fs::path> dirs = {work / "a", work / "b"};
    for (const auto& d : dirs) {
        const std::string cmd = "\"" + cli + "\" train --quiet --seed-data 3 --seed-init 4 --seed-route 5 --out \"" +
                                d.string() + "\"";
        if (std::system(cmd.c_str()) != 0) return {false, "train failed: " + cmd};
    }
    Verdict v;
    for (const char* f : {"checkpoint.json", "report.json", "deployed.json"}) {
        if (slurp(dirs[0] / f) != slurp(dirs[1] / f)) {
            v.pass = false;
            v.detail += std::string(f) + " differs; ";
        }
    }
    if (v.pass) v.detail = "checkpoint.json, deployed.json and report.json byte-identical";
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string cli, config_path, work = "acceptance_work";
    std::size_t seeds = 10;
    app.add_option("--cli", cli, "path to the mote executable");
    app.add_option("--config", config_path, "base configuration for the trade-off runs");
    app.add_option("--seeds", seeds, "seeds for the trade-off and mixed-bank criteria");
    app.add_option("--work", work, "scratch directory");
    CLI11_PARSE(app, argc, argv);

    const RunConfig base = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);

    run(1, "gradients", gradients);
    run(2, "routing law", routing_law);
    run(3, "merge algebra", merge_algebra);
    run(4, "compute parity", compute_parity);
    run(5, "collapse", collapse);
    run(6, "tfm invariants", tfm_invariants);

    std::vector<SeedRuns> runs;
    const auto t0 = Clock::now();
    try {
        runs = trade_off_runs(base, seeds);
    } catch (const std::exception& e) {
        std::printf("  trade-off runs failed: %s\n", e.what());
    }
    const double seconds = seconds_since(t0);
    if (runs.size() == seeds) {
        report(7, "trade-off", trade_off(runs, seconds), seconds);
        run(8, "mixed-bank stress", [&] { return mixed_bank_stress(runs); });
    } else {
        report(7, "trade-off", {false, "runs did not complete"}, seconds);
        report(8, "mixed-bank stress", {false, "runs did not complete"}, 0.0);
    }
    run(9, "metric fidelity", metric_fidelity);
    run(10, "determinism", [&] { return determinism(cli, work); });

    std::printf("%s: %d criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
    return failures == 0 ? 0 : 1;
}

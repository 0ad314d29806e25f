// SPDX-License-Identifier: Apache-2.0
//
// mote: generate data, train, evaluate and ablate temporal-expert stacks.
// Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric
// divergence.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mote/config.hpp"
#include "mote/harness.hpp"
#include "mote/synthdata.hpp"

namespace fs = std::filesystem;
using namespace mote;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed_data, seed_init, seed_route;
    std::vector<std::string> overrides;
    std::string tfm;
    std::string aggregation;
    std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "key = value run configuration");
    cmd->add_option("--seed-data", c.seed_data, "data seed");
    cmd->add_option("--seed-init", c.seed_init, "initialisation seed");
    cmd->add_option("--seed-route", c.seed_route, "routing and merge-temperature seed");
    cmd->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
    cmd->add_option("--tfm", c.tfm, "temporal feature modulation")->check(CLI::IsMember({"on", "off"}));
    cmd->add_option("--aggregation", c.aggregation, "expert aggregation at inference")
        ->check(CLI::IsMember({"merge", "ensemble", "random"}));
    cmd->add_option("--out", c.out, "output directory");
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig{} : RunConfig::load(c.config_path);
    for (const auto& o : c.overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
        cfg.set(o.substr(0, eq), o.substr(eq + 1));
    }
    if (c.seed_data) cfg.seeds.data = *c.seed_data;
    if (c.seed_init) cfg.seeds.init = *c.seed_init;
    if (c.seed_route) cfg.seeds.route = *c.seed_route;
    if (!c.tfm.empty()) cfg.tfm.enabled = c.tfm == "on";
    if (!c.aggregation.empty()) cfg.aggregation = aggregation_from_string(c.aggregation);
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(1) + "\n"); }

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    return nlohmann::json::parse(in);
}

void print_metrics(const std::string& name, const SplitMetrics& m) {
    std::printf("%-22s top1 %6.2f  top5 %6.2f  n %zu  mean rho %.4f\n", name.c_str(), m.top1, m.top5, m.count,
                m.mean_rho);
}

void print_report(const nlohmann::json& r) {
    std::printf("run %s\n", r.at("run_id").get<std::string>().c_str());
    for (const char* split : {"close", "zeroshot"}) {
        const auto& s = r.at("splits").at(split);
        std::printf("  %-9s top1 %6.2f  top5 %6.2f\n", split, s.at("top1").get<double>(), s.at("top5").get<double>());
    }
    std::printf("  hm_zs %.3f  trade-off %.3f\n", r.at("hm_zs").get<double>(), r.at("trade_off").get<double>());
    const auto& mz = r.at("mixed").at("zeroshot");
    std::printf("  mixed-bank zero-shot top1: tfm off %.2f, on %.2f\n", mz.at("tfm_off").at("top1").get<double>(),
                mz.at("tfm_on").at("top1").get<double>());
    std::printf("  %-10s %8s %8s\n", "stack", "close", "zeroshot");
    for (const auto& row : r.at("expert_wise"))
        std::printf("  %-10s %8.2f %8.2f\n", row.at("name").get<std::string>().c_str(),
                    row.at("close_top1").get<double>(), row.at("zeroshot_top1").get<double>());
}

int cmd_gen_data(const Common& c) {
    const RunConfig cfg = resolve(c);
    const auto data = generate_split(cfg.data, cfg.seeds.data);
    fs::create_directories(c.out);
    const fs::path out(c.out);
    for (const auto& [name, eps] : {std::pair{"train.jsonl", &data.train}, {"close_eval.jsonl", &data.close_eval},
                                    {"zeroshot_eval.jsonl", &data.zeroshot_eval},
                                    {"unseen_train.jsonl", &data.unseen_train}}) {
        std::ofstream f(out / name, std::ios::binary);
        write_episodes_jsonl(f, *eps);
    }
    write_json(out / "banks.json", {{"fine_tuning", data.world.fine_tuning_bank.to_json()},
                                    {"test", data.world.test_bank.to_json()}});
    write_json(out / "data_spec.json", {{"spec", cfg.data.to_json()}, {"seed", cfg.seeds.data}});
    std::printf("wrote %zu train, %zu close-eval, %zu zero-shot eval episodes to %s\n", data.train.size(),
                data.close_eval.size(), data.zeroshot_eval.size(), c.out.c_str());
    return 0;
}

int cmd_train(const Common& c, const std::string& split_text, bool quiet) {
    const RunConfig cfg = resolve(c);
    const SplitSpec split = SplitSpec::parse(split_text);
    if (split.name == "zeroshot" || split.name == "mixed") {
        throw ConfigError("train --split accepts close or fewshot:K");
    }
    const auto start = std::chrono::steady_clock::now();
    const PreparedData data = prepare_data(cfg.data, cfg.seeds.data);
    const bool fewshot = split.name == "fewshot";
    const EncodedSet train_set = fewshot ? fewshot_train_set(data, split.shots, cfg.seeds.data) : data.train;
    const EmbeddingBank& bank = fewshot ? data.world().test_bank : data.world().fine_tuning_bank;

    fs::create_directories(c.out);
    const fs::path out(c.out);
    std::size_t last_pct = 101;
    StepHook hook;
    if (!quiet) {
        hook = [&](std::size_t step, std::size_t total, double loss) {
            const std::size_t pct = total ? 100 * (step + 1) / total : 100;
            if (pct % 10 == 0 && pct != last_pct) {
                std::fprintf(stderr, "step %zu/%zu loss %.4f\n", step + 1, total, loss);
                last_pct = pct;
            }
        };
    }
    TrainResult result = [&] {
        try {
            return train(cfg, train_set, bank, hook);
        } catch (const NumericDivergence& e) {
            write_json(out / "divergence.json", {{"error", e.what()}, {"run_id", run_id(cfg)}, {"config", cfg.to_json()}});
            throw;
        }
    }();
    write_json(out / "checkpoint.json", checkpoint_json(cfg, result));
    write_json(out / "deployed.json", deployed_json(cfg, result.stack));

    nlohmann::json report;
    if (fewshot) {
        EvalOptions opt;
        opt.bank = &data.world().test_bank;
        opt.temperature = cfg.temperature;
        opt.aggregation = cfg.aggregation;
        const auto m = evaluate(result.stack, data.zeroshot_eval, opt);
        report = {{"format", "mote-fewshot-report"},
                  {"version", 1},
                  {"run_id", run_id(cfg)},
                  {"config", cfg.to_json()},
                  {"shots", split.shots},
                  {"fewshot", m.to_json()}};
        print_metrics("fewshot:" + std::to_string(split.shots), m);
    } else {
        report = build_report(cfg, result.stack, data, result.history).to_json();
        if (!quiet) print_report(report);
    }
    write_json(out / "report.json", report);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_json(out / "run_meta.json", {{"run_id", run_id(cfg)}, {"wall_clock_seconds", seconds}, {"steps", result.steps}});
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint_path, const std::string& split_text, bool experts) {
    const auto loaded = load_checkpoint(read_json(checkpoint_path));
    RunConfig cfg = loaded.config;
    // Command-line options refine the checkpoint's own configuration.
    if (!c.config_path.empty() || !c.overrides.empty() || c.seed_data || c.seed_init || c.seed_route) {
        throw ConfigError("eval takes its configuration from the checkpoint; only --tfm and --aggregation apply");
    }
    if (!c.tfm.empty()) cfg.tfm.enabled = c.tfm == "on";
    if (!c.aggregation.empty()) cfg.aggregation = aggregation_from_string(c.aggregation);
    if (loaded.deployed && cfg.aggregation != Aggregation::merge) {
        throw ConfigError("a merged-only checkpoint supports --aggregation merge only");
    }
    const SplitSpec split = SplitSpec::parse(split_text);
    const PreparedData data = prepare_data(cfg.data, cfg.seeds.data);
    const auto& w = data.world();
    const EmbeddingBank mixed = mixed_bank(w.fine_tuning_bank, w.test_bank);

    EvalOptions opt;
    opt.temperature = cfg.temperature;
    opt.aggregation = cfg.aggregation;
    opt.tfm = cfg.tfm;
    opt.fine_tuning_proxies = &w.fine_tuning_bank;
    nlohmann::json out = {{"format", "mote-eval"}, {"run_id", run_id(cfg)}, {"split", split_text},
                          {"tfm", cfg.tfm.enabled}, {"aggregation", to_string(cfg.aggregation)}};
    if (split.name == "close") {
        opt.bank = &w.fine_tuning_bank;
        opt.test_proxies = &w.fine_tuning_bank;
        const auto m = evaluate(loaded.stack, data.close_eval, opt);
        print_metrics("close", m);
        out["close"] = m.to_json();
    } else if (split.name == "zeroshot" || split.name == "fewshot") {
        opt.bank = &w.test_bank;
        opt.test_proxies = &w.test_bank;
        const auto m = evaluate(loaded.stack, data.zeroshot_eval, opt);
        print_metrics(split_text, m);
        out[split.name] = m.to_json();
    } else {
        opt.bank = &mixed;
        opt.test_proxies = &w.fine_tuning_bank;
        const auto mc = evaluate(loaded.stack, data.close_eval, opt);
        opt.test_proxies = &w.test_bank;
        const auto mz = evaluate(loaded.stack, data.zeroshot_eval, opt);
        print_metrics("mixed close", mc);
        print_metrics("mixed zeroshot", mz);
        out["mixed"] = {{"close", mc.to_json()}, {"zeroshot", mz.to_json()}};
    }
    if (experts) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : expert_wise_eval(loaded, data)) {
            std::printf("%-10s close %6.2f  zeroshot %6.2f\n", r.name.c_str(), r.close_top1, r.zeroshot_top1);
            rows.push_back({{"name", r.name}, {"close_top1", r.close_top1}, {"zeroshot_top1", r.zeroshot_top1}});
        }
        out["experts"] = rows;
    }
    fs::create_directories(c.out);
    write_json(fs::path(c.out) / "eval.json", out);
    return 0;
}

int cmd_ablate(const Common& c, const std::string& grid_path) {
    const RunConfig base = resolve(c);
    std::string grid_text;
    if (!grid_path.empty()) {
        std::ifstream in(grid_path);
        if (!in) throw ConfigError("cannot open grid file '" + grid_path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        grid_text = ss.str();
    }
    const auto axes = parse_grid(grid_text, base);
    const auto runs = ablate(base, axes, [](std::size_t i, std::size_t n) {
        std::fprintf(stderr, "run %zu/%zu\n", i + 1, n);
    });
    fs::create_directories(c.out);
    write_json(fs::path(c.out) / "ablation.json", ablation_json(runs));
    const std::string table = ablation_table(runs);
    write_text(fs::path(c.out) / "ablation.txt", table);
    std::fputs(table.c_str(), stdout);
    return 0;
}

int cmd_report(const std::string& path) {
    const auto j = read_json(path);
    const auto format = j.value("format", std::string());
    if (format == "mote-report") {
        print_report(j);
        const bool ok = EvalReport::self_consistent(j);
        std::printf("  aggregates %s\n", ok ? "consistent" : "INCONSISTENT");
        return ok ? 0 : 1;
    }
    if (format == "mote-ablation") {
        bool ok = true;
        for (const auto& run : j.at("runs")) {
            std::string label;
            for (const auto& [k, v] : run.at("overrides").items()) label += k + "=" + v.get<std::string>() + " ";
            std::printf("== %s\n", label.empty() ? "(defaults)" : label.c_str());
            print_report(run.at("report"));
            ok = ok && EvalReport::self_consistent(run.at("report"));
        }
        std::printf("aggregates %s\n", ok ? "consistent" : "INCONSISTENT");
        return ok ? 0 : 1;
    }
    throw std::runtime_error("unrecognised report format '" + format + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mixture-of-temporal-experts training and evaluation"};
    app.require_subcommand(1);

    Common gen, tr, ev, ab;
    auto* gen_cmd = app.add_subcommand("gen-data", "generate and dump a synthetic dataset");
    add_common(gen_cmd, gen);

    std::string train_split = "close";
    bool quiet = false;
    auto* train_cmd = app.add_subcommand("train", "train a stack and write checkpoint and report");
    add_common(train_cmd, tr);
    train_cmd->add_option("--split", train_split, "close (seen classes) or fewshot:K (K-shot unseen classes)");
    train_cmd->add_flag("--quiet", quiet, "no progress output");

    std::string checkpoint, eval_split = "close";
    bool eval_experts = false;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on one split");
    add_common(eval_cmd, ev);
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint.json or deployed.json")->required();
    eval_cmd->add_option("--split", eval_split, "close, zeroshot, fewshot:K or mixed");
    eval_cmd->add_flag("--experts", eval_experts, "also evaluate every expert alone (pre-merge checkpoints only)");

    std::string grid;
    auto* ablate_cmd = app.add_subcommand("ablate", "run a grid of configurations");
    add_common(ablate_cmd, ab);
    ablate_cmd->add_option("--grid", grid, "grid file: one 'key = v1, v2' axis per line");

    std::string report_path;
    auto* report_cmd = app.add_subcommand("report", "print and check a report or ablation JSON");
    report_cmd->add_option("path", report_path, "report.json or ablation.json")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(gen);
        if (*train_cmd) return cmd_train(tr, train_split, quiet);
        if (*eval_cmd) return cmd_eval(ev, checkpoint, eval_split, eval_experts);
        if (*ablate_cmd) return cmd_ablate(ab, grid);
        if (*report_cmd) return cmd_report(report_path);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const NumericDivergence& e) {
        std::fprintf(stderr, "numeric divergence: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}

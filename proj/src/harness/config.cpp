// SPDX-License-Identifier: Apache-2.0

#include "mote/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace mote {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
        throw ConfigError(key + ": expected a finite number, got '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError(key + ": expected on/off, got '" + v + "'");
}

std::vector<Tau> parse_taus(const std::string& key, const std::string& v) {
    std::vector<Tau> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        if (item == "inf") {
            out.push_back(Tau::infinity());
        } else {
            const double t = parse_double(key, item);
            if (t == 0.0) throw ConfigError(key + ": tau must be non-zero");
            out.push_back(Tau::finite(t));
        }
    }
    return out;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string fmt(std::size_t v) { return std::to_string(v); }
std::string fmt(std::uint64_t v, int) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "on" : "off"; }

template <class F>
auto wrap(const std::string& key, F&& f) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(key + ": " + e.what());
    }
}

struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define MOTE_SIZE(k, member) \
    {k, [](RunConfig& c, const std::string& v) { c.member = parse_size(k, v); }, [](const RunConfig& c) { return fmt(c.member); }}
#define MOTE_DOUBLE(k, member) \
    {k, [](RunConfig& c, const std::string& v) { c.member = parse_double(k, v); }, [](const RunConfig& c) { return fmt(c.member); }}
#define MOTE_SEED(k, member) \
    {k, [](RunConfig& c, const std::string& v) { c.member = parse_u64(k, v); }, [](const RunConfig& c) { return fmt(c.member, 0); }}
#define MOTE_ENUM(k, member, parse) \
    {k, [](RunConfig& c, const std::string& v) { c.member = wrap(k, [&] { return parse(v); }); }, [](const RunConfig& c) { return to_string(c.member); }}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        MOTE_SIZE("data.raw_dim", data.raw_dim),
        MOTE_SIZE("data.dim", data.dim),
        MOTE_SIZE("data.frames", data.frames),
        MOTE_SIZE("data.seen_classes", data.seen_classes),
        MOTE_SIZE("data.twin_pairs", data.twin_pairs),
        MOTE_SIZE("data.unseen_classes", data.unseen_classes),
        MOTE_SIZE("data.train_per_class", data.train_per_class),
        MOTE_SIZE("data.eval_per_class", data.eval_per_class),
        MOTE_DOUBLE("data.base_scale", data.base_scale),
        MOTE_DOUBLE("data.motif_scale", data.motif_scale),
        MOTE_DOUBLE("data.noise_sigma", data.noise_sigma),
        MOTE_DOUBLE("data.bank_mix", data.bank_mix),
        MOTE_DOUBLE("data.bank_sigma", data.bank_sigma),
        MOTE_ENUM("data.composition", data.composition, unseen_composition_from_string),
        MOTE_SIZE("model.hidden", hidden),
        MOTE_SIZE("model.layers", layers),
        MOTE_SIZE("model.experts", experts),
        MOTE_SIZE("model.heads", heads),
        MOTE_DOUBLE("model.init_std", init_std),
        MOTE_DOUBLE("merge.beta", beta),
        MOTE_ENUM("merge.sampling", tau_sampling, tau_sampling_from_string),
        {"merge.candidates",
         [](RunConfig& c, const std::string& v) { c.tau_candidates = parse_taus("merge.candidates", v); },
         [](const RunConfig& c) {
             std::string s;
             for (const auto& t : c.tau_candidates) s += (s.empty() ? "" : ",") + t.to_string();
             return s;
         }},
        {"merge.per_layer_tau", [](RunConfig& c, const std::string& v) { c.per_layer_tau = parse_bool("merge.per_layer_tau", v); },
         [](const RunConfig& c) { return fmt(c.per_layer_tau); }},
        MOTE_DOUBLE("loss.lambda", weights.lambda),
        MOTE_DOUBLE("loss.eta", weights.eta),
        MOTE_ENUM("loss.wmr", wmr, wmr_kind_from_string),
        {"tfm.enabled", [](RunConfig& c, const std::string& v) { c.tfm.enabled = parse_bool("tfm.enabled", v); },
         [](const RunConfig& c) { return fmt(c.tfm.enabled); }},
        MOTE_SIZE("tfm.k", tfm.k_neighbors),
        MOTE_DOUBLE("tfm.gamma", tfm.gamma),
        MOTE_ENUM("tfm.pooling", tfm.pooling, association_pooling_from_string),
        MOTE_DOUBLE("optim.lr", optim.lr),
        MOTE_DOUBLE("optim.weight_decay", optim.weight_decay),
        MOTE_DOUBLE("optim.beta1", optim.beta1),
        MOTE_DOUBLE("optim.beta2", optim.beta2),
        MOTE_DOUBLE("optim.eps", optim.eps),
        MOTE_DOUBLE("optim.warmup_fraction", optim.warmup_fraction),
        MOTE_SIZE("train.batch_size", batch_size),
        MOTE_SIZE("train.epochs", epochs),
        MOTE_DOUBLE("train.temperature", temperature),
        MOTE_ENUM("train.routing", routing, routing_policy_from_string),
        MOTE_ENUM("train.init_policy", init_policy, init_policy_from_string),
        MOTE_ENUM("train.data_policy", data_policy, data_policy_from_string),
        MOTE_ENUM("eval.aggregation", aggregation, aggregation_from_string),
        MOTE_SEED("seed.data", seeds.data),
        MOTE_SEED("seed.init", seeds.init),
        MOTE_SEED("seed.route", seeds.route),
    };
    return table;
}

#undef MOTE_SIZE
#undef MOTE_DOUBLE
#undef MOTE_SEED
#undef MOTE_ENUM

}  // namespace

std::string to_string(Aggregation a) {
    switch (a) {
        case Aggregation::merge: return "merge";
        case Aggregation::ensemble: return "ensemble";
        case Aggregation::random_routing: return "random";
    }
    return "unknown";
}

Aggregation aggregation_from_string(const std::string& s) {
    if (s == "merge") return Aggregation::merge;
    if (s == "ensemble") return Aggregation::ensemble;
    if (s == "random") return Aggregation::random_routing;
    throw std::invalid_argument("unknown aggregation '" + s + "'");
}

std::string to_string(DataPolicy p) { return p == DataPolicy::routed ? "routed" : "all-experts"; }

DataPolicy data_policy_from_string(const std::string& s) {
    if (s == "routed") return DataPolicy::routed;
    if (s == "all-experts") return DataPolicy::all_experts;
    throw std::invalid_argument("unknown data policy '" + s + "'");
}

void RunConfig::set(const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (f.key == key) {
            f.set(*this, trim(value));
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
    try {
        data.validate();
        stack_config().validate();
        weights.validate();
        tfm.validate();
        (void)merge_schedule();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (tfm.k_neighbors > std::min(data.seen_classes, data.unseen_classes)) {
        throw ConfigError("tfm.k exceeds a bank size");
    }
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(temperature > 0.0)) throw ConfigError("train.temperature must be positive");
    if (!(optim.lr > 0.0) || optim.weight_decay < 0.0 || optim.eps <= 0.0) {
        throw ConfigError("optimizer step size, decay and eps out of range");
    }
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
        throw ConfigError("optimizer moment coefficients must lie in [0, 1)");
    }
    if (!(optim.warmup_fraction >= 0.0 && optim.warmup_fraction < 1.0)) {
        throw ConfigError("optim.warmup_fraction must lie in [0, 1)");
    }
}

StackConfig RunConfig::stack_config() const {
    StackConfig c;
    c.dim = data.dim;
    c.hidden = hidden;
    c.layers = layers;
    c.experts = experts;
    c.heads = heads;
    c.frames = data.frames;
    c.init_std = init_std;
    return c;
}

MergeSchedule RunConfig::merge_schedule() const {
    if (!tau_candidates.empty()) {
        if (tau_sampling != TauSampling::discrete) {
            throw ConfigError("merge.candidates needs merge.sampling = discrete");
        }
        auto s = MergeSchedule::from_candidates(tau_candidates);
        s.beta = beta;
        return s;
    }
    return MergeSchedule::continuous(beta, tau_sampling);
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& f : fields()) out.emplace_back(f.key, f.get(*this));
    return out;
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
    return out;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : entries()) j[k] = v;
    return j;
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        }
        c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

const std::vector<std::string>& RunConfig::keys() {
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const auto& f : fields()) out.push_back(f.key);
        return out;
    }();
    return k;
}

}  // namespace mote

// SPDX-License-Identifier: Apache-2.0

#include "mote/mote.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "mote/ops.hpp"
#include "mote/seed.hpp"
#include "mote/serialize.hpp"

namespace mote {

namespace {

constexpr std::uint64_t kSharedStream = 0x5A4EDULL;

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), true);
}

void check_batch(const MoteStack& stack, const Tensor& e) {
    const auto& c = stack.config();
    if (e.rank() != 2 || e.cols() != c.dim || e.rows() == 0 || e.rows() % c.frames != 0) {
        throw DimensionError("temporal stack expects [B*" + std::to_string(c.frames) + " x " +
                             std::to_string(c.dim) + "], got " + shape_to_string(e.shape()));
    }
}

using FfnFn = std::function<Tensor(std::size_t layer, const Tensor& normed)>;

// Residual stream minus its input: the sum of every residual branch.
Tensor run_stack(const MoteStack& stack, const Tensor& e, const FfnFn& ffn) {
    check_batch(stack, e);
    const std::size_t frames = stack.config().frames;
    const Tensor x0 = add(e, tile_rows(stack.positions(), e.rows() / frames));
    Tensor x = x0;
    for (std::size_t l = 0; l < stack.layer_count(); ++l) {
        const MoteLayer& layer = stack.layer(l);
        x = attention_block(x, layer.attention, frames);
        const Tensor n = layer_norm(x, layer.ffn_norm_gain, layer.ffn_norm_bias);
        x = add(x, ffn(l, n));
    }
    return sub(x, x0);
}

ExpertFfn combine(const MoteLayer& layer, const std::function<Tensor(const std::vector<Tensor>&)>& fn) {
    std::vector<Tensor> w_up, b_up, w_dn, b_dn;
    for (const auto& ex : layer.experts) {
        w_up.push_back(ex.w_up);
        b_up.push_back(ex.b_up);
        w_dn.push_back(ex.w_dn);
        b_dn.push_back(ex.b_dn);
    }
    ExpertFfn out;
    out.w_up = fn(w_up);
    out.b_up = fn(b_up);
    out.w_dn = fn(w_dn);
    out.b_dn = fn(b_dn);
    return out;
}

nlohmann::json expert_to_json(const ExpertFfn& ex) {
    return {{"w_up", tensor_to_json(ex.w_up)},
            {"b_up", tensor_to_json(ex.b_up)},
            {"w_dn", tensor_to_json(ex.w_dn)},
            {"b_dn", tensor_to_json(ex.b_dn)},
            {"init_seed", ex.init_seed}};
}

ExpertFfn expert_from_json(const nlohmann::json& j) {
    ExpertFfn ex;
    ex.w_up = tensor_from_json(j.at("w_up"), true);
    ex.b_up = tensor_from_json(j.at("b_up"), true);
    ex.w_dn = tensor_from_json(j.at("w_dn"), true);
    ex.b_dn = tensor_from_json(j.at("b_dn"), true);
    ex.init_seed = j.at("init_seed").get<std::uint64_t>();
    return ex;
}

const char* const kAttentionNames[] = {"norm_gain", "norm_bias", "w_q", "w_k", "w_v",
                                       "w_o",       "b_q",       "b_k", "b_v", "b_o"};

nlohmann::json attention_to_json(const AttentionParams& p) {
    nlohmann::json j;
    const auto params = p.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) j[kAttentionNames[i]] = tensor_to_json(params[i]);
    j["heads"] = p.heads;
    return j;
}

AttentionParams attention_from_json(const nlohmann::json& j) {
    AttentionParams p;
    p.heads = j.at("heads").get<std::size_t>();
    Tensor* slots[] = {&p.norm_gain, &p.norm_bias, &p.w_q, &p.w_k, &p.w_v,
                       &p.w_o,       &p.b_q,       &p.b_k, &p.b_v, &p.b_o};
    for (std::size_t i = 0; i < 10; ++i) *slots[i] = tensor_from_json(j.at(kAttentionNames[i]), true);
    return p;
}

Tensor clone_param(const Tensor& t) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    return c;
}

ExpertFfn clone_expert(const ExpertFfn& ex) {
    return {clone_param(ex.w_up), clone_param(ex.b_up), clone_param(ex.w_dn), clone_param(ex.b_dn),
            ex.init_seed};
}

}  // namespace

void StackConfig::validate() const {
    if (dim == 0 || hidden == 0 || layers == 0 || experts == 0 || frames == 0) {
        throw std::invalid_argument("stack dimensions, layers, experts and frames must be positive");
    }
    if (heads == 0 || dim % heads != 0) {
        throw std::invalid_argument("dim " + std::to_string(dim) + " not divisible by heads " +
                                    std::to_string(heads));
    }
    if (!(init_std > 0.0)) throw std::invalid_argument("init_std must be positive");
}

nlohmann::json StackConfig::to_json() const {
    return {{"dim", dim},       {"hidden", hidden}, {"layers", layers},    {"experts", experts},
            {"heads", heads},   {"frames", frames}, {"init_std", init_std}};
}

StackConfig StackConfig::from_json(const nlohmann::json& j) {
    StackConfig c;
    c.dim = j.at("dim").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.experts = j.at("experts").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.frames = j.at("frames").get<std::size_t>();
    c.init_std = j.at("init_std").get<double>();
    c.validate();
    return c;
}

ExpertFfn ExpertFfn::init(std::size_t dim, std::size_t hidden, std::uint64_t seed, double stddev) {
    Rng rng(seed);
    ExpertFfn ex;
    ex.init_seed = seed;
    ex.w_up = normal_tensor({dim, hidden}, stddev, rng);
    ex.b_up = Tensor::zeros({hidden}, true);
    ex.w_dn = normal_tensor({hidden, dim}, stddev, rng);
    ex.b_dn = Tensor::zeros({dim}, true);
    return ex;
}

std::vector<Tensor> ExpertFfn::parameters() const { return {w_up, b_up, w_dn, b_dn}; }

Tensor expert_forward(const Tensor& x, const ExpertFfn& ffn) {
    return add_bias(matmul(gelu(add_bias(matmul(x, ffn.w_up), ffn.b_up)), ffn.w_dn), ffn.b_dn);
}

std::string to_string(InitPolicy p) { return p == InitPolicy::same ? "same" : "different"; }

InitPolicy init_policy_from_string(const std::string& s) {
    if (s == "different") return InitPolicy::different;
    if (s == "same") return InitPolicy::same;
    throw std::invalid_argument("unknown init policy '" + s + "'");
}

MoteStack::MoteStack(StackConfig config, std::uint64_t init_seed, InitPolicy policy)
    : config_(config), init_seed_(init_seed) {
    config_.validate();
    Rng shared(derive_seed(init_seed, {kSharedStream}));
    positions_ = normal_tensor({config_.frames, config_.dim}, config_.init_std, shared);
    for (std::size_t l = 0; l < config_.layers; ++l) {
        MoteLayer layer;
        layer.index = l;
        layer.attention = AttentionParams::init(config_.dim, config_.heads, shared, config_.init_std);
        layer.ffn_norm_gain = Tensor::full({config_.dim}, 1.0, true);
        layer.ffn_norm_bias = Tensor::zeros({config_.dim}, true);
        for (std::size_t i = 0; i < config_.experts; ++i) {
            const std::uint64_t slot = policy == InitPolicy::same ? 0 : i + 1;
            layer.experts.push_back(ExpertFfn::init(config_.dim, config_.hidden,
                                                    derive_seed(init_seed, {l + 1, slot}),
                                                    config_.init_std));
        }
        layers_.push_back(std::move(layer));
    }
}

std::vector<Tensor> MoteStack::shared_parameters() const {
    std::vector<Tensor> out = {positions_};
    for (const auto& layer : layers_) {
        for (const auto& p : layer.attention.parameters()) out.push_back(p);
        out.push_back(layer.ffn_norm_gain);
        out.push_back(layer.ffn_norm_bias);
    }
    return out;
}

std::vector<Tensor> MoteStack::expert_parameters(std::size_t layer, std::size_t expert) const {
    return layers_.at(layer).experts.at(expert).parameters();
}

std::vector<Tensor> MoteStack::parameters() const {
    std::vector<Tensor> out = shared_parameters();
    for (std::size_t l = 0; l < layers_.size(); ++l)
        for (std::size_t i = 0; i < layers_[l].experts.size(); ++i)
            for (const auto& p : expert_parameters(l, i)) out.push_back(p);
    return out;
}

std::size_t MoteStack::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
}

MoteStack MoteStack::clone() const {
    MoteStack out;
    out.config_ = config_;
    out.init_seed_ = init_seed_;
    out.positions_ = clone_param(positions_);
    for (const auto& layer : layers_) {
        MoteLayer c;
        c.index = layer.index;
        c.attention.heads = layer.attention.heads;
        const auto src = layer.attention.parameters();
        Tensor* slots[] = {&c.attention.norm_gain, &c.attention.norm_bias, &c.attention.w_q,
                           &c.attention.w_k,       &c.attention.w_v,       &c.attention.w_o,
                           &c.attention.b_q,       &c.attention.b_k,       &c.attention.b_v,
                           &c.attention.b_o};
        for (std::size_t i = 0; i < src.size(); ++i) *slots[i] = clone_param(src[i]);
        c.ffn_norm_gain = clone_param(layer.ffn_norm_gain);
        c.ffn_norm_bias = clone_param(layer.ffn_norm_bias);
        for (const auto& ex : layer.experts) c.experts.push_back(clone_expert(ex));
        out.layers_.push_back(std::move(c));
    }
    return out;
}

nlohmann::json MoteStack::to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : layers_) {
        nlohmann::json experts = nlohmann::json::array();
        for (const auto& ex : layer.experts) experts.push_back(expert_to_json(ex));
        layers.push_back({{"attention", attention_to_json(layer.attention)},
                          {"ffn_norm_gain", tensor_to_json(layer.ffn_norm_gain)},
                          {"ffn_norm_bias", tensor_to_json(layer.ffn_norm_bias)},
                          {"experts", experts}});
    }
    return {{"config", config_.to_json()},
            {"init_seed", init_seed_},
            {"positions", tensor_to_json(positions_)},
            {"layers", layers}};
}

MoteStack MoteStack::from_json(const nlohmann::json& j) {
    MoteStack s;
    s.config_ = StackConfig::from_json(j.at("config"));
    s.init_seed_ = j.at("init_seed").get<std::uint64_t>();
    s.positions_ = tensor_from_json(j.at("positions"), true);
    const auto& layers = j.at("layers");
    if (layers.size() != s.config_.layers) throw std::invalid_argument("checkpoint layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        MoteLayer layer;
        layer.index = l;
        layer.attention = attention_from_json(layers[l].at("attention"));
        layer.ffn_norm_gain = tensor_from_json(layers[l].at("ffn_norm_gain"), true);
        layer.ffn_norm_bias = tensor_from_json(layers[l].at("ffn_norm_bias"), true);
        for (const auto& ex : layers[l].at("experts")) layer.experts.push_back(expert_from_json(ex));
        if (layer.experts.size() != s.config_.experts) {
            throw std::invalid_argument("checkpoint expert count mismatch in layer " + std::to_string(l));
        }
        s.layers_.push_back(std::move(layer));
    }
    return s;
}

// ---------------------------------------------------------------------------

std::string to_string(RoutingPolicy p) {
    switch (p) {
        case RoutingPolicy::multinomial: return "multinomial";
        case RoutingPolicy::random: return "random";
        case RoutingPolicy::fixed: return "fixed";
    }
    return "unknown";
}

RoutingPolicy routing_policy_from_string(const std::string& s) {
    if (s == "multinomial") return RoutingPolicy::multinomial;
    if (s == "random") return RoutingPolicy::random;
    if (s == "fixed") return RoutingPolicy::fixed;
    throw std::invalid_argument("unknown routing policy '" + s + "'");
}

RoutingDecision RoutingDecision::uniform(std::size_t layers, std::size_t expert) {
    return {std::vector<std::size_t>(layers, expert)};
}

std::vector<double> routing_probabilities(std::size_t experts) {
    if (experts == 0) throw std::invalid_argument("routing needs at least one expert");
    std::vector<double> p(experts);
    double total = 0.0;
    for (std::size_t i = 0; i < experts; ++i) {
        // shifted by the largest exponent N for stability
        p[i] = std::exp(static_cast<double>(i + 1) - static_cast<double>(experts));
        total += p[i];
    }
    for (auto& v : p) v /= total;
    return p;
}

std::size_t route(std::size_t experts, Rng& rng) {
    const auto p = routing_probabilities(experts);
    std::discrete_distribution<std::size_t> dist(p.begin(), p.end());
    return dist(rng);
}

std::size_t route(const MoteLayer& layer, Rng& rng) { return route(layer.expert_count(), rng); }

RoutingDecision sample_routing(const MoteStack& stack, RoutingPolicy policy, Rng& rng) {
    RoutingDecision d;
    const std::size_t n = stack.expert_count();
    for (std::size_t l = 0; l < stack.layer_count(); ++l) {
        switch (policy) {
            case RoutingPolicy::multinomial: d.experts.push_back(route(stack.layer(l), rng)); break;
            case RoutingPolicy::random:
                d.experts.push_back(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
                break;
            case RoutingPolicy::fixed: d.experts.push_back(n - 1); break;
        }
    }
    return d;
}

// ---------------------------------------------------------------------------

double Tau::value() const {
    if (!value_) throw std::logic_error("infinite tau has no finite value");
    return *value_;
}

nlohmann::json Tau::to_json() const {
    if (is_infinite()) return "inf";
    return *value_;
}

Tau Tau::from_json(const nlohmann::json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() == "inf") return infinity();
        throw std::invalid_argument("tau string must be \"inf\"");
    }
    return finite(j.get<double>());
}

std::string Tau::to_string() const {
    if (is_infinite()) return "inf";
    std::ostringstream os;
    os << *value_;
    return os.str();
}

std::string to_string(TauSampling s) {
    switch (s) {
        case TauSampling::discrete: return "discrete";
        case TauSampling::continuous_normal: return "continuous-normal";
        case TauSampling::continuous_uniform: return "continuous-uniform";
    }
    return "unknown";
}

TauSampling tau_sampling_from_string(const std::string& s) {
    if (s == "discrete") return TauSampling::discrete;
    if (s == "continuous-normal") return TauSampling::continuous_normal;
    if (s == "continuous-uniform") return TauSampling::continuous_uniform;
    throw std::invalid_argument("unknown tau sampling mode '" + s + "'");
}

MergeSchedule MergeSchedule::discrete(double beta) {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be positive");
    MergeSchedule s;
    s.beta = beta;
    s.mode = TauSampling::discrete;
    for (int n = 0; n <= 4; ++n) {
        const double v = std::ldexp(beta, n);
        s.candidates.push_back(Tau::finite(v));
        s.candidates.push_back(Tau::finite(-v));
    }
    s.candidates.push_back(Tau::infinity());
    return s;
}

MergeSchedule MergeSchedule::continuous(double beta, TauSampling mode) {
    if (mode == TauSampling::discrete) return discrete(beta);
    if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be positive");
    MergeSchedule s;
    s.beta = beta;
    s.mode = mode;
    return s;
}

MergeSchedule MergeSchedule::from_candidates(std::vector<Tau> candidates) {
    if (candidates.empty()) throw std::invalid_argument("tau candidate set is empty");
    for (const auto& t : candidates)
        if (!t.is_infinite() && (t.value() == 0.0 || !std::isfinite(t.value())))
            throw std::invalid_argument("tau candidates must be non-zero");
    MergeSchedule s;
    s.mode = TauSampling::discrete;
    s.candidates = std::move(candidates);
    return s;
}

Tau sample_tau(const MergeSchedule& schedule, Rng& rng) {
    constexpr double kExclusion = 1e-6;
    switch (schedule.mode) {
        case TauSampling::discrete: {
            if (schedule.candidates.empty()) throw std::invalid_argument("tau candidate set is empty");
            std::uniform_int_distribution<std::size_t> pick(0, schedule.candidates.size() - 1);
            return schedule.candidates[pick(rng)];
        }
        case TauSampling::continuous_normal: {
            std::normal_distribution<double> dist(0.0, 1.0);
            for (;;) {
                const double v = dist(rng);
                if (std::abs(v) >= kExclusion) return Tau::finite(v);
            }
        }
        case TauSampling::continuous_uniform: {
            const double bound = 16.0 * schedule.beta;
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (;;) {
                const double v = dist(rng);
                if (std::abs(v) >= kExclusion) return Tau::finite(v);
            }
        }
    }
    throw std::logic_error("unreachable tau sampling mode");
}

std::vector<double> merge_coefficients(std::size_t experts, Tau tau) {
    if (experts == 0) throw std::invalid_argument("merging needs at least one expert");
    if (tau.is_infinite()) return std::vector<double>(experts, 1.0 / static_cast<double>(experts));
    const double t = tau.value();
    if (t == 0.0 || !std::isfinite(t)) throw std::invalid_argument("merge temperature must be non-zero");
    // softmax((i + 1) / -t) is softmax((i + 1) / t) reversed; computing it
    // that way makes the reversal exact.
    const double a = std::abs(t);
    std::vector<double> z(experts);
    for (std::size_t i = 0; i < experts; ++i) z[i] = static_cast<double>(i + 1) / a;
    const double top = z.back();
    double total = 0.0;
    for (auto& v : z) {
        v = std::exp(v - top);
        total += v;
    }
    for (auto& v : z) v /= total;
    if (t < 0.0) std::reverse(z.begin(), z.end());
    return z;
}

ExpertFfn merge_uniform(const MoteLayer& layer) {
    if (layer.experts.empty()) throw std::invalid_argument("merging needs at least one expert");
    return combine(layer, [](const std::vector<Tensor>& parts) { return average(parts); });
}

ExpertFfn merge_soft(const MoteLayer& layer, Tau tau) {
    if (tau.is_infinite()) return merge_uniform(layer);
    const auto c = merge_coefficients(layer.expert_count(), tau);
    return combine(layer, [&c](const std::vector<Tensor>& parts) { return weighted_sum(parts, c); });
}

// ---------------------------------------------------------------------------

Tensor forward_routed(const MoteStack& stack, const Tensor& e, const RoutingDecision& decision) {
    if (decision.experts.size() != stack.layer_count()) {
        throw std::invalid_argument("routing decision covers " + std::to_string(decision.experts.size()) +
                                    " layers, stack has " + std::to_string(stack.layer_count()));
    }
    for (std::size_t idx : decision.experts)
        if (idx >= stack.expert_count()) throw std::out_of_range("routed expert index out of range");
    return run_stack(stack, e, [&](std::size_t l, const Tensor& n) {
        return expert_forward(n, stack.layer(l).experts[decision.experts[l]]);
    });
}

Tensor forward_merged(const MoteStack& stack, const Tensor& e, Tau tau) {
    const std::vector<Tau> per_layer(stack.layer_count(), tau);
    return forward_merged(stack, e, per_layer);
}

Tensor forward_merged(const MoteStack& stack, const Tensor& e, std::span<const Tau> per_layer) {
    if (per_layer.size() != stack.layer_count()) {
        throw std::invalid_argument("need one tau per layer");
    }
    return run_stack(stack, e, [&](std::size_t l, const Tensor& n) {
        return expert_forward(n, merge_soft(stack.layer(l), per_layer[l]));
    });
}

Tensor forward_dense(const MoteStack& stack, const Tensor& e) {
    return run_stack(stack, e, [&](std::size_t l, const Tensor& n) {
        std::vector<Tensor> outs;
        for (const auto& ex : stack.layer(l).experts) outs.push_back(expert_forward(n, ex));
        return average(outs);
    });
}

Tensor forward_random_routing(const MoteStack& stack, const Tensor& e, Rng& rng) {
    check_batch(stack, e);
    const std::size_t frames = stack.config().frames;
    const std::size_t batch = e.rows() / frames;
    std::vector<Tensor> parts;
    std::vector<std::size_t> rows(frames);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < frames; ++t) rows[t] = b * frames + t;
        const auto decision = sample_routing(stack, RoutingPolicy::random, rng);
        parts.push_back(forward_routed(stack, gather_rows(e, rows), decision));
    }
    return concat(parts);
}

Tensor video_embedding(const Tensor& e, const Tensor& temporal, std::size_t frames) {
    if (e.shape() != temporal.shape()) {
        throw DimensionError("video_embedding: " + shape_to_string(e.shape()) + " vs " +
                             shape_to_string(temporal.shape()));
    }
    return pooled_spatial(add(e, temporal), frames);
}

Tensor ensemble_logits(const MoteStack& stack, const Tensor& e, const EmbeddingBank& bank,
                       double temperature) {
    std::vector<Tensor> logits;
    for (std::size_t i = 0; i < stack.expert_count(); ++i) {
        const Tensor h = forward_routed(stack, e, RoutingDecision::uniform(stack.layer_count(), i));
        logits.push_back(similarity_logits(video_embedding(e, h, stack.config().frames), bank, temperature));
    }
    return average(logits);
}

MoteStack deployed(const MoteStack& stack) {
    MoteStack out = stack.clone();
    out.config_.experts = 1;
    for (std::size_t l = 0; l < out.layers_.size(); ++l) {
        ExpertFfn merged;
        {
            NoGradGuard guard;
            merged = merge_uniform(stack.layer(l));
        }
        for (Tensor* t : {&merged.w_up, &merged.b_up, &merged.w_dn, &merged.b_dn}) t->set_requires_grad(true);
        merged.init_seed = stack.layer(l).experts.front().init_seed;
        out.layers_[l].experts = {merged};
    }
    return out;
}

}  // namespace mote

// SPDX-License-Identifier: Apache-2.0
//
// Mixture-of-temporal-experts stack. Each layer holds shared pre-norm
// attention and N interchangeable feed-forward experts. Training activates one
// expert per layer per batch; inference collapses the experts into a single
// FFN by weight averaging, so the deployed stack has single-FFN structure.
//
// Expert indices are 0-based in this API. Routing and merge weights use the
// 1-based exponent i + 1, i.e. P(expert i) = exp(i + 1) / Σ_j exp(j + 1).

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mote/attention.hpp"
#include "mote/backbone.hpp"
#include "mote/tensor.hpp"

namespace mote {

using Rng = std::mt19937_64;

struct StackConfig {
    std::size_t dim = 64;
    std::size_t hidden = 64;
    std::size_t layers = 2;
    std::size_t experts = 4;
    std::size_t heads = 4;
    std::size_t frames = 8;
    double init_std = 0.02;

    void validate() const;
    nlohmann::json to_json() const;
    static StackConfig from_json(const nlohmann::json& j);
    bool operator==(const StackConfig&) const = default;
};

struct ExpertFfn {
    Tensor w_up;  // [D x H]
    Tensor b_up;  // [H]
    Tensor w_dn;  // [H x D]
    Tensor b_dn;  // [D]
    std::uint64_t init_seed = 0;

    /// Weights ~ Normal(0, stddev), biases zero.
    static ExpertFfn init(std::size_t dim, std::size_t hidden, std::uint64_t seed, double stddev);
    std::vector<Tensor> parameters() const;
    std::size_t dim() const { return w_up.rows(); }
    std::size_t hidden() const { return w_up.cols(); }
};

/// gelu(x W_up + b_up) W_dn + b_dn on rows of x.
Tensor expert_forward(const Tensor& x, const ExpertFfn& ffn);

struct MoteLayer {
    AttentionParams attention;
    Tensor ffn_norm_gain, ffn_norm_bias;  // pre-FFN norm, shared by all experts
    std::vector<ExpertFfn> experts;
    std::size_t index = 0;

    std::size_t expert_count() const { return experts.size(); }
};

enum class InitPolicy { different, same };
std::string to_string(InitPolicy p);
InitPolicy init_policy_from_string(const std::string& s);

class MoteStack {
public:
    MoteStack(StackConfig config, std::uint64_t init_seed, InitPolicy policy = InitPolicy::different);

    const StackConfig& config() const { return config_; }
    std::uint64_t init_seed() const { return init_seed_; }
    std::size_t layer_count() const { return layers_.size(); }
    std::size_t expert_count() const { return config_.experts; }

    const std::vector<MoteLayer>& layers() const { return layers_; }
    std::vector<MoteLayer>& layers() { return layers_; }
    const MoteLayer& layer(std::size_t l) const { return layers_.at(l); }
    MoteLayer& layer(std::size_t l) { return layers_.at(l); }

    /// Learned frame-position embeddings [T x D] added before the first layer.
    const Tensor& positions() const { return positions_; }

    /// Attention, norms and positions: everything not owned by an expert.
    std::vector<Tensor> shared_parameters() const;
    std::vector<Tensor> expert_parameters(std::size_t layer, std::size_t expert) const;
    std::vector<Tensor> parameters() const;
    std::size_t parameter_count() const;

    /// Deep copy with fresh storage.
    MoteStack clone() const;

    nlohmann::json to_json() const;
    static MoteStack from_json(const nlohmann::json& j);

private:
    MoteStack() = default;
    friend MoteStack deployed(const MoteStack& stack);

    StackConfig config_;
    std::uint64_t init_seed_ = 0;
    Tensor positions_;
    std::vector<MoteLayer> layers_;
};

// ---------------------------------------------------------------------------
// Routing

enum class RoutingPolicy { multinomial, random, fixed };
std::string to_string(RoutingPolicy p);
RoutingPolicy routing_policy_from_string(const std::string& s);

/// Activated expert per layer for one batch.
struct RoutingDecision {
    std::vector<std::size_t> experts;

    /// Expert `i` active in every layer.
    static RoutingDecision uniform(std::size_t layers, std::size_t expert);
};

/// softmax([1, ..., N]).
std::vector<double> routing_probabilities(std::size_t experts);

/// One multinomial draw over the layer's experts.
std::size_t route(const MoteLayer& layer, Rng& rng);
std::size_t route(std::size_t experts, Rng& rng);

/// Independent draw per layer. `fixed` always picks the last expert and
/// `random` is uniform.
RoutingDecision sample_routing(const MoteStack& stack, RoutingPolicy policy, Rng& rng);

// ---------------------------------------------------------------------------
// Merging

/// Merge temperature. Infinity is a first-class value, not a large float.
class Tau {
public:
    static Tau infinity() { return Tau(); }
    static Tau finite(double value) { return Tau(value); }

    bool is_infinite() const { return !value_.has_value(); }
    /// Throws std::logic_error for the infinite sentinel.
    double value() const;

    nlohmann::json to_json() const;
    static Tau from_json(const nlohmann::json& j);
    std::string to_string() const;
    bool operator==(const Tau&) const = default;

private:
    Tau() = default;
    explicit Tau(double v) : value_(v) {}
    std::optional<double> value_;
};

enum class TauSampling { discrete, continuous_normal, continuous_uniform };
std::string to_string(TauSampling s);
TauSampling tau_sampling_from_string(const std::string& s);

struct MergeSchedule {
    double beta = 0.6;
    TauSampling mode = TauSampling::discrete;
    std::vector<Tau> candidates;

    /// {±2^n β : n = 0..4} ∪ {∞}, ordered +β, -β, +2β, -2β, ..., ∞.
    static MergeSchedule discrete(double beta);
    static MergeSchedule continuous(double beta, TauSampling mode);
    static MergeSchedule from_candidates(std::vector<Tau> candidates);
};

/// Discrete: uniform over the candidates. Continuous normal: standard normal.
/// Continuous uniform: U[-16β, 16β]. Continuous draws within 1e-6 of zero are
/// redrawn.
Tau sample_tau(const MergeSchedule& schedule, Rng& rng);

/// softmax((i + 1) / τ) over i = 0..N-1; exactly 1/N each for τ = ∞.
/// Throws std::invalid_argument for τ = 0.
std::vector<double> merge_coefficients(std::size_t experts, Tau tau);

/// Elementwise mean of all experts: (Σ θ_i) / N.
ExpertFfn merge_uniform(const MoteLayer& layer);
/// Σ c_i θ_i with c = merge_coefficients(N, τ). τ = ∞ takes the uniform path.
/// Differentiable: gradients reach each expert scaled by its coefficient.
ExpertFfn merge_soft(const MoteLayer& layer, Tau tau);

// ---------------------------------------------------------------------------
// Forward passes. `e` is a packed batch [B*T x D] of frozen frame
// embeddings; the result is the temporal feature h(e) with the same shape.

Tensor forward_routed(const MoteStack& stack, const Tensor& e, const RoutingDecision& decision);
Tensor forward_merged(const MoteStack& stack, const Tensor& e, Tau tau);
Tensor forward_merged(const MoteStack& stack, const Tensor& e, std::span<const Tau> per_layer);
/// Every expert processes the batch; each layer uses the mean of the expert
/// outputs ("all experts" data policy).
Tensor forward_dense(const MoteStack& stack, const Tensor& e);
/// Each video gets its own uniformly drawn expert per layer.
Tensor forward_random_routing(const MoteStack& stack, const Tensor& e, Rng& rng);

/// Mean over frames of (e + temporal): [B*T x D] -> [B x D].
Tensor video_embedding(const Tensor& e, const Tensor& temporal, std::size_t frames);

/// Mean of the N expert-pure classification logits [B x C].
Tensor ensemble_logits(const MoteStack& stack, const Tensor& e, const EmbeddingBank& bank,
                       double temperature);

/// Stack with every layer's experts replaced by merge_uniform; N = 1.
MoteStack deployed(const MoteStack& stack);

}  // namespace mote

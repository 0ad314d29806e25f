// SPDX-License-Identifier: Apache-2.0
//
// Training loop, evaluation protocols and reports.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mote/config.hpp"
#include "mote/mote.hpp"
#include "mote/objectives.hpp"
#include "mote/synthdata.hpp"
#include "mote/tfm.hpp"

namespace mote {

/// Frozen embeddings of a whole episode set, [N*T x D].
struct EncodedSet {
    Tensor embeddings;
    std::vector<ClassId> labels;
    std::size_t frames = 1;

    static EncodedSet encode(const std::vector<Episode>& episodes, const FrozenEncoder& encoder);
    std::size_t size() const { return labels.size(); }
    EncodedBatch batch(std::span<const std::size_t> videos) const;
    EncodedBatch all() const;
};

/// Generated episodes plus their frozen encodings.
struct PreparedData {
    GeneratedData generated;
    EncodedSet train;
    EncodedSet close_eval;
    EncodedSet zeroshot_eval;
    EncodedSet unseen_train;

    const SyntheticWorld& world() const { return generated.world; }
};

PreparedData prepare_data(const DataSpec& spec, std::uint64_t seed);

struct EpochLog {
    std::size_t epoch = 0;
    double loss_all = 0.0;
    double loss_te = 0.0;
    double loss_wmr = 0.0;
    double loss_mse = 0.0;
};

struct TrainResult {
    MoteStack stack;
    std::vector<EpochLog> history;
    std::size_t steps = 0;
    Rng route_rng;
    Rng order_rng;
};

/// Per-step callback, e.g. for progress output: (step, total steps, loss).
using StepHook = std::function<void(std::size_t, std::size_t, double)>;

/// Fine-tunes a fresh stack built from `config` on `train` against `bank`.
/// Throws NumericDivergence on a non-finite loss or gradient.
TrainResult train(const RunConfig& config, const EncodedSet& train, const EmbeddingBank& bank,
                  const StepHook& hook = {});
/// Continues training `stack` in place.
TrainResult train(const RunConfig& config, MoteStack stack, const EncodedSet& train, const EmbeddingBank& bank,
                  const StepHook& hook = {});

struct SplitMetrics {
    double top1 = 0.0;  // percent
    double top5 = 0.0;  // percent
    std::size_t count = 0;
    double mean_rho = 1.0;
    std::vector<std::size_t> predictions;  // bank row index per video

    nlohmann::json to_json() const;
};

struct EvalOptions {
    const EmbeddingBank* bank = nullptr;              // classification bank
    const EmbeddingBank* fine_tuning_proxies = nullptr;  // required when TFM is on
    const EmbeddingBank* test_proxies = nullptr;         // required when TFM is on
    TfmConfig tfm{.enabled = false};
    Aggregation aggregation = Aggregation::merge;
    double temperature = kDefaultTemperature;
    std::uint64_t random_routing_seed = 0;
    /// Evaluate expert `i` active in every layer instead of aggregating.
    std::optional<std::size_t> single_expert;
    std::size_t chunk = 64;
};

/// Top-1 / top-5 over `set`. The video embedding is e + rho * t with e, t the
/// frame means of the frozen and temporal features (rho = 1 without TFM).
SplitMetrics evaluate(const MoteStack& stack, const EncodedSet& set, const EvalOptions& options);

/// n / Σ 1/v. Throws std::invalid_argument unless every value is positive.
double harmonic_mean(std::span<const double> values);

struct ExpertRow {
    std::string name;  // "expert-<i>" or "merged"
    double close_top1 = 0.0;
    double zeroshot_top1 = 0.0;
};

/// Every expert-pure stack, then the merged stack, on both splits (no TFM).
std::vector<ExpertRow> expert_wise_eval(const MoteStack& stack, const PreparedData& data, double temperature);

/// Mean cosine similarity of video features between the N expert-pure stacks
/// and the merged stack (last row/column) over `probe`.
std::vector<std::vector<double>> expert_similarity(const MoteStack& stack, const EncodedSet& probe);

struct EvalReport {
    nlohmann::json config;
    Seeds seeds;
    std::string run_id;
    SplitMetrics close, zeroshot;
    SplitMetrics mixed_close_tfm_off, mixed_close_tfm_on;
    SplitMetrics mixed_zeroshot_tfm_off, mixed_zeroshot_tfm_on;
    double hm_zs = 0.0;
    double trade_off = 0.0;
    std::vector<ExpertRow> experts;
    std::vector<std::vector<double>> similarity;
    std::vector<EpochLog> history;

    nlohmann::json to_json() const;
    /// Recomputes the harmonic means from the stored per-split numbers.
    static bool self_consistent(const nlohmann::json& report, double tol = 1e-9);
};

/// Stable 12-hex-digit id of a configuration (seeds included).
std::string run_id(const RunConfig& config);

/// Close-set, zero-shot and mixed-bank metrics, expert table and similarity
/// matrix for a trained stack. TFM and aggregation follow `config`.
EvalReport build_report(const RunConfig& config, const MoteStack& stack, const PreparedData& data,
                        const std::vector<EpochLog>& history);

nlohmann::json checkpoint_json(const RunConfig& config, const TrainResult& result);
nlohmann::json deployed_json(const RunConfig& config, const MoteStack& stack);

struct LoadedCheckpoint {
    RunConfig config;
    MoteStack stack;
    bool deployed = false;
};
LoadedCheckpoint load_checkpoint(const nlohmann::json& j);

/// Expert table of a loaded checkpoint. A merged-only (deployed) checkpoint
/// has no experts left to compare and raises std::invalid_argument.
std::vector<ExpertRow> expert_wise_eval(const LoadedCheckpoint& checkpoint, const PreparedData& data);

/// Training set, its bank and the proxy banks for an evaluation split name
/// ("close", "zeroshot", "mixed" or "fewshot:K").
struct SplitSpec {
    std::string name;
    std::size_t shots = 0;  // fewshot only
    static SplitSpec parse(const std::string& s);
};

/// K-shot training set over unseen classes, tiled to the unseen pool size.
EncodedSet fewshot_train_set(const PreparedData& data, std::size_t k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Ablation grids: one "key = v1, v2, ..." axis per line.

struct GridAxis {
    std::string key;
    std::vector<std::string> values;
};

/// Parses and validates a grid; unknown keys or bad values raise ConfigError
/// before anything runs.
std::vector<GridAxis> parse_grid(const std::string& text, const RunConfig& base);
/// Cartesian product, first axis slowest. An empty grid yields one empty override set.
std::vector<std::vector<std::pair<std::string, std::string>>> expand_grid(const std::vector<GridAxis>& axes);

struct AblationRun {
    std::vector<std::pair<std::string, std::string>> overrides;
    EvalReport report;
};

std::vector<AblationRun> ablate(const RunConfig& base, const std::vector<GridAxis>& axes,
                                const std::function<void(std::size_t, std::size_t)>& progress = {});
nlohmann::json ablation_json(const std::vector<AblationRun>& runs);
std::string ablation_table(const std::vector<AblationRun>& runs);

}  // namespace mote

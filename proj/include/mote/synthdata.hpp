// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic "videos". Each class has a base frame pattern and an
// ordered motif of per-frame perturbations. Motion-twin pairs share a base and
// play the same motif in opposite time order, so their frame-mean features
// agree and only temporal modelling separates them. Unseen classes recombine
// seen motifs over a base lifted from their own bank embedding.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mote/backbone.hpp"
#include "mote/tensor.hpp"

namespace mote {

/// Motif of an unseen class with parents (a, b): first half of a's then second
/// half of b's, their average, a fresh one, or a's motif unchanged.
enum class UnseenComposition { splice, blend, novel, inherit };
std::string to_string(UnseenComposition c);
UnseenComposition unseen_composition_from_string(const std::string& s);

struct DataSpec {
    std::size_t raw_dim = 32;
    std::size_t dim = 64;
    std::size_t frames = 8;
    std::size_t seen_classes = 12;
    std::size_t twin_pairs = 4;
    std::size_t unseen_classes = 8;
    std::size_t train_per_class = 50;
    std::size_t eval_per_class = 20;
    double base_scale = 0.75;
    double motif_scale = 2.0;
    double noise_sigma = 0.5;
    double bank_mix = 0.5;
    double bank_sigma = 0.3;
    UnseenComposition composition = UnseenComposition::inherit;

    void validate() const;
    nlohmann::json to_json() const;
    static DataSpec from_json(const nlohmann::json& j);
    bool operator==(const DataSpec&) const = default;
};

struct ClassSpec {
    ClassId id = 0;
    std::vector<double> base;                // [raw_dim]
    std::vector<std::vector<double>> motif;  // frames x [raw_dim], zero mean over time
    double noise_sigma = 0.0;
};

struct Episode {
    Tensor frames;  // [T x raw_dim]
    ClassId label = 0;
};

struct SyntheticWorld {
    DataSpec spec;
    std::uint64_t seed = 0;
    FrozenEncoder encoder;
    EmbeddingBank fine_tuning_bank;
    EmbeddingBank test_bank;
    std::vector<ClassSpec> seen;
    std::vector<ClassSpec> unseen;
    std::vector<std::pair<ClassId, ClassId>> twins;
    std::vector<std::pair<ClassId, ClassId>> unseen_parents;

    bool is_twin(ClassId id) const;
};

struct GeneratedData {
    SyntheticWorld world;
    std::vector<Episode> train;          // seen classes
    std::vector<Episode> close_eval;     // seen classes
    std::vector<Episode> zeroshot_eval;  // unseen classes
    std::vector<Episode> unseen_train;   // unseen classes, pool for few-shot training
};

/// Seen labels are 0..S-1, the first 2P of them forming twin pairs
/// (0,1), (2,3), ...; unseen labels follow at S..S+U-1.
GeneratedData generate_split(const DataSpec& spec, std::uint64_t seed);

/// One episode of class `cls`; `index` selects the per-episode noise stream.
Episode make_episode(const ClassSpec& cls, std::size_t frames, std::uint64_t seed, std::uint64_t stream,
                     std::size_t index);

/// k episodes per class drawn without replacement, then tiled to the size of
/// `train`. Throws std::invalid_argument for k = 0 or k above the class size.
std::vector<Episode> kshot_sample(const std::vector<Episode>& train, std::size_t k, std::uint64_t seed);

/// Union of two banks keyed by label; a label present in both keeps the
/// fine-tuning row.
EmbeddingBank mixed_bank(const EmbeddingBank& fine_tuning, const EmbeddingBank& test);

void write_episodes_jsonl(std::ostream& out, const std::vector<Episode>& episodes);
std::vector<Episode> read_episodes_jsonl(std::istream& in);

/// Encodes every episode with the frozen encoder: [N*T x D].
Tensor encode_episodes(const std::vector<Episode>& episodes, const FrozenEncoder& encoder);

}  // namespace mote

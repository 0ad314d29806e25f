// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat key = value file with '#' comments. Every key
// has a default; unknown keys and malformed values raise ConfigError.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mote/mote.hpp"
#include "mote/objectives.hpp"
#include "mote/synthdata.hpp"
#include "mote/tfm.hpp"

namespace mote {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Aggregation { merge, ensemble, random_routing };
std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);

enum class DataPolicy { routed, all_experts };
std::string to_string(DataPolicy p);
DataPolicy data_policy_from_string(const std::string& s);

struct OptimizerConfig {
    double lr = 3e-3;
    double weight_decay = 0.2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double warmup_fraction = 0.05;
};

struct Seeds {
    std::uint64_t data = 0;
    std::uint64_t init = 0;
    std::uint64_t route = 0;
};

struct RunConfig {
    DataSpec data;
    std::size_t hidden = 64;
    std::size_t layers = 2;
    std::size_t experts = 4;
    std::size_t heads = 4;
    double init_std = 0.02;

    double beta = 0.6;
    TauSampling tau_sampling = TauSampling::discrete;
    std::vector<Tau> tau_candidates;  // empty: the standard discrete set
    bool per_layer_tau = false;

    LossWeights weights;
    WmrKind wmr = WmrKind::cross_entropy;
    TfmConfig tfm;
    OptimizerConfig optim;

    std::size_t batch_size = 32;
    std::size_t epochs = 15;
    double temperature = kDefaultTemperature;
    RoutingPolicy routing = RoutingPolicy::multinomial;
    InitPolicy init_policy = InitPolicy::different;
    DataPolicy data_policy = DataPolicy::routed;
    Aggregation aggregation = Aggregation::merge;
    Seeds seeds;

    /// Sets one key from its textual value; throws ConfigError.
    void set(const std::string& key, const std::string& value);
    void validate() const;

    StackConfig stack_config() const;
    MergeSchedule merge_schedule() const;

    /// Every key with its current value, in a fixed order.
    std::vector<std::pair<std::string, std::string>> entries() const;
    std::string to_text() const;
    nlohmann::json to_json() const;

    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);
    static const std::vector<std::string>& keys();
};

}  // namespace mote

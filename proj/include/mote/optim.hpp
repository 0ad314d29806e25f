// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "json.hpp"
#include "mote/config.hpp"
#include "mote/tensor.hpp"

namespace mote {

/// Linear warmup to `peak` over `warmup` steps, then half-period cosine decay
/// to zero at `total`. `step` is 0-based.
double scheduled_lr(std::size_t step, std::size_t total, std::size_t warmup, double peak);

/// Adaptive moments with decoupled weight decay. Parameters that received no
/// gradient in a step are left untouched, moments included.
class AdamW {
public:
    struct Slot {
        Tensor param;
        bool decay = true;
        std::vector<double> m, v;
        std::size_t steps = 0;
    };

    AdamW(const std::vector<Tensor>& params, const std::vector<bool>& decay, const OptimizerConfig& config);

    void step(double lr);
    /// Drops every parameter's gradient buffer.
    void zero_grad();
    const std::vector<Slot>& slots() const { return slots_; }

    nlohmann::json state_to_json() const;

private:
    std::vector<Slot> slots_;
    OptimizerConfig config_;
};

}  // namespace mote

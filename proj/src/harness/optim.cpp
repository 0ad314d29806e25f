// SPDX-License-Identifier: Apache-2.0

#include "mote/optim.hpp"

#include <cmath>
#include <algorithm>
#include <numbers>
#include <stdexcept>

namespace mote {

double scheduled_lr(std::size_t step, std::size_t total, std::size_t warmup, double peak) {
    if (total == 0) return 0.0;
    if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const std::size_t span = total - warmup;
    if (span == 0) return peak;
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
    return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

AdamW::AdamW(const std::vector<Tensor>& params, const std::vector<bool>& decay, const OptimizerConfig& config)
    : config_(config) {
    if (params.size() != decay.size()) throw std::invalid_argument("one decay flag per parameter required");
    for (std::size_t i = 0; i < params.size(); ++i) {
        slots_.push_back({params[i], decay[i], std::vector<double>(params[i].numel(), 0.0),
                          std::vector<double>(params[i].numel(), 0.0), 0});
    }
}

void AdamW::step(double lr) {
    const double b1 = config_.beta1, b2 = config_.beta2;
    for (auto& s : slots_) {
        if (!s.param.has_grad()) continue;
        ++s.steps;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.steps));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.steps));
        const auto g = s.param.grad();
        auto p = s.param.mutable_data();
        const double shrink = s.decay ? 1.0 - lr * config_.weight_decay : 1.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
            const double mhat = s.m[i] / c1;
            const double vhat = s.v[i] / c2;
            p[i] = p[i] * shrink - lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& s : slots_) s.param.clear_grad();
}

nlohmann::json AdamW::state_to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& s : slots_) out.push_back({{"steps", s.steps}, {"m", s.m}, {"v", s.v}});
    return out;
}

}  // namespace mote

// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "mote/harness.hpp"

namespace mote {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

RunConfig with_overrides(const RunConfig& base, const std::vector<std::pair<std::string, std::string>>& overrides) {
    RunConfig c = base;
    for (const auto& [k, v] : overrides) c.set(k, v);
    c.validate();
    return c;
}

}  // namespace

std::vector<GridAxis> parse_grid(const std::string& text, const RunConfig& base) {
    std::vector<GridAxis> axes;
    std::set<std::string> seen;
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
        if (eq == std::string::npos) throw ConfigError("grid line " + std::to_string(lineno) + ": expected key = values");
        GridAxis axis{trim(line.substr(0, eq)), {}};
        if (!seen.insert(axis.key).second) throw ConfigError("grid axis '" + axis.key + "' repeated");
        std::stringstream values(line.substr(eq + 1));
        std::string v;
        while (std::getline(values, v, ',')) {
            v = trim(v);
            if (!v.empty()) axis.values.push_back(v);
        }
        if (axis.values.empty()) throw ConfigError("grid axis '" + axis.key + "' has no values");
        for (const auto& value : axis.values) (void)with_overrides(base, {{axis.key, value}});
        axes.push_back(std::move(axis));
    }
    // Combinations can be invalid even when every single value is fine.
    for (const auto& combo : expand_grid(axes)) (void)with_overrides(base, combo);
    return axes;
}

std::vector<std::vector<std::pair<std::string, std::string>>> expand_grid(const std::vector<GridAxis>& axes) {
    std::vector<std::vector<std::pair<std::string, std::string>>> out = {{}};
    for (const auto& axis : axes) {
        std::vector<std::vector<std::pair<std::string, std::string>>> next;
        for (const auto& prefix : out)
            for (const auto& v : axis.values) {
                auto combo = prefix;
                combo.emplace_back(axis.key, v);
                next.push_back(std::move(combo));
            }
        out = std::move(next);
    }
    return out;
}

std::vector<AblationRun> ablate(const RunConfig& base, const std::vector<GridAxis>& axes,
                                const std::function<void(std::size_t, std::size_t)>& progress) {
    const auto combos = expand_grid(axes);
    std::vector<RunConfig> configs;
    for (const auto& c : combos) configs.push_back(with_overrides(base, c));

    std::map<std::string, std::shared_ptr<PreparedData>> data_cache;
    std::vector<AblationRun> runs;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        if (progress) progress(i, configs.size());
        const RunConfig& cfg = configs[i];
        const std::string key = cfg.data.to_json().dump() + "#" + std::to_string(cfg.seeds.data);
        auto& data = data_cache[key];
        if (!data) data = std::make_shared<PreparedData>(prepare_data(cfg.data, cfg.seeds.data));
        const auto result = train(cfg, data->train, data->world().fine_tuning_bank);
        runs.push_back({combos[i], build_report(cfg, result.stack, *data, result.history)});
    }
    return runs;
}

nlohmann::json ablation_json(const std::vector<AblationRun>& runs) {
    nlohmann::json out = {{"format", "mote-ablation"}, {"version", 1}, {"runs", nlohmann::json::array()}};
    for (const auto& r : runs) {
        nlohmann::json overrides = nlohmann::json::object();
        for (const auto& [k, v] : r.overrides) overrides[k] = v;
        out["runs"].push_back({{"overrides", overrides}, {"report", r.report.to_json()}});
    }
    return out;
}

std::string ablation_table(const std::vector<AblationRun>& runs) {
    std::ostringstream os;
    char buf[160];
    for (const auto& r : runs) {
        std::string label;
        for (const auto& [k, v] : r.overrides) label += (label.empty() ? "" : " ") + k + "=" + v;
        if (label.empty()) label = "(defaults)";
        std::snprintf(buf, sizeof buf, "%7.2f %7.2f %7.2f %7.2f %9.2f %9.2f  ", r.report.close.top1,
                      r.report.zeroshot.top1, r.report.hm_zs, r.report.trade_off, r.report.mixed_zeroshot_tfm_off.top1,
                      r.report.mixed_zeroshot_tfm_on.top1);
        os << buf << label << '\n';
    }
    return "  close      zs   hm_zs   trade  mixzs-off  mixzs-on  run\n" + os.str();
}

}  // namespace mote

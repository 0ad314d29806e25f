// SPDX-License-Identifier: Apache-2.0

#include "mote/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mote/ops.hpp"
#include "mote/optim.hpp"
#include "mote/seed.hpp"

namespace mote {

namespace {

constexpr std::uint64_t kRouteStream = 0x2047;
constexpr std::uint64_t kOrderStream = 0x0D3E;
constexpr std::uint64_t kFewShotStream = 0xF503;

std::string rng_state(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

Rng rng_from_state(const std::string& s) {
    Rng rng;
    std::istringstream is(s);
    is >> rng;
    if (!is) throw std::invalid_argument("malformed rng state");
    return rng;
}

void require_finite_grads(const std::vector<Tensor>& params, std::size_t step) {
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad())
            if (!std::isfinite(g)) throw NumericDivergence("non-finite gradient at step " + std::to_string(step));
    }
}

std::vector<bool> decay_mask(const MoteStack& stack, const std::vector<Tensor>& params) {
    std::vector<bool> out;
    for (const auto& p : params) out.push_back(p.rank() == 2 && !p.same_storage(stack.positions()));
    return out;
}

// Row index of the maximum (lowest index wins ties) and the target's rank
// under the same ordering.
std::pair<std::size_t, std::size_t> rank_row(std::span<const double> row, std::size_t target) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = j;
    std::size_t rank = 0;
    for (std::size_t j = 0; j < row.size(); ++j)
        if (row[j] > row[target] || (row[j] == row[target] && j < target)) ++rank;
    return {best, rank};
}

double hm_or_zero(std::span<const double> values) {
    for (double v : values)
        if (!(v > 0.0)) return 0.0;
    return harmonic_mean(values);
}

double row_cosine(std::span<const double> a, std::span<const double> b) {
    if (std::equal(a.begin(), a.end(), b.begin())) return 1.0;
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
        for (const auto& [k, v] : j.items()) c.set(k, v.get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("checkpoint config: ") + e.what());
    }
    c.validate();
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------

EncodedSet EncodedSet::encode(const std::vector<Episode>& episodes, const FrozenEncoder& encoder) {
    EncodedSet s;
    s.embeddings = encode_episodes(episodes, encoder);
    s.frames = episodes.front().frames.rows();
    for (const auto& ep : episodes) s.labels.push_back(ep.label);
    return s;
}

EncodedBatch EncodedSet::batch(std::span<const std::size_t> videos) const {
    std::vector<std::size_t> rows;
    rows.reserve(videos.size() * frames);
    EncodedBatch b;
    b.frames = frames;
    for (std::size_t v : videos) {
        if (v >= size()) throw std::out_of_range("video index out of range");
        for (std::size_t t = 0; t < frames; ++t) rows.push_back(v * frames + t);
        b.labels.push_back(labels[v]);
    }
    NoGradGuard guard;
    b.embeddings = gather_rows(embeddings, rows);
    return b;
}

EncodedBatch EncodedSet::all() const { return {embeddings, labels, frames}; }

PreparedData prepare_data(const DataSpec& spec, std::uint64_t seed) {
    PreparedData d{generate_split(spec, seed), {}, {}, {}, {}};
    const auto& enc = d.generated.world.encoder;
    d.train = EncodedSet::encode(d.generated.train, enc);
    d.close_eval = EncodedSet::encode(d.generated.close_eval, enc);
    d.zeroshot_eval = EncodedSet::encode(d.generated.zeroshot_eval, enc);
    d.unseen_train = EncodedSet::encode(d.generated.unseen_train, enc);
    return d;
}

// ---------------------------------------------------------------------------

TrainResult train(const RunConfig& config, const EncodedSet& train_set, const EmbeddingBank& bank,
                  const StepHook& hook) {
    config.validate();
    return train(config, MoteStack(config.stack_config(), config.seeds.init, config.init_policy), train_set, bank,
                 hook);
}

TrainResult train(const RunConfig& config, MoteStack stack, const EncodedSet& train_set, const EmbeddingBank& bank,
                  const StepHook& hook) {
    config.validate();
    if (train_set.size() == 0) throw std::invalid_argument("empty training set");
    if (train_set.frames != stack.config().frames) throw DimensionError("training frames do not match the stack");
    (void)bank_targets(train_set.labels, bank);

    TrainResult result{std::move(stack), {}, 0, Rng(derive_seed(config.seeds.route, {kRouteStream})),
                       Rng(derive_seed(config.seeds.data, {kOrderStream}))};
    MoteStack& model = result.stack;
    const auto schedule = config.merge_schedule();
    const auto params = model.parameters();
    AdamW opt(params, decay_mask(model, params), config.optim);

    const std::size_t n = train_set.size();
    const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const std::size_t total = per_epoch * config.epochs;
    const auto warmup = static_cast<std::size_t>(std::llround(config.optim.warmup_fraction * static_cast<double>(total)));
    const bool regularised = config.weights.lambda > 0.0 || config.weights.eta > 0.0;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), result.order_rng);
        EpochLog log;
        log.epoch = epoch;
        for (std::size_t s = 0; s < per_epoch; ++s) {
            const std::size_t lo = s * config.batch_size, hi = std::min(n, lo + config.batch_size);
            const EncodedBatch batch =
                train_set.batch(std::span<const std::size_t>(order).subspan(lo, hi - lo));
            try {
                RoutedPass routed;
                if (config.data_policy == DataPolicy::all_experts) {
                    routed.z = video_embedding(batch.embeddings, forward_dense(model, batch.embeddings), batch.frames);
                    routed.logits = similarity_logits(routed.z, bank, config.temperature);
                    routed.loss = cross_entropy(routed.logits, bank_targets(batch.labels, bank));
                } else {
                    const auto decision = sample_routing(model, config.routing, result.route_rng);
                    routed = routed_pass(model, batch, decision, bank, config.temperature);
                }
                Tensor wmr, mse_term;
                if (regularised) {
                    std::vector<Tau> taus;
                    if (config.per_layer_tau) {
                        for (std::size_t l = 0; l < model.layer_count(); ++l)
                            taus.push_back(sample_tau(schedule, result.route_rng));
                    } else {
                        taus.assign(model.layer_count(), sample_tau(schedule, result.route_rng));
                    }
                    const auto w = loss_wmr(model, batch, taus, bank, config.temperature, config.wmr, routed);
                    wmr = w.loss;
                    mse_term = loss_mse(w.z_r, batch.pooled());
                }
                const Tensor total_loss = loss_all(routed.loss, wmr, mse_term, config.weights);
                backward(total_loss);
                require_finite_grads(params, result.steps);

                log.loss_all += total_loss.item();
                log.loss_te += routed.loss.item();
                if (regularised) {
                    log.loss_wmr += wmr.item();
                    log.loss_mse += mse_term.item();
                }
                if (hook) hook(result.steps, total, total_loss.item());
            } catch (const NumericDivergence& e) {
                Tape::current().clear();
                throw NumericDivergence(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                                        std::to_string(result.steps) + ")");
            }
            opt.step(scheduled_lr(result.steps, total, warmup, config.optim.lr));
            opt.zero_grad();
            ++result.steps;
        }
        const double k = static_cast<double>(per_epoch);
        log.loss_all /= k;
        log.loss_te /= k;
        log.loss_wmr /= k;
        log.loss_mse /= k;
        result.history.push_back(log);
    }
    return result;
}

// ---------------------------------------------------------------------------

nlohmann::json SplitMetrics::to_json() const {
    return {{"top1", top1}, {"top5", top5}, {"count", count}, {"mean_rho", mean_rho}};
}

SplitMetrics evaluate(const MoteStack& stack, const EncodedSet& set, const EvalOptions& opt) {
    if (opt.bank == nullptr) throw std::invalid_argument("evaluation needs a classification bank");
    if (opt.tfm.enabled && (opt.fine_tuning_proxies == nullptr || opt.test_proxies == nullptr)) {
        throw std::invalid_argument("TFM needs fine-tuning and test proxy banks");
    }
    if (set.size() == 0) throw std::invalid_argument("empty evaluation set");
    const auto targets = bank_targets(set.labels, *opt.bank);
    NoGradGuard guard;

    const std::size_t L = stack.layer_count();
    std::optional<MoteStack> merged;
    std::vector<std::function<Tensor(const Tensor&)>> members;
    Rng random_rng(opt.random_routing_seed);
    if (opt.single_expert) {
        if (*opt.single_expert >= stack.expert_count()) throw std::out_of_range("expert index out of range");
        const auto d = RoutingDecision::uniform(L, *opt.single_expert);
        members.push_back([&stack, d](const Tensor& e) { return forward_routed(stack, e, d); });
    } else {
        switch (opt.aggregation) {
            case Aggregation::merge:
                merged.emplace(deployed(stack));
                members.push_back([&merged, L](const Tensor& e) {
                    return forward_routed(*merged, e, RoutingDecision::uniform(L, 0));
                });
                break;
            case Aggregation::ensemble:
                for (std::size_t i = 0; i < stack.expert_count(); ++i) {
                    const auto d = RoutingDecision::uniform(L, i);
                    members.push_back([&stack, d](const Tensor& e) { return forward_routed(stack, e, d); });
                }
                break;
            case Aggregation::random_routing:
                members.push_back(
                    [&stack, &random_rng](const Tensor& e) { return forward_random_routing(stack, e, random_rng); });
                break;
        }
    }

    SplitMetrics m;
    m.count = set.size();
    double hits1 = 0.0, hits5 = 0.0, rho_sum = 0.0;
    const std::size_t C = opt.bank->size();
    std::vector<std::size_t> idx;
    for (std::size_t lo = 0; lo < set.size(); lo += opt.chunk) {
        const std::size_t hi = std::min(set.size(), lo + opt.chunk);
        idx.resize(hi - lo);
        std::iota(idx.begin(), idx.end(), lo);
        const EncodedBatch b = set.batch(idx);
        const Tensor e_pool = b.pooled();
        const auto rho = batch_rho(e_pool, opt.fine_tuning_proxies ? *opt.fine_tuning_proxies : *opt.bank,
                                   opt.test_proxies ? *opt.test_proxies : *opt.bank, opt.tfm);
        std::vector<Tensor> logits;
        for (const auto& member : members) {
            const Tensor t_pool = pooled_spatial(member(b.embeddings), b.frames);
            logits.push_back(similarity_logits(modulate_batch(e_pool, t_pool, rho), *opt.bank, opt.temperature));
        }
        const Tensor l = average(logits);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto [best, rank] = rank_row(l.data().subspan(r * C, C), targets[idx[r]]);
            m.predictions.push_back(best);
            if (rank == 0) hits1 += 1.0;
            if (rank < 5) hits5 += 1.0;
            rho_sum += rho[r];
        }
    }
    const double n = static_cast<double>(set.size());
    m.top1 = 100.0 * hits1 / n;
    m.top5 = 100.0 * hits5 / n;
    m.mean_rho = rho_sum / n;
    return m;
}

double harmonic_mean(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("harmonic mean of no values");
    double inv = 0.0;
    for (double v : values) {
        if (!(v > 0.0)) throw std::invalid_argument("harmonic mean needs positive values");
        inv += 1.0 / v;
    }
    return static_cast<double>(values.size()) / inv;
}

std::vector<ExpertRow> expert_wise_eval(const MoteStack& stack, const PreparedData& data, double temperature) {
    std::vector<ExpertRow> rows;
    EvalOptions close;
    close.bank = &data.world().fine_tuning_bank;
    close.temperature = temperature;
    EvalOptions zs = close;
    zs.bank = &data.world().test_bank;
    for (std::size_t i = 0; i <= stack.expert_count(); ++i) {
        const bool is_merged = i == stack.expert_count();
        if (!is_merged) {
            close.single_expert = i;
            zs.single_expert = i;
        } else {
            close.single_expert.reset();
            zs.single_expert.reset();
        }
        rows.push_back({is_merged ? "merged" : "expert-" + std::to_string(i), evaluate(stack, data.close_eval, close).top1,
                        evaluate(stack, data.zeroshot_eval, zs).top1});
    }
    return rows;
}

std::vector<std::vector<double>> expert_similarity(const MoteStack& stack, const EncodedSet& probe) {
    if (probe.size() == 0) throw std::invalid_argument("empty probe set");
    NoGradGuard guard;
    const std::size_t n = stack.expert_count();
    const std::size_t L = stack.layer_count();
    const EncodedBatch b = probe.all();
    std::vector<Tensor> feats;
    for (std::size_t i = 0; i < n; ++i)
        feats.push_back(video_embedding(b.embeddings,
                                        forward_routed(stack, b.embeddings, RoutingDecision::uniform(L, i)), b.frames));
    const MoteStack merged = deployed(stack);
    feats.push_back(video_embedding(b.embeddings,
                                    forward_routed(merged, b.embeddings, RoutingDecision::uniform(L, 0)), b.frames));

    const std::size_t D = stack.config().dim;
    std::vector<std::vector<double>> sim(n + 1, std::vector<double>(n + 1, 1.0));
    for (std::size_t i = 0; i <= n; ++i)
        for (std::size_t j = i + 1; j <= n; ++j) {
            double acc = 0.0;
            for (std::size_t v = 0; v < probe.size(); ++v)
                acc += row_cosine(feats[i].data().subspan(v * D, D), feats[j].data().subspan(v * D, D));
            sim[i][j] = sim[j][i] = acc / static_cast<double>(probe.size());
        }
    return sim;
}

// ---------------------------------------------------------------------------

std::string run_id(const RunConfig& config) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : config.to_text()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 12);
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json experts_json = nlohmann::json::array();
    for (const auto& r : experts)
        experts_json.push_back({{"name", r.name}, {"close_top1", r.close_top1}, {"zeroshot_top1", r.zeroshot_top1}});
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& h : history)
        hist.push_back({{"epoch", h.epoch},
                        {"loss_all", h.loss_all},
                        {"loss_te", h.loss_te},
                        {"loss_wmr", h.loss_wmr},
                        {"loss_mse", h.loss_mse}});
    return {{"format", "mote-report"},
            {"version", 1},
            {"run_id", run_id},
            {"config", config},
            {"seeds", {{"data", seeds.data}, {"init", seeds.init}, {"route", seeds.route}}},
            {"splits", {{"close", close.to_json()}, {"zeroshot", zeroshot.to_json()}}},
            {"mixed",
             {{"close", {{"tfm_off", mixed_close_tfm_off.to_json()}, {"tfm_on", mixed_close_tfm_on.to_json()}}},
              {"zeroshot", {{"tfm_off", mixed_zeroshot_tfm_off.to_json()}, {"tfm_on", mixed_zeroshot_tfm_on.to_json()}}}}},
            {"hm_zs", hm_zs},
            {"trade_off", trade_off},
            {"expert_wise", experts_json},
            {"expert_similarity", similarity},
            {"history", hist}};
}

bool EvalReport::self_consistent(const nlohmann::json& report, double tol) {
    const double close = report.at("splits").at("close").at("top1").get<double>();
    const double zs = report.at("splits").at("zeroshot").at("top1").get<double>();
    const std::vector<double> zs_values = {zs};
    const double hm_zs = hm_or_zero(zs_values);
    const std::vector<double> pair = {close, hm_zs};
    return std::abs(hm_zs - report.at("hm_zs").get<double>()) <= tol &&
           std::abs(hm_or_zero(pair) - report.at("trade_off").get<double>()) <= tol;
}

EvalReport build_report(const RunConfig& config, const MoteStack& stack, const PreparedData& data,
                        const std::vector<EpochLog>& history) {
    const auto& w = data.world();
    const EmbeddingBank mixed = mixed_bank(w.fine_tuning_bank, w.test_bank);
    EvalReport r;
    r.config = config.to_json();
    r.seeds = config.seeds;
    r.run_id = run_id(config);
    r.history = history;

    EvalOptions base;
    base.temperature = config.temperature;
    base.aggregation = config.aggregation;
    base.random_routing_seed = derive_seed(config.seeds.route, {0xE7A1});
    base.fine_tuning_proxies = &w.fine_tuning_bank;

    EvalOptions close = base;
    close.bank = &w.fine_tuning_bank;
    close.test_proxies = &w.fine_tuning_bank;
    close.tfm = config.tfm;
    r.close = evaluate(stack, data.close_eval, close);

    EvalOptions zs = base;
    zs.bank = &w.test_bank;
    zs.test_proxies = &w.test_bank;
    zs.tfm = config.tfm;
    r.zeroshot = evaluate(stack, data.zeroshot_eval, zs);

    TfmConfig on = config.tfm;
    on.enabled = true;
    TfmConfig off = config.tfm;
    off.enabled = false;
    EvalOptions mc = close;
    mc.bank = &mixed;
    mc.tfm = off;
    r.mixed_close_tfm_off = evaluate(stack, data.close_eval, mc);
    mc.tfm = on;
    r.mixed_close_tfm_on = evaluate(stack, data.close_eval, mc);
    EvalOptions mz = zs;
    mz.bank = &mixed;
    mz.tfm = off;
    r.mixed_zeroshot_tfm_off = evaluate(stack, data.zeroshot_eval, mz);
    mz.tfm = on;
    r.mixed_zeroshot_tfm_on = evaluate(stack, data.zeroshot_eval, mz);

    const std::vector<double> zs_values = {r.zeroshot.top1};
    r.hm_zs = hm_or_zero(zs_values);
    const std::vector<double> pair = {r.close.top1, r.hm_zs};
    r.trade_off = hm_or_zero(pair);
    r.experts = expert_wise_eval(stack, data, config.temperature);
    r.similarity = expert_similarity(stack, data.zeroshot_eval);
    return r;
}

nlohmann::json checkpoint_json(const RunConfig& config, const TrainResult& result) {
    return {{"format", "mote-checkpoint"},
            {"version", 1},
            {"run_id", run_id(config)},
            {"config", config.to_json()},
            {"steps", result.steps},
            {"rng", {{"route", rng_state(result.route_rng)}, {"order", rng_state(result.order_rng)}}},
            {"stack", result.stack.to_json()}};
}

nlohmann::json deployed_json(const RunConfig& config, const MoteStack& stack) {
    return {{"format", "mote-deployed"},
            {"version", 1},
            {"run_id", run_id(config)},
            {"config", config.to_json()},
            {"stack", deployed(stack).to_json()}};
}

LoadedCheckpoint load_checkpoint(const nlohmann::json& j) {
    const auto format = j.at("format").get<std::string>();
    if (format != "mote-checkpoint" && format != "mote-deployed") {
        throw std::invalid_argument("not a checkpoint: format '" + format + "'");
    }
    if (j.at("version").get<int>() != 1) throw std::invalid_argument("unsupported checkpoint version");
    LoadedCheckpoint out{config_from_json(j.at("config")), MoteStack::from_json(j.at("stack")),
                         format == "mote-deployed"};
    if (!out.deployed) (void)rng_from_state(j.at("rng").at("route").get<std::string>());
    return out;
}

std::vector<ExpertRow> expert_wise_eval(const LoadedCheckpoint& checkpoint, const PreparedData& data) {
    if (checkpoint.deployed) throw std::invalid_argument("expert-wise evaluation needs a pre-merge checkpoint");
    return expert_wise_eval(checkpoint.stack, data, checkpoint.config.temperature);
}

SplitSpec SplitSpec::parse(const std::string& s) {
    if (s == "close" || s == "zeroshot" || s == "mixed") return {s, 0};
    const std::string prefix = "fewshot:";
    if (s.rfind(prefix, 0) == 0) {
        const std::string k = s.substr(prefix.size());
        if (!k.empty() && std::all_of(k.begin(), k.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            const std::size_t shots = std::stoul(k);
            if (shots > 0) return {"fewshot", shots};
        }
    }
    throw ConfigError("unknown split '" + s + "' (expected close, zeroshot, mixed or fewshot:K)");
}

EncodedSet fewshot_train_set(const PreparedData& data, std::size_t k, std::uint64_t seed) {
    const auto episodes = kshot_sample(data.generated.unseen_train, k, derive_seed(seed, {kFewShotStream}));
    return EncodedSet::encode(episodes, data.world().encoder);
}

}  // namespace mote

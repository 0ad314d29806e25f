// SPDX-License-Identifier: Apache-2.0

#include "mote/synthdata.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>

#include "mote/ops.hpp"
#include "mote/seed.hpp"

namespace mote {

namespace {

enum Stream : std::uint64_t {
    kEncoder = 1,
    kBank,
    kTestBank,
    kMotif,
    kParents,
    kTrain,
    kCloseEval,
    kZeroShotEval,
    kUnseenTrain,
};

using Vec = std::vector<double>;

Vec gaussian(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Vec v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

void rescale(Vec& v, double norm) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    const double n = std::sqrt(acc);
    if (n == 0.0) throw std::domain_error("cannot rescale a zero vector");
    for (auto& x : v) x *= norm / n;
}

void center_over_time(std::vector<Vec>& motif) {
    const std::size_t d = motif.front().size();
    for (std::size_t c = 0; c < d; ++c) {
        double m = 0.0;
        for (const auto& f : motif) m += f[c];
        m /= static_cast<double>(motif.size());
        for (auto& f : motif) f[c] -= m;
    }
}

// Raw pattern whose encoding points along `target` as closely as the encoder's
// rank allows: undo the norm's gain and bias, then least-squares through the
// projection.
Vec lift(std::span<const double> target, const FrozenEncoder& enc, double scale) {
    const std::size_t raw = enc.raw_dim(), d = enc.dim();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> p(
        enc.projection().data().data(), static_cast<Eigen::Index>(raw), static_cast<Eigen::Index>(d));
    Eigen::VectorXd x(static_cast<Eigen::Index>(d));
    const double stretch = std::sqrt(static_cast<double>(d));
    for (std::size_t c = 0; c < d; ++c) {
        x[static_cast<Eigen::Index>(c)] = (stretch * target[c] - enc.norm_bias().at(c)) / enc.norm_gain().at(c);
    }
    const Eigen::VectorXd b = (p * p.transpose()).ldlt().solve(p * x);
    Vec out(b.data(), b.data() + b.size());
    rescale(out, scale * std::sqrt(static_cast<double>(raw)));
    return out;
}

std::vector<Vec> random_motif(std::size_t frames, std::size_t raw, double scale, std::mt19937_64& rng) {
    std::vector<Vec> m;
    for (std::size_t t = 0; t < frames; ++t) m.push_back(gaussian(raw, rng));
    center_over_time(m);
    for (auto& f : m)
        for (auto& x : f) x *= scale;
    return m;
}

std::vector<Episode> episodes_for(const std::vector<ClassSpec>& classes, std::size_t per_class,
                                  std::size_t frames, std::uint64_t seed, std::uint64_t stream) {
    std::vector<Episode> out;
    out.reserve(classes.size() * per_class);
    for (const auto& cls : classes)
        for (std::size_t i = 0; i < per_class; ++i) out.push_back(make_episode(cls, frames, seed, stream, i));
    return out;
}

}  // namespace

std::string to_string(UnseenComposition c) {
    switch (c) {
        case UnseenComposition::splice: return "splice";
        case UnseenComposition::blend: return "blend";
        case UnseenComposition::novel: return "novel";
        case UnseenComposition::inherit: return "inherit";
    }
    return "unknown";
}

UnseenComposition unseen_composition_from_string(const std::string& s) {
    if (s == "splice") return UnseenComposition::splice;
    if (s == "blend") return UnseenComposition::blend;
    if (s == "novel") return UnseenComposition::novel;
    if (s == "inherit") return UnseenComposition::inherit;
    throw std::invalid_argument("unknown unseen composition '" + s + "'");
}

void DataSpec::validate() const {
    if (raw_dim == 0 || dim == 0 || frames == 0) throw std::invalid_argument("data dimensions must be positive");
    if (seen_classes < 2 || unseen_classes < 2) {
        throw std::invalid_argument("need at least 2 seen and 2 unseen classes");
    }
    if (2 * twin_pairs > seen_classes) throw std::invalid_argument("more twin classes than seen classes");
    if (twin_pairs > 0 && frames < 2) throw std::invalid_argument("twin classes need at least 2 frames");
    if (unseen_classes > seen_classes * (seen_classes - 1) / 2) {
        throw std::invalid_argument("not enough seen-class pairs to parent every unseen class");
    }
    if (train_per_class == 0 || eval_per_class == 0) throw std::invalid_argument("episodes per class must be positive");
    if (!(base_scale > 0.0) || !(motif_scale >= 0.0) || !(noise_sigma >= 0.0)) {
        throw std::invalid_argument("data scales must be non-negative (base positive)");
    }
    if (!(bank_mix >= 0.0 && bank_mix <= 1.0) || !(bank_sigma >= 0.0)) {
        throw std::invalid_argument("bank mixing parameters out of range");
    }
}

nlohmann::json DataSpec::to_json() const {
    return {{"raw_dim", raw_dim},
            {"dim", dim},
            {"frames", frames},
            {"seen_classes", seen_classes},
            {"twin_pairs", twin_pairs},
            {"unseen_classes", unseen_classes},
            {"train_per_class", train_per_class},
            {"eval_per_class", eval_per_class},
            {"base_scale", base_scale},
            {"motif_scale", motif_scale},
            {"noise_sigma", noise_sigma},
            {"bank_mix", bank_mix},
            {"bank_sigma", bank_sigma},
            {"composition", to_string(composition)}};
}

DataSpec DataSpec::from_json(const nlohmann::json& j) {
    DataSpec s;
    s.raw_dim = j.at("raw_dim").get<std::size_t>();
    s.dim = j.at("dim").get<std::size_t>();
    s.frames = j.at("frames").get<std::size_t>();
    s.seen_classes = j.at("seen_classes").get<std::size_t>();
    s.twin_pairs = j.at("twin_pairs").get<std::size_t>();
    s.unseen_classes = j.at("unseen_classes").get<std::size_t>();
    s.train_per_class = j.at("train_per_class").get<std::size_t>();
    s.eval_per_class = j.at("eval_per_class").get<std::size_t>();
    s.base_scale = j.at("base_scale").get<double>();
    s.motif_scale = j.at("motif_scale").get<double>();
    s.noise_sigma = j.at("noise_sigma").get<double>();
    s.bank_mix = j.at("bank_mix").get<double>();
    s.bank_sigma = j.at("bank_sigma").get<double>();
    s.composition = unseen_composition_from_string(j.at("composition").get<std::string>());
    s.validate();
    return s;
}

bool SyntheticWorld::is_twin(ClassId id) const {
    return std::any_of(twins.begin(), twins.end(), [id](const auto& p) { return p.first == id || p.second == id; });
}

Episode make_episode(const ClassSpec& cls, std::size_t frames, std::uint64_t seed, std::uint64_t stream,
                     std::size_t index) {
    std::mt19937_64 rng(derive_seed(seed, {stream, static_cast<std::uint64_t>(cls.id), index}));
    std::normal_distribution<double> noise(0.0, 1.0);
    const std::size_t raw = cls.base.size();
    std::vector<double> v(frames * raw);
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t c = 0; c < raw; ++c) {
            const double n = cls.noise_sigma > 0.0 ? cls.noise_sigma * noise(rng) : 0.0;
            v[t * raw + c] = cls.base[c] + cls.motif[t][c] + n;
        }
    return {Tensor({frames, raw}, std::move(v)), cls.id};
}

GeneratedData generate_split(const DataSpec& spec, std::uint64_t seed) {
    spec.validate();
    const std::size_t S = spec.seen_classes, U = spec.unseen_classes, T = spec.frames, R = spec.raw_dim;

    FrozenEncoder encoder(R, spec.dim, derive_seed(seed, {kEncoder}));
    std::vector<ClassId> seen_ids(S), unseen_ids(U);
    std::iota(seen_ids.begin(), seen_ids.end(), 0);
    std::iota(unseen_ids.begin(), unseen_ids.end(), static_cast<ClassId>(S));
    auto ft_bank = EmbeddingBank::random(seen_ids, spec.dim, BankRole::fine_tuning, derive_seed(seed, {kBank}));

    std::vector<std::pair<std::size_t, std::size_t>> all_pairs;
    for (std::size_t a = 0; a < S; ++a)
        for (std::size_t b = a + 1; b < S; ++b) all_pairs.emplace_back(a, b);
    std::mt19937_64 parent_rng(derive_seed(seed, {kParents}));
    std::shuffle(all_pairs.begin(), all_pairs.end(), parent_rng);
    all_pairs.resize(U);
    auto test_bank = derive_mixture_bank(ft_bank, unseen_ids, all_pairs, derive_seed(seed, {kTestBank}),
                                         spec.bank_mix, spec.bank_sigma);

    std::vector<ClassSpec> seen(S);
    std::vector<std::pair<ClassId, ClassId>> twins;
    for (std::size_t c = 0; c < S; ++c) {
        seen[c].id = static_cast<ClassId>(c);
        seen[c].noise_sigma = spec.noise_sigma;
        const bool twin = c < 2 * spec.twin_pairs;
        if (twin && c % 2 == 1) {
            seen[c].base = seen[c - 1].base;
            seen[c].motif.assign(seen[c - 1].motif.rbegin(), seen[c - 1].motif.rend());
            twins.emplace_back(static_cast<ClassId>(c - 1), static_cast<ClassId>(c));
            continue;
        }
        std::mt19937_64 rng(derive_seed(seed, {kMotif, c}));
        seen[c].motif = random_motif(T, R, spec.motif_scale, rng);
        if (twin) {
            auto shared = ft_bank.row(c);
            const auto other = ft_bank.row(c + 1);
            for (std::size_t k = 0; k < shared.size(); ++k) shared[k] += other[k];
            rescale(shared, 1.0);
            seen[c].base = lift(shared, encoder, spec.base_scale);
        } else {
            seen[c].base = lift(ft_bank.row(c), encoder, spec.base_scale);
        }
    }

    std::vector<ClassSpec> unseen(U);
    std::vector<std::pair<ClassId, ClassId>> parents;
    for (std::size_t u = 0; u < U; ++u) {
        const auto [a, b] = all_pairs[u];
        parents.emplace_back(static_cast<ClassId>(a), static_cast<ClassId>(b));
        auto& cls = unseen[u];
        cls.id = unseen_ids[u];
        cls.noise_sigma = spec.noise_sigma;
        cls.base = lift(test_bank.row(u), encoder, spec.base_scale);
        if (spec.composition == UnseenComposition::inherit) {
            cls.motif = seen[a].motif;
            continue;
        }
        if (spec.composition == UnseenComposition::novel) {
            std::mt19937_64 rng(derive_seed(seed, {kMotif, S + u}));
            cls.motif = random_motif(T, R, spec.motif_scale, rng);
            continue;
        }
        cls.motif.resize(T);
        for (std::size_t t = 0; t < T; ++t) {
            if (spec.composition == UnseenComposition::splice) {
                cls.motif[t] = t < T / 2 ? seen[a].motif[t] : seen[b].motif[t];
            } else {
                cls.motif[t].resize(R);
                for (std::size_t k = 0; k < R; ++k) cls.motif[t][k] = 0.5 * (seen[a].motif[t][k] + seen[b].motif[t][k]);
            }
        }
        center_over_time(cls.motif);
    }

    GeneratedData out{SyntheticWorld{spec, seed, std::move(encoder), std::move(ft_bank), std::move(test_bank),
                                     seen, unseen, std::move(twins), std::move(parents)},
                      {}, {}, {}, {}};
    out.train = episodes_for(seen, spec.train_per_class, T, seed, kTrain);
    out.close_eval = episodes_for(seen, spec.eval_per_class, T, seed, kCloseEval);
    out.zeroshot_eval = episodes_for(unseen, spec.eval_per_class, T, seed, kZeroShotEval);
    out.unseen_train = episodes_for(unseen, spec.train_per_class, T, seed, kUnseenTrain);
    return out;
}

std::vector<Episode> kshot_sample(const std::vector<Episode>& train, std::size_t k, std::uint64_t seed) {
    if (k == 0) throw std::invalid_argument("k-shot sampling needs k >= 1");
    std::map<ClassId, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < train.size(); ++i) by_class[train[i].label].push_back(i);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> chosen;
    for (auto& [label, idx] : by_class) {
        if (k > idx.size()) {
            throw std::invalid_argument("k = " + std::to_string(k) + " exceeds the " + std::to_string(idx.size()) +
                                        " episodes of class " + std::to_string(label));
        }
        std::shuffle(idx.begin(), idx.end(), rng);
        chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    }
    std::vector<Episode> out;
    out.reserve(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) out.push_back(train[chosen[i % chosen.size()]]);
    return out;
}

EmbeddingBank mixed_bank(const EmbeddingBank& fine_tuning, const EmbeddingBank& test) {
    if (fine_tuning.dim() != test.dim()) {
        throw DimensionError("mixed_bank: widths " + std::to_string(fine_tuning.dim()) + " and " +
                             std::to_string(test.dim()) + " differ");
    }
    std::vector<ClassId> labels = fine_tuning.labels();
    std::vector<double> v(fine_tuning.vectors().data().begin(), fine_tuning.vectors().data().end());
    for (std::size_t i = 0; i < test.size(); ++i) {
        if (fine_tuning.contains(test.labels()[i])) continue;
        labels.push_back(test.labels()[i]);
        const auto row = test.row(i);
        v.insert(v.end(), row.begin(), row.end());
    }
    const std::size_t n = labels.size();
    return EmbeddingBank(std::move(labels), Tensor({n, fine_tuning.dim()}, std::move(v)), BankRole::mixed,
                         fine_tuning.seed());
}

void write_episodes_jsonl(std::ostream& out, const std::vector<Episode>& episodes) {
    for (const auto& ep : episodes) {
        std::vector<std::vector<double>> rows(ep.frames.rows());
        for (std::size_t t = 0; t < rows.size(); ++t)
            for (std::size_t c = 0; c < ep.frames.cols(); ++c) rows[t].push_back(ep.frames.at(t, c));
        out << nlohmann::json{{"frames", rows}, {"label", ep.label}}.dump() << '\n';
    }
}

std::vector<Episode> read_episodes_jsonl(std::istream& in) {
    std::vector<Episode> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        out.push_back({Tensor::matrix(j.at("frames").get<std::vector<std::vector<double>>>()),
                       j.at("label").get<ClassId>()});
    }
    return out;
}

Tensor encode_episodes(const std::vector<Episode>& episodes, const FrozenEncoder& encoder) {
    if (episodes.empty()) throw std::invalid_argument("no episodes to encode");
    std::vector<Tensor> parts;
    parts.reserve(episodes.size());
    for (const auto& ep : episodes) parts.push_back(ep.frames);
    NoGradGuard guard;
    return encode_frames(concat(parts), encoder);
}

}  // namespace mote

#include "simscore/ensemble.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "simscore/checkpoint.hpp"
#include "simscore/errors.hpp"
#include "simscore/training.hpp"

namespace simscore {

std::vector<double> blend(const std::vector<std::pair<std::vector<double>, double>>& members) {
    if (members.empty()) throw ConfigError("blend: no members");
    const std::size_t n = members.front().first.size();
    double wsum = 0.0;
    for (const auto& [p, w] : members) {
        if (p.size() != n)
            throw DimError("blend: prediction vectors differ in length (" + std::to_string(n) +
                           " vs " + std::to_string(p.size()) + ")");
        if (w < 0.0) throw ConfigError("blend: negative member weight");
        wsum += w;
    }
    if (!(wsum > 0.0)) throw ConfigError("blend: member weights are all zero");

    std::vector<double> out(n, 0.0);
    for (const auto& [p, w] : members) {
        const double wn = w / wsum;
        for (std::size_t j = 0; j < n; ++j) out[j] += wn * p[j];
    }
    // rounding must never escape the member hull; this also makes a blend
    // of identical members exact for any weights
    for (std::size_t j = 0; j < n; ++j) {
        double lo = members.front().first[j], hi = lo;
        for (const auto& [p, w] : members) {
            lo = std::min(lo, p[j]);
            hi = std::max(hi, p[j]);
        }
        out[j] = std::clamp(out[j], lo, hi);
    }
    return out;
}

std::vector<double> rank_transform(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && values[idx[j]] == values[idx[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based mean of [i+1, j]
        for (std::size_t k = i; k < j; ++k) out[idx[k]] = avg_rank / static_cast<double>(n);
        i = j;
    }
    return out;
}

EnsembleReport ensemble_evaluate(const std::vector<MemberSpec>& specs,
                                 const std::vector<Record>& records, std::size_t max_len,
                                 std::size_t batch_size, double f1_threshold,
                                 bool rank_average) {
    if (specs.empty()) throw ConfigError("ensemble: no members");
    if (records.empty()) throw DomainError("ensemble: no records");

    EnsembleReport rep;
    std::vector<std::pair<std::vector<double>, double>> blend_in;
    double wsum = 0.0;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const MemberSpec& spec = specs[i];
        try {
            Checkpoint ck = load_checkpoint(spec.checkpoint);
            if (!spec.head_variant.empty() &&
                spec.head_variant != to_string(ck.config.head_variant))
                throw DataError("head variant mismatch: manifest says '" + spec.head_variant +
                                "', checkpoint holds '" + to_string(ck.config.head_variant) +
                                "'");
            if (!spec.encoder_variant.empty() &&
                spec.encoder_variant != to_string(ck.config.encoder_variant))
                throw DataError("encoder variant mismatch: manifest says '" +
                                spec.encoder_variant + "', checkpoint holds '" +
                                to_string(ck.config.encoder_variant) + "'");
            Vocabulary vocab = Vocabulary::from_tokens(ck.vocab_tokens);
            EvalResult ev = evaluate(ck.config, ck.params, vocab, records, max_len, batch_size,
                                     f1_threshold);
            rep.members.push_back(ev.metrics);
            rep.output.member_preds.push_back(ev.raw);
            blend_in.emplace_back(rank_average ? rank_transform(ev.raw) : ev.raw, spec.weight);
            wsum += spec.weight;
        } catch (const Error& e) {
            throw DataError("member " + std::to_string(i) + " ('" + spec.checkpoint +
                            "'): " + e.what());
        }
    }

    std::vector<double> mixed = blend(blend_in);
    rep.output.blended.reserve(mixed.size());
    for (double v : mixed) rep.output.blended.push_back(std::clamp(v, 0.0, 1.0));
    for (const MemberSpec& spec : specs) rep.output.weights.push_back(spec.weight / wsum);

    std::vector<double> targets;
    for (const Record& r : records) targets.push_back(r.score);
    rep.blended = compute_metrics(rep.output.blended, targets, f1_threshold);
    return rep;
}

void save_manifest(const EnsembleManifest& manifest, const std::string& path) {
    nlohmann::json j;
    j["rank_average"] = manifest.rank_average;
    j["members"] = nlohmann::json::array();
    for (const MemberSpec& m : manifest.members) {
        nlohmann::json e;
        e["checkpoint"] = m.checkpoint;
        if (!m.head_variant.empty()) e["head_variant"] = m.head_variant;
        if (!m.encoder_variant.empty()) e["encoder_variant"] = m.encoder_variant;
        e["weight"] = m.weight;
        j["members"].push_back(e);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("short write on manifest: " + path);
}

EnsembleManifest load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read manifest: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + path + ": " + e.what());
    }
    EnsembleManifest m;
    try {
        m.rank_average = j.value("rank_average", false);
        if (!j.contains("members") || !j["members"].is_array())
            throw DataError("manifest lacks a members array");
        for (const auto& e : j["members"]) {
            MemberSpec s;
            s.checkpoint = e.at("checkpoint").get<std::string>();
            s.head_variant = e.value("head_variant", std::string{});
            s.encoder_variant = e.value("encoder_variant", std::string{});
            s.weight = e.value("weight", 1.0);
            m.members.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + path + ": " + e.what());
    }
    return m;
}

}  // namespace simscore

#include "simscore/fixtures.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>

#include "simscore/rng.hpp"

namespace simscore {

namespace {

const char* kContexts[6] = {"A01", "B02", "C03", "F21", "G06", "H04"};

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

}  // namespace

std::vector<Record> make_fold_fixture(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "fold_fixture"));
    std::vector<Record> records;
    std::size_t next_id = 0;
    for (std::size_t fam = 0; fam < 20; ++fam) {
        const double center = 0.1 + 0.8 * static_cast<double>(fam) / 19.0;
        const std::size_t per_anchor = fam < 10 ? 7 : 3;  // 2 anchors per family
        const std::string core = "core" + std::to_string(fam);
        const std::string anchors[2] = {core + " alpha" + std::to_string(fam),
                                        core + " beta" + std::to_string(fam)};
        for (std::size_t a = 0; a < 2; ++a) {
            for (std::size_t r = 0; r < per_anchor; ++r) {
                Record rec;
                char id[16];
                std::snprintf(id, sizeof(id), "r%03zu", next_id++);
                rec.id = id;
                rec.anchor = anchors[a];
                rec.target = "term" + std::to_string(fam) + " item" + std::to_string(r) + " filler" +
                             std::to_string((fam + r) % 7);
                rec.context = kContexts[fam % 6];
                rec.score = std::clamp(center + rng.uniform(-0.06, 0.06), 0.0, 1.0);
                records.push_back(std::move(rec));
            }
        }
    }
    return records;
}

LearnabilityFixture make_learnability_fixture(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "learnability_fixture"));
    const char suffix[4] = {'a', 'b', 'c', 'd'};
    std::vector<std::string> noise;
    for (int i = 0; i < 16; ++i) noise.push_back("noise" + std::to_string(i));

    LearnabilityFixture fx;
    std::size_t train_id = 0, eval_id = 0;
    for (std::size_t g = 0; g < 8; ++g) {
        std::vector<std::string> signal;
        std::string anchor;
        for (int s = 0; s < 4; ++s) {
            signal.push_back("sig" + std::to_string(g) + suffix[s]);
            if (s) anchor += " ";
            anchor += signal.back();
        }
        for (std::size_t r = 0; r < 12; ++r) {
            const std::size_t k = r % 5;
            std::vector<std::string> words(signal.begin(), signal.end());
            rng.shuffle(words);
            words.resize(k);
            while (words.size() < 4) words.push_back(noise[rng.index(noise.size())]);
            rng.shuffle(words);
            std::string target;
            for (std::size_t w = 0; w < words.size(); ++w) {
                if (w) target += " ";
                target += words[w];
            }
            Record rec;
            rec.anchor = anchor;
            rec.target = target;
            rec.context = "A01";
            rec.score = static_cast<double>(k) / 4.0;
            char id[16];
            if (r < 8) {
                std::snprintf(id, sizeof(id), "train%03zu", train_id++);
                rec.id = id;
                fx.train.push_back(std::move(rec));
            } else {
                std::snprintf(id, sizeof(id), "eval%03zu", eval_id++);
                rec.id = id;
                fx.eval.push_back(std::move(rec));
            }
        }
    }
    return fx;
}

std::vector<Record> make_rtd_corpus(std::uint64_t seed) {
    std::vector<Record> records = make_fold_fixture(derive_seed(seed, "rtd"));
    records.resize(48);
    return records;
}

void write_csv(const std::vector<Record>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("write_csv: cannot write " + path);
    out << std::setprecision(17);  // scores must survive the round-trip exactly
    out << "id,anchor,target,context,score\n";
    for (const Record& r : records) {
        out << csv_escape(r.id) << "," << csv_escape(r.anchor) << "," << csv_escape(r.target) << ","
            << csv_escape(r.context) << "," << r.score << "\n";
    }
    if (!out) throw IoError("write_csv: write failed for " + path);
}

}  // namespace simscore

#include "simscore/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "simscore/rng.hpp"

namespace simscore {

namespace {

std::string to_lower(const std::string& s) {
    std::string out = s;
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

// RFC-4180-ish: quoted fields may contain commas and doubled quotes.
std::vector<std::string> parse_csv_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"' && cur.empty()) {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

bool valid_context(const std::string& c) {
    if (c.size() < 2) return false;
    if (!std::isalpha(static_cast<unsigned char>(c[0]))) return false;
    for (std::size_t i = 1; i < c.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(c[i]))) return false;
    }
    return true;
}

}  // namespace

IngestResult ingest(const std::string& path, bool skip_bad) {
    std::ifstream in(path);
    if (!in) throw IoError("ingest: cannot open " + path);

    IngestResult res;
    std::string line;
    std::size_t line_no = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!saw_header) {
            if (line != "id,anchor,target,context,score") {
                throw DataError("ingest: " + path + " line 1: expected header id,anchor,target,context,score");
            }
            saw_header = true;
            continue;
        }
        if (line.empty()) continue;
        const auto fields = parse_csv_fields(line);
        if (fields.size() != 5) {
            res.issues.push_back({line_no, "expected 5 fields, got " + std::to_string(fields.size())});
            continue;
        }
        Record r;
        r.id = fields[0];
        r.anchor = fields[1];
        r.target = fields[2];
        r.context = fields[3];
        bool bad = false;
        if (r.id.empty()) {
            res.issues.push_back({line_no, "empty id"});
            bad = true;
        }
        if (r.anchor.empty()) {
            res.issues.push_back({line_no, "empty anchor"});
            bad = true;
        }
        if (r.target.empty()) {
            res.issues.push_back({line_no, "empty target"});
            bad = true;
        }
        if (!valid_context(r.context)) {
            res.issues.push_back({line_no, "context '" + r.context + "' is not letter+digits"});
            bad = true;
        }
        try {
            std::size_t used = 0;
            r.score = std::stod(fields[4], &used);
            if (used != fields[4].size()) throw std::invalid_argument("trailing junk");
        } catch (const std::exception&) {
            res.issues.push_back({line_no, "score '" + fields[4] + "' is not a number"});
            bad = true;
            r.score = -1.0;
        }
        if (!bad && (r.score < 0.0 || r.score > 1.0)) {
            res.issues.push_back({line_no, "score " + fields[4] + " outside [0,1]"});
            bad = true;
        }
        if (!bad) res.records.push_back(std::move(r));
    }
    if (!saw_header) {
        res.warnings.push_back("empty file: " + path);
        return res;
    }
    if (res.records.empty() && res.issues.empty()) {
        res.warnings.push_back("no data rows in " + path);
    }
    if (!res.issues.empty() && !skip_bad) {
        std::ostringstream os;
        os << "ingest: " << path << " has " << res.issues.size() << " bad row(s):";
        for (std::size_t i = 0; i < res.issues.size() && i < 10; ++i) {
            os << "\n  line " << res.issues[i].line << ": " << res.issues[i].message;
        }
        if (res.issues.size() > 10) os << "\n  ...";
        throw DataError(os.str());
    }
    return res;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

std::string sector_of(const std::string& context) {
    if (!valid_context(context)) {
        throw DataError("sector_of: context '" + context + "' is not letter+digits");
    }
    return std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(context[0]))));
}

Vocabulary Vocabulary::build(const std::vector<Record>& records, std::size_t min_freq) {
    if (records.empty()) throw DataError("build_vocab: no records");
    std::map<std::string, std::size_t> freq;  // ordered map for the sorted tie-break
    for (const Record& r : records) {
        for (const auto& w : split_words(r.anchor)) ++freq[w];
        for (const auto& w : split_words(r.target)) ++freq[w];
        ++freq[to_lower(sector_of(r.context))];
    }
    std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> tokens{"[PAD]", "[UNK]", "[SEP]", "[CLS]"};
    for (const auto& [word, count] : items) {
        if (count >= min_freq) tokens.push_back(word);
    }
    return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    static const std::vector<std::string> specials{"[PAD]", "[UNK]", "[SEP]", "[CLS]"};
    if (tokens.size() < specials.size()) throw VocabError("vocabulary: missing special tokens");
    for (std::size_t i = 0; i < specials.size(); ++i) {
        if (tokens[i] != specials[i]) {
            throw VocabError("vocabulary: token " + std::to_string(i) + " must be " + specials[i]);
        }
    }
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (!v.map_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
            throw VocabError("vocabulary: duplicate token '" + v.tokens_[i] + "'");
        }
    }
    return v;
}

int Vocabulary::id_of(const std::string& word) const {
    const auto it = map_.find(word);
    return it == map_.end() ? kUnk : it->second;
}

int Vocabulary::id_strict(const std::string& word) const {
    const auto it = map_.find(word);
    if (it == map_.end()) throw VocabError("vocabulary: unknown token '" + word + "'");
    return it->second;
}

const std::string& Vocabulary::token_of(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw VocabError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

TokenRow tokenize_pad(const Vocabulary& v, const std::string& anchor, const std::string& target,
                      const std::string& sector, std::size_t max_len) {
    auto anchor_words = split_words(anchor);
    auto target_words = split_words(target);
    const std::string sector_word = to_lower(sector);
    if (sector_word.empty()) throw DataError("tokenize_pad: empty sector");

    // CLS + 3 SEP + sector leave max_len - 5 slots for words
    if (max_len < 6) throw ConfigError("tokenize_pad: max_len must be at least 6");
    const std::size_t budget = max_len - 5;

    TokenRow row;
    if (anchor_words.size() + target_words.size() > budget) {
        row.truncated = true;
        const std::size_t keep_anchor = std::min(anchor_words.size(), budget);
        const std::size_t keep_target = budget - keep_anchor;
        anchor_words.resize(keep_anchor);
        target_words.resize(keep_target);
    }

    row.ids.reserve(max_len);
    row.ids.push_back(Vocabulary::kCls);
    for (const auto& w : anchor_words) row.ids.push_back(v.id_of(w));
    row.ids.push_back(Vocabulary::kSep);
    for (const auto& w : target_words) row.ids.push_back(v.id_of(w));
    row.ids.push_back(Vocabulary::kSep);
    row.ids.push_back(v.id_of(sector_word));
    row.ids.push_back(Vocabulary::kSep);

    row.mask.assign(max_len, 0.0);
    for (std::size_t i = 0; i < row.ids.size(); ++i) row.mask[i] = 1.0;
    row.ids.resize(max_len, Vocabulary::kPad);
    return row;
}

std::vector<std::string> detokenize(const Vocabulary& v, const std::vector<int>& ids) {
    std::vector<std::string> out;
    for (int id : ids) out.push_back(v.token_of(id));
    return out;
}

namespace {

struct UnionFind {
    std::vector<std::size_t> parent;
    explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(std::size_t a, std::size_t b) { parent[find(a)] = find(b); }
};

}  // namespace

FoldAssignment make_folds(const std::vector<Record>& records, std::size_t k, std::size_t n_bins,
                          std::uint64_t seed) {
    if (records.empty()) throw DataError("make_folds: no records");
    if (k < 2) throw ConfigError("make_folds: k must be at least 2");
    if (n_bins < 1) throw ConfigError("make_folds: n_bins must be at least 1");

    // anchor-level groups, deterministically indexed
    std::map<std::string, std::vector<std::size_t>> by_anchor;
    for (std::size_t i = 0; i < records.size(); ++i) by_anchor[records[i].anchor].push_back(i);
    std::vector<std::string> anchors;
    anchors.reserve(by_anchor.size());
    for (const auto& [a, _] : by_anchor) anchors.push_back(a);

    // merge anchors transitively on shared words
    UnionFind uf(anchors.size());
    std::map<std::string, std::size_t> word_owner;
    for (std::size_t ai = 0; ai < anchors.size(); ++ai) {
        for (const auto& w : split_words(anchors[ai])) {
            const auto [it, inserted] = word_owner.emplace(w, ai);
            if (!inserted) uf.unite(ai, it->second);
        }
    }

    struct Group {
        std::vector<std::size_t> record_idx;
        double sum = 0.0;
        double mean = 0.0;
        std::size_t bin = 0;
    };
    std::map<std::size_t, Group> by_root;
    for (std::size_t ai = 0; ai < anchors.size(); ++ai) {
        auto& g = by_root[uf.find(ai)];
        const auto& idx = by_anchor[anchors[ai]];
        g.record_idx.insert(g.record_idx.end(), idx.begin(), idx.end());
    }
    std::vector<Group> groups;
    double global_sum = 0.0;
    for (auto& [root, g] : by_root) {
        // id-sorted accumulation keeps sums independent of input order
        std::sort(g.record_idx.begin(), g.record_idx.end(),
                  [&](std::size_t a, std::size_t b) { return records[a].id < records[b].id; });
        for (std::size_t i : g.record_idx) g.sum += records[i].score;
        g.mean = g.sum / static_cast<double>(g.record_idx.size());
        g.bin = std::min(n_bins - 1, static_cast<std::size_t>(g.mean * static_cast<double>(n_bins)));
        global_sum += g.sum;
        groups.push_back(std::move(g));
    }
    const double global_mean = global_sum / static_cast<double>(records.size());
    if (groups.size() < k) {
        throw ConfigError("make_folds: " + std::to_string(groups.size()) + " group(s) cannot fill " +
                          std::to_string(k) + " folds");
    }

    // seeded shuffle breaks ties among equal-sized groups; the stable sort
    // Largest groups first so nothing bulky lands on an already-full fold;
    // equal sizes ascend by mean so low and high groups alternate into the
    // fold whose running mean needs them most.  Content-based keys make the
    // assignment independent of input order.
    std::sort(groups.begin(), groups.end(), [&](const Group& a, const Group& b) {
        if (a.record_idx.size() != b.record_idx.size())
            return a.record_idx.size() > b.record_idx.size();
        if (a.mean != b.mean) return a.mean < b.mean;
        return records[a.record_idx.front()].id < records[b.record_idx.front()].id;
    });

    std::vector<std::size_t> fold_total(k, 0);
    std::vector<double> fold_sum(k, 0.0);
    std::vector<std::vector<std::size_t>> fold_bin(k, std::vector<std::size_t>(n_bins, 0));
    FoldAssignment fa;
    fa.k = k;
    const std::size_t rot = static_cast<std::size_t>(derive_seed(seed, "folds") % k);
    for (const Group& g : groups) {
        // lightest fold overall; among equals, the one whose running mean
        // ends closest to the global mean, then the lightest in this bin.
        // The seed only rotates which fold wins exact ties.
        std::size_t best = 0;
        auto key_of = [&](std::size_t f) {
            const double n_after = static_cast<double>(fold_total[f] + g.record_idx.size());
            const double dev = std::abs((fold_sum[f] + g.sum) / n_after - global_mean);
            return std::make_tuple(fold_total[f], dev, fold_bin[f][g.bin], (f + rot) % k);
        };
        for (std::size_t f = 1; f < k; ++f) {
            if (key_of(f) < key_of(best)) best = f;
        }
        fold_bin[best][g.bin] += g.record_idx.size();
        fold_total[best] += g.record_idx.size();
        fold_sum[best] += g.sum;
        for (std::size_t i : g.record_idx) fa.fold_of[records[i].id] = best;
    }
    return fa;
}

bool FoldAudit::pass(double max_ratio, double max_dev) const {
    return complete && group_integrity && shared_word_integrity && size_ratio <= max_ratio &&
           max_mean_dev <= max_dev;
}

std::string FoldAudit::text() const {
    std::ostringstream os;
    os << "complete=" << (complete ? "yes" : "no")
       << " group_integrity=" << (group_integrity ? "yes" : "no")
       << " shared_word_integrity=" << (shared_word_integrity ? "yes" : "no") << " sizes=[";
    for (std::size_t i = 0; i < fold_sizes.size(); ++i) {
        if (i) os << ",";
        os << fold_sizes[i];
    }
    os << "] size_ratio=" << size_ratio << " max_mean_dev=" << max_mean_dev;
    return os.str();
}

FoldAudit audit_folds(const std::vector<Record>& records, const FoldAssignment& folds) {
    FoldAudit audit;
    if (folds.k == 0) return audit;

    audit.complete = folds.fold_of.size() == records.size();
    for (const Record& r : records) {
        const auto it = folds.fold_of.find(r.id);
        if (it == folds.fold_of.end() || it->second >= folds.k) audit.complete = false;
    }
    if (!audit.complete) return audit;

    audit.group_integrity = true;
    std::map<std::string, std::size_t> anchor_fold;
    for (const Record& r : records) {
        const std::size_t f = folds.fold_of.at(r.id);
        const auto [it, inserted] = anchor_fold.emplace(r.anchor, f);
        if (!inserted && it->second != f) audit.group_integrity = false;
    }

    // a word carried by anchors in two folds is exactly a violating pair
    audit.shared_word_integrity = true;
    std::map<std::string, std::size_t> word_fold;
    for (const auto& [anchor, f] : anchor_fold) {
        for (const auto& w : split_words(anchor)) {
            const auto [it, inserted] = word_fold.emplace(w, f);
            if (!inserted && it->second != f) audit.shared_word_integrity = false;
        }
    }

    audit.fold_sizes.assign(folds.k, 0);
    std::vector<double> fold_score(folds.k, 0.0);
    double total = 0.0;
    for (const Record& r : records) {
        const std::size_t f = folds.fold_of.at(r.id);
        ++audit.fold_sizes[f];
        fold_score[f] += r.score;
        total += r.score;
    }
    audit.global_mean = total / static_cast<double>(records.size());
    const std::size_t mx = *std::max_element(audit.fold_sizes.begin(), audit.fold_sizes.end());
    const std::size_t mn = *std::min_element(audit.fold_sizes.begin(), audit.fold_sizes.end());
    audit.size_ratio = mn == 0 ? std::numeric_limits<double>::infinity()
                               : static_cast<double>(mx) / static_cast<double>(mn);
    for (std::size_t f = 0; f < folds.k; ++f) {
        if (audit.fold_sizes[f] == 0) continue;
        const double mean = fold_score[f] / static_cast<double>(audit.fold_sizes[f]);
        audit.max_mean_dev = std::max(audit.max_mean_dev, std::abs(mean - audit.global_mean));
    }
    return audit;
}

void save_folds(const FoldAssignment& folds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("save_folds: cannot write " + path);
    out << "id,fold\n";
    for (const auto& [id, f] : folds.fold_of) out << id << "," << f << "\n";
    if (!out) throw IoError("save_folds: write failed for " + path);
}

FoldAssignment load_folds(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_folds: cannot open " + path);
    FoldAssignment fa;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line != "id,fold") throw DataError("load_folds: " + path + ": expected header id,fold");
            continue;
        }
        if (line.empty()) continue;
        const auto comma = line.rfind(',');
        if (comma == std::string::npos) {
            throw DataError("load_folds: " + path + " line " + std::to_string(line_no) + ": no comma");
        }
        const std::string id = line.substr(0, comma);
        std::size_t fold = 0;
        try {
            fold = std::stoul(line.substr(comma + 1));
        } catch (const std::exception&) {
            throw DataError("load_folds: " + path + " line " + std::to_string(line_no) + ": bad fold index");
        }
        fa.fold_of[id] = fold;
        fa.k = std::max(fa.k, fold + 1);
    }
    return fa;
}

std::vector<Record> shuffle_targets(std::vector<Record> batch, std::uint64_t step,
                                    std::uint64_t seed) {
    Rng rng(derive_seed(seed, "shuffle_targets", step));
    rng.shuffle(batch);
    return batch;
}

}  // namespace simscore

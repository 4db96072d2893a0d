#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "simscore/errors.hpp"

namespace simscore {

struct Record {
    std::string id;
    std::string anchor;
    std::string target;
    std::string context;  // classification code, letter + digits, e.g. "F21"
    double score = 0.0;   // in [0,1]

    friend bool operator==(const Record&, const Record&) = default;
};

struct IngestIssue {
    std::size_t line = 0;
    std::string message;
};

struct IngestResult {
    std::vector<Record> records;
    std::vector<IngestIssue> issues;
    std::vector<std::string> warnings;
};

// Reads the CSV (header: id,anchor,target,context,score) and validates every
// row. Malformed rows are reported with their line number; unless skip_bad
// is set, any issue aborts with a DataError carrying the report.
IngestResult ingest(const std::string& path, bool skip_bad = false);

// Lowercased alphanumeric word tokens.
std::vector<std::string> split_words(const std::string& text);

// "F21" -> "F"; validates the letter+digits pattern.
std::string sector_of(const std::string& context);

class Vocabulary {
public:
    static constexpr int kPad = 0, kUnk = 1, kSep = 2, kCls = 3;

    // Word-level vocabulary over anchors, targets and sector symbols.
    // Tokens below min_freq fall back to UNK at tokenize time. The result
    // does not depend on record order (sorted by frequency, then token).
    static Vocabulary build(const std::vector<Record>& records, std::size_t min_freq = 1);

    static Vocabulary from_tokens(std::vector<std::string> tokens);

    int id_of(const std::string& word) const;      // UNK when absent
    int id_strict(const std::string& word) const;  // VocabError when absent
    const std::string& token_of(int id) const;
    bool contains(const std::string& word) const { return map_.count(word) > 0; }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> map_;
};

struct TokenRow {
    std::vector<int> ids;
    std::vector<double> mask;  // 1.0 on real tokens, 0.0 on PAD
    bool truncated = false;
};

// Layout: CLS anchor SEP target SEP sector SEP, padded to max_len. When the
// row overflows, target words are dropped first, then anchor words.
TokenRow tokenize_pad(const Vocabulary& v, const std::string& anchor, const std::string& target,
                      const std::string& sector, std::size_t max_len);

std::vector<std::string> detokenize(const Vocabulary& v, const std::vector<int>& ids);

struct FoldAssignment {
    std::size_t k = 0;
    std::map<std::string, std::size_t> fold_of;  // record id -> fold
};

// Grouped, stratified K-fold assignment: records grouped by anchor, anchor
// groups merged transitively when their word sets intersect, merged groups
// binned by mean score and dealt greedily (largest first) onto the fold
// with the lightest load in that bin.
FoldAssignment make_folds(const std::vector<Record>& records, std::size_t k, std::size_t n_bins,
                          std::uint64_t seed);

struct FoldAudit {
    bool complete = false;          // every record assigned exactly once
    bool group_integrity = false;   // no anchor spans folds
    bool shared_word_integrity = false;
    std::vector<std::size_t> fold_sizes;
    double size_ratio = 0.0;        // max/min fold size
    double global_mean = 0.0;
    double max_mean_dev = 0.0;      // max |fold mean - global mean|

    bool pass(double max_ratio = 1.5, double max_dev = 0.1) const;
    std::string text() const;
};

// Independent invariant checker; never reuses make_folds internals.
FoldAudit audit_folds(const std::vector<Record>& records, const FoldAssignment& folds);

void save_folds(const FoldAssignment& folds, const std::string& path);
FoldAssignment load_folds(const std::string& path);

// Reorders the batch with a permutation drawn purely from (seed, step).
// Records stay intact; only presentation order changes.
std::vector<Record> shuffle_targets(std::vector<Record> batch, std::uint64_t step,
                                    std::uint64_t seed);

}  // namespace simscore

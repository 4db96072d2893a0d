#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "simscore/data.hpp"

namespace simscore {

// Seeded synthetic corpora backing the test suite and the CLI fixture
// command. All generators are pure functions of their seed.

// 200 records: 20 anchor families of two anchors each, joined by a shared
// family word, with family score centers spread over [0.1, 0.9]. Families
// 0-9 carry 14 records, families 10-19 carry 6.
std::vector<Record> make_fold_fixture(std::uint64_t seed);

// Token-overlap regression task. Every anchor owns 4 unique signal words;
// each target holds k of them plus 4-k noise words, scored k/4. The mapping
// from bag-of-words to score is exactly linear, so a least-squares readout
// reaches Pearson ~1 and so must the model.
struct LearnabilityFixture {
    std::vector<Record> train;  // 64 records
    std::vector<Record> eval;   // 32 records
};
LearnabilityFixture make_learnability_fixture(std::uint64_t seed);

// Text-only corpus for replaced-token-detection pretraining.
std::vector<Record> make_rtd_corpus(std::uint64_t seed);

void write_csv(const std::vector<Record>& records, const std::string& path);

}  // namespace simscore

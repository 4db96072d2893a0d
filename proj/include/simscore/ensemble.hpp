#pragma once

#include <string>
#include <utility>
#include <vector>

#include "simscore/data.hpp"
#include "simscore/objectives.hpp"

// Prediction blending across trained members. Each member is a checkpoint
// on disk; blending is a weight-normalized arithmetic mean of raw scores,
// optionally over rank-transformed scores instead.

namespace simscore {

struct MemberSpec {
    std::string checkpoint;
    std::string head_variant;     // "" accepts whatever the checkpoint holds
    std::string encoder_variant;  // "" accepts whatever the checkpoint holds
    double weight = 1.0;          // >= 0; weights must not all be zero
};

struct EnsembleManifest {
    std::vector<MemberSpec> members;
    bool rank_average = false;
};

void save_manifest(const EnsembleManifest& manifest, const std::string& path);  // IoError
EnsembleManifest load_manifest(const std::string& path);  // IoError missing, DataError malformed

// Weighted arithmetic mean with weights normalized to sum 1. The result is
// clamped per coordinate to the member hull, so rounding can never leave
// it and identical members blend to themselves exactly. DimError on length
// mismatch, ConfigError on a negative weight or an all-zero weight vector.
std::vector<double> blend(const std::vector<std::pair<std::vector<double>, double>>& members);

// Average ranks (ties share their mean rank) scaled by 1/n into (0, 1].
std::vector<double> rank_transform(const std::vector<double>& values);

struct EnsembleOutput {
    std::vector<std::vector<double>> member_preds;  // raw, per member
    std::vector<double> blended;                    // clamped to [0,1]
    std::vector<double> weights;                    // normalized
};

struct EnsembleReport {
    MetricReport blended;
    std::vector<MetricReport> members;  // spec order
    EnsembleOutput output;
};

// Loads every member, predicts over `records`, blends, and scores blend
// and members alike. A member that fails to load, or whose checkpoint
// disagrees with the declared variants, raises DataError naming it.
EnsembleReport ensemble_evaluate(const std::vector<MemberSpec>& specs,
                                 const std::vector<Record>& records, std::size_t max_len,
                                 std::size_t batch_size, double f1_threshold = 0.5,
                                 bool rank_average = false);

}  // namespace simscore

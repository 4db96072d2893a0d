#pragma once

#include <string>

#include "simscore/model.hpp"
#include "simscore/training.hpp"

// Run configuration shared by the command-line tools: a TOML-style
// key/value file ([section] headers, `key = value` lines, # comments)
// merged with command-line overrides and mirrored into the run directory
// as JSON before any work starts.

namespace simscore {

struct RunConfig {
    ModelConfig model;
    TrainConfig trainer;
    std::string data_path;   // run.data
    std::string folds_path;  // run.folds
    std::string out_dir;     // run.out
    std::size_t fold_index = 0;
    std::size_t rtd_steps = 500;
    double rtd_replace_prob = 0.15;
};

// IoError when the file cannot be read; DataError on malformed lines,
// unknown keys, or values that do not parse as the key's type.
RunConfig parse_run_config(const std::string& path);

// One "section.key=value" assignment, same keys and value grammar as the
// file. DataError on unknown keys or bad values.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Deterministic JSON mirror of the full configuration (sorted keys,
// two-space indent). Identical configs serialize byte-identically.
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace simscore

#pragma once

#include <string>
#include <vector>

#include "simscore/data.hpp"
#include "simscore/model.hpp"

// Versioned checkpoint container: a magic line, an 8-byte little-endian
// manifest length, a JSON manifest (config echo, vocabulary, tensor table),
// then raw little-endian float64 payloads in manifest order. Writing the
// same store twice produces byte-identical files.

namespace simscore {

struct Checkpoint {
    ModelConfig config;
    std::vector<std::string> vocab_tokens;
    ParamStore params;
};

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Vocabulary& vocab,
                     const ParamStore& params);  // IoError on unwritable path
Checkpoint load_checkpoint(const std::string& path);  // IoError missing, DataError malformed

// Config (de)serialization shared with run-config mirroring.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);  // DataError

}  // namespace simscore

#pragma once

#include <stdexcept>
#include <string>

namespace simscore {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/width/length mismatches between tensors or aligned vectors.
struct DimError : Error {
    using Error::Error;
};

// Invalid configuration values (bad hyperparameters, k out of range, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Broken API contract (non-scalar loss, missing gradient, all-masked row).
struct ContractError : Error {
    using Error::Error;
};

// Mathematically undefined request (empty reduction, n < 2 correlation).
struct DomainError : Error {
    using Error::Error;
};

// Malformed input data (CSV rows, context codes, manifests).
struct DataError : Error {
    using Error::Error;
};

// Token or sector symbol missing from a strict vocabulary lookup.
struct VocabError : Error {
    using Error::Error;
};

// File-level failures (missing path, unreadable checkpoint).
struct IoError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required (NaN loss abort).
struct NumericError : Error {
    using Error::Error;
};

}  // namespace simscore

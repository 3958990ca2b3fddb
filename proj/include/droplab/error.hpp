#pragma once

#include <stdexcept>

namespace droplab {

// Error taxonomy. The CLI maps these onto process exit codes
// (config -> 2, numeric -> 3, io -> 4, everything else -> 1).

// Operand shapes do not conform (matmul inner dims, broadcast, axis range).
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A value lies outside the mathematical domain of an operation
// (log of a non-positive input, ratio outside [0,1], iteration out of range).
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A call violated its precondition (non-scalar loss passed to backward,
// probing a dropout state in the wrong mode).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// An object was used after its lifecycle allows (tape reused after backward).
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Input data is malformed (token id out of vocabulary, corpus too small).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Run configuration is invalid or inconsistent.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite value and aborted.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filesystem / serialization failure.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace droplab

#pragma once

#include <stdexcept>
#include <string>

namespace elastic {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension violations in tensor ops.
struct DimensionError : Error {
    using Error::Error;
};

// API contract violations (bad arguments, misuse of a module).
struct ContractError : Error {
    using Error::Error;
};

// Non-finite values produced by a numeric op.
struct NumericError : Error {
    using Error::Error;
};

// Problems with dataset content (empty after filtering, unknown ids, ...).
struct DataError : Error {
    using Error::Error;
};

// Malformed input files.
struct FormatError : Error {
    using Error::Error;
};

// Filesystem failures.
struct IoError : Error {
    using Error::Error;
};

// Invalid configuration values or combinations.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace elastic

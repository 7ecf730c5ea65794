#pragma once

#include <stdexcept>
#include <string>

namespace mism {

// Base for all library errors. Subclasses map 1:1 onto CLI exit codes:
// ConfigError -> 2, DataError/IoError -> 3, NumericError -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shapes that cannot be combined.
struct DimensionError : Error {
    using Error::Error;
};

// A caller violated an operation precondition.
struct ContractError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed or inconsistent data (files, records, token ids).
struct DataError : Error {
    using Error::Error;
};

// A NaN/Inf was produced while strict numerics are enabled.
struct NumericError : Error {
    using Error::Error;
};

// Filesystem failures.
struct IoError : Error {
    using Error::Error;
};

}  // namespace mism

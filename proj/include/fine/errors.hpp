#pragma once

#include <stdexcept>
#include <string>

namespace fine {

// Base class for all library errors. The CLI maps subclasses to exit codes:
// config/usage -> 1, data/format -> 2, numeric -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or rank mismatch between tensors.
struct DimensionError : Error { using Error::Error; };
// Index outside the valid range.
struct BoundsError : Error { using Error::Error; };
// API misuse (calling conventions violated).
struct ContractError : Error { using Error::Error; };
// Invalid configuration value or key.
struct ConfigError : Error { using Error::Error; };
// Bad input data (labels out of range, missing files).
struct DataError : Error { using Error::Error; };
// Malformed serialized stream (magic/version/shape mismatch, truncation).
struct FormatError : Error { using Error::Error; };
// Non-finite values where finite ones are required.
struct NumericError : Error { using Error::Error; };

} // namespace fine

#pragma once

#include <stdexcept>
#include <string>

namespace dynshuffle {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map categories onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or ranks.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Structurally invalid configuration: non-divisible groups, kernels longer
// than the padded input, negative trade-off weights and so on.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Bad user data such as out-of-range class labels.
class InputError : public Error {
public:
    using Error::Error;
};

// NaN or infinity where a finite number is required.
class NumericError : public Error {
public:
    using Error::Error;
};

// API misuse, e.g. calling backward on a non-scalar.
class UsageError : public Error {
public:
    using Error::Error;
};

// Malformed files: datasets, checkpoints, manifests.
class FormatError : public Error {
public:
    using Error::Error;
};

// Missing or malformed dataset files.
class DataError : public FormatError {
public:
    using FormatError::FormatError;
};

}  // namespace dynshuffle

#pragma once

#include <stdexcept>
#include <string>

namespace cstrata {

/// Malformed input: bad spec file, unknown learner id, out-of-range option.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Data that cannot be parsed or violates the observed-data structure.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A fit or estimator could not produce a value (empty stratum, zero denominator, ...).
class EstimationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace cstrata

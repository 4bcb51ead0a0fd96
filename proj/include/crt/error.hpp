#pragma once

#include <stdexcept>
#include <string>

namespace crt {

/// Malformed configuration, unknown preset or invalid parameters.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Input data violating the data dictionary.
class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// An estimator could not produce a value (empty arm, zero denominator, ...).
class EstimationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// CLI exit codes
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitEstimation = 4;

} // namespace crt

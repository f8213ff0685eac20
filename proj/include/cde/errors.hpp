#pragma once

#include <stdexcept>
#include <string>

namespace cde {

// Invalid configuration (bad field values, infeasible splits, key parse failures).
// The CLI maps this to exit code 1.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric contract violations: shape mismatches between graph nodes,
// non-finite values produced by an op, invalid op arguments.
struct NumericsError : std::runtime_error {
    explicit NumericsError(const std::string& msg) : std::runtime_error(msg) {}
};

// File I/O and (de)serialization failures.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training aborted (non-finite loss); message carries step and batch indices.
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace cde

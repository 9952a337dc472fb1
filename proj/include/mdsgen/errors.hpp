#pragma once

#include <stdexcept>
#include <string>

namespace mds {

// Shape/dimension mismatch between tensors or against a config.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

// Invalid configuration value (ratio out of range, indivisible heads, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Non-finite or otherwise invalid numeric value.
struct ValueError : std::runtime_error {
    explicit ValueError(const std::string& msg) : std::runtime_error("value error: " + msg) {}
};

// Training diverged (NaN loss etc).
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error("training error: " + msg) {}
};

// File / container format problems.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace mds

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace diffattack {

// Dimension mismatch between operands.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Caller violated an operation precondition (label out of range, t outside [0,1], ...).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// A value went non-finite during training or integration.
struct DivergenceError : std::runtime_error {
    DivergenceError(const std::string& what, std::size_t step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    std::size_t step() const noexcept { return step_; }

  private:
    std::size_t step_;
};

// Malformed or version-mismatched file.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Artifact does not belong to the current world/config.
struct ManifestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace diffattack

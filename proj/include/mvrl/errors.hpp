#pragma once

#include <stdexcept>
#include <string>

namespace mvrl {

// Shape or dimension mismatch between operands.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Index or query position outside valid bounds.
struct RangeError : std::out_of_range {
  explicit RangeError(const std::string& msg) : std::out_of_range(msg) {}
};

// Operation invoked in a state that violates its contract
// (e.g. backward on a non-scalar, stepping a finished episode).
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Configuration failed validation; message lists the offending fields.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint cannot be used: bad magic, version, dtype or config hash.
struct VersionError : std::runtime_error {
  explicit VersionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Requested operation is unsupported for the checkpoint's fusion mode.
struct ModeError : std::runtime_error {
  explicit ModeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mvrl

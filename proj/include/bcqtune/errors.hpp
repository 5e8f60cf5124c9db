#pragma once

#include <stdexcept>
#include <string>

namespace bcqtune {

// Error taxonomy. The CLI maps these onto exit codes:
//   usage 2, data/integrity 3, numerical 4.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible matrix/vector dimensions.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid quantization/training configuration (bad q, g not dividing h_in,
// schema violations in run-config files, ...).
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Plane or element index out of range.
struct IndexError : Error {
  explicit IndexError(const std::string& msg) : Error(msg) {}
};

// Token id outside the vocabulary, sequence too long, ...
struct InputError : Error {
  explicit InputError(const std::string& msg) : Error(msg) {}
};

// Corrupt or malformed file: bad magic, version mismatch, checksum failure,
// truncation. The message states which.
struct IntegrityError : Error {
  explicit IntegrityError(const std::string& msg) : Error(msg) {}
};

// Checkpoint does not bind to this base model (content hash mismatch).
struct CompatibilityError : Error {
  explicit CompatibilityError(const std::string& msg) : Error(msg) {}
};

// Object used outside its lifecycle contract (e.g. backward on a consumed tape).
struct StateError : Error {
  explicit StateError(const std::string& msg) : Error(msg) {}
};

// NaN gradients, diverged training, failed gradient check.
struct NumericalError : Error {
  explicit NumericalError(const std::string& msg) : Error(msg) {}
};

}  // namespace bcqtune

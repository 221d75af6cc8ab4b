#pragma once

#include <stdexcept>
#include <string>

namespace corrmoe {

/// Invalid configuration or precondition violation detected at input
/// validation time (CLI exit code 1).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A caller violated an operation precondition.
class PreconditionError : public std::invalid_argument {
 public:
  explicit PreconditionError(const std::string& msg)
      : std::invalid_argument(msg) {}
};

/// Geometric input does not admit a solution (rank-deficient design
/// matrix, zero translation, failed cheirality sweep, ...).
class DegenerateInputError : public std::runtime_error {
 public:
  explicit DegenerateInputError(const std::string& msg)
      : std::runtime_error(msg) {}
};

/// The synthetic generator could not produce enough visible points.
class GenerationError : public std::runtime_error {
 public:
  explicit GenerationError(const std::string& msg)
      : std::runtime_error(msg) {}
};

/// File or serialization failure.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Training aborted (non-finite loss and similar runtime failures,
/// CLI exit code 2).
class RuntimeFailure : public std::runtime_error {
 public:
  explicit RuntimeFailure(const std::string& msg)
      : std::runtime_error(msg) {}
};

}  // namespace corrmoe

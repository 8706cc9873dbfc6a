// Error taxonomy shared across the library. The CLI maps each class to a
// distinct exit code.
#pragma once

#include <stdexcept>
#include <string>

namespace mer {

// Caller misuse: bad arguments, empty batches, wrong counts.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension mismatches.
class ShapeError : public UsageError {
 public:
  explicit ShapeError(const std::string& msg) : UsageError(msg) {}
};

// Input images whose resolution the network cannot consume.
class ResolutionError : public UsageError {
 public:
  explicit ResolutionError(const std::string& msg) : UsageError(msg) {}
};

// Degenerate or empty facial geometry.
class GeometryError : public UsageError {
 public:
  explicit GeometryError(const std::string& msg) : UsageError(msg) {}
};

// File-format problems: bad landmark files, manifests, configs.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem and stream failures.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite losses, divergence, failed numeric postconditions.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint/model mismatch.
class VersionError : public std::runtime_error {
 public:
  explicit VersionError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mer

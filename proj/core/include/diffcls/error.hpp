#pragma once

#include <stdexcept>
#include <string>

namespace diffcls {

/// Base of every exception thrown by the library. `kind()` is a stable
/// machine-readable tag used in the CLI's error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& message) : Error("dimension", message) {}
};

/// Invalid construction parameters (schedules, datasets, architectures).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

/// A call that violates an operation's preconditions.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& message) : Error("usage", message) {}
};

/// NaN or Inf detected while strict mode is on.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message) : Error("numeric", message) {}
};

/// Malformed dataset, checkpoint, or config file.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& message) : Error("format", message) {}
};

}  // namespace diffcls

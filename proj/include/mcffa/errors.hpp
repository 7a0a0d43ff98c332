#pragma once

#include <stdexcept>
#include <string>

namespace mcffa {

// Incompatible tensor extents, channel counts or layer configuration.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced where finite values were expected.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or unreadable dataset inputs (CSV rows, image files).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration values or option combinations.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Corrupt or incompatible checkpoint files.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint does not fit the model it is loaded into. Carries the first
// offending tensor name.
class CheckpointMismatch : public CheckpointError {
 public:
  CheckpointMismatch(std::string tensor_name, const std::string& what)
      : CheckpointError(what), tensor_name_(std::move(tensor_name)) {}
  const std::string& tensor_name() const noexcept { return tensor_name_; }

 private:
  std::string tensor_name_;
};

}  // namespace mcffa

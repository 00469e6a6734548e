#pragma once

#include <stdexcept>
#include <string>

namespace mfsgd {

/// Caller passed arguments that violate a documented precondition.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A run configuration is internally inconsistent (e.g. a block exceeds device capacity).
class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

/// Malformed or truncated input bytes.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A feature element became non-finite during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mfsgd

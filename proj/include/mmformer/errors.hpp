#pragma once

#include <stdexcept>
#include <string>

namespace mmformer {

// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Math domain violation (log of non-positive, division by zero, NaN/Inf output).
class DomainError : public Error {
 public:
  using Error::Error;
};

// API misuse: backward on a non-scalar, writing to an interior tensor, gradient on a frozen module.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration. `key()` names the offending setting when there is one.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what, std::string key = {})
      : Error(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint written by an incompatible format version.
class VersionError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace mmformer

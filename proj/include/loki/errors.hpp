#pragma once

#include <stdexcept>
#include <string>

namespace loki {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or width mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (unknown kind, q out of range, bad rank, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Layer / node / token index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Violated precondition of an operation.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced or consumed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Artifact digests do not bind (log from another model, etc).
class ProvenanceError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data or files.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Pipeline stage failure; carries the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace loki

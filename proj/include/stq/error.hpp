#pragma once

#include <stdexcept>
#include <string>

namespace stq {

// Base class for every error the engine raises. Each subclass maps to one
// failure category; the CLI turns the category into an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* category() const noexcept { return "error"; }
};

class DimensionError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "dimension"; }
};

class ArgumentError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "argument"; }
};

class UnsupportedDimension : public ArgumentError {
 public:
  using ArgumentError::ArgumentError;
  const char* category() const noexcept override { return "unsupported_dimension"; }
};

class StateError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "state"; }
};

class InvariantViolation : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "invariant"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* category() const noexcept override { return "config"; }
};

// Raised by the binary container readers. `kind` distinguishes the ways a
// file can be bad so callers (and tests) can tell them apart.
class FormatError : public Error {
 public:
  enum class Kind { io, malformed_header, truncated, integrity, checksum };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }
  const char* category() const noexcept override { return "data"; }

 private:
  Kind kind_;
};

}  // namespace stq

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace histm {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not agree with an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A hyperparameter or scheme is invalid (even kernel, unknown init, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An API was called out of order or on the wrong kind of value.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a precondition (negative traffic, short series, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A value is outside the mathematical domain of an operation.
class NumericDomainError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Checkpoint loading failures, distinguished by kind.
class CheckpointError : public Error {
 public:
  enum class Kind { kBadMagic, kTruncated, kShapeMismatch, kFormat };
  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace histm

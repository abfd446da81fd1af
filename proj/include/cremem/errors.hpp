#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cremem {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Formula / model specification problems (CLI exit code 2).
class SpecError : public Error {
 public:
  using Error::Error;
};

class SyntaxError : public SpecError {
 public:
  SyntaxError(const std::string& msg, std::size_t pos)
      : SpecError(msg + " at position " + std::to_string(pos)), pos_(pos) {}
  std::size_t position() const noexcept { return pos_; }

 private:
  std::size_t pos_;
};

class UnknownIdentifier : public SpecError {
 public:
  explicit UnknownIdentifier(const std::string& name)
      : SpecError("unknown identifier '" + name + "'"), name_(name) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

class EstimabilityError : public SpecError {
 public:
  using SpecError::SpecError;
};

class DuplicateTerm : public SpecError {
 public:
  using SpecError::SpecError;
};

class IncompatibleSpec : public SpecError {
 public:
  using SpecError::SpecError;
};

class InvalidLevels : public SpecError {
 public:
  using SpecError::SpecError;
};

class NotOrthonormal : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public SpecError {
 public:
  using SpecError::SpecError;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Data problems (CLI exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& msg, std::size_t row, const std::string& column)
      : DataError(msg + " (row " + std::to_string(row) + ", column '" + column + "')"),
        row_(row),
        column_(column) {}
  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

class MissingValue : public ParseError {
 public:
  MissingValue(std::size_t row, const std::string& column)
      : ParseError("missing value", row, column) {}
};

class UnknownLevel : public ParseError {
 public:
  UnknownLevel(const std::string& level, std::size_t row, const std::string& column)
      : ParseError("unknown level '" + level + "'", row, column) {}
};

class MissingColumn : public DataError {
 public:
  explicit MissingColumn(const std::string& name)
      : DataError("missing column '" + name + "'") {}
};

class LevelMismatch : public DataError {
 public:
  using DataError::DataError;
};

class UnbalancedDesign : public DataError {
 public:
  using DataError::DataError;
};

// Numerical failures inside the REML engine.
class SingularFixedDesign : public Error {
 public:
  using Error::Error;
};

class FactorizationFailure : public Error {
 public:
  using Error::Error;
};

class NonConvergedFit : public Error {
 public:
  using Error::Error;
};

class IncompatibleStructure : public Error {
 public:
  using Error::Error;
};

class MaxFitFailed : public Error {
 public:
  using Error::Error;
};

class SingularHessian : public Error {
 public:
  using Error::Error;
};

}  // namespace cremem

#pragma once

#include <stdexcept>
#include <string>

namespace increlearn {

// Base of every error the library throws. The CLI maps the subclasses onto
// process exit codes (validation 2, numerical 3, store 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Dimension or feature-space mismatch.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Operation called on a value that does not satisfy its precondition
// (e.g. a DFP memory without pairs).
class PreconditionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Mismatched HessianRepr variants.
class TypeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Requested representation exceeds a configured size budget.
class CapacityError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& where, std::size_t line, const std::string& what)
      : ValidationError(where + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Metric undefined for the input (e.g. AUC with a single class).
class UndefinedMetricError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class StoreError : public Error {
 public:
  using Error::Error;
};

class StoreVersionError : public StoreError {
 public:
  using StoreError::StoreError;
};

class StoreIntegrityError : public StoreError {
 public:
  using StoreError::StoreError;
};

}  // namespace increlearn

#pragma once

#include <stdexcept>
#include <string>

namespace raretail {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration or arguments. Maps to CLI exit code 2.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class InvalidTokenError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DegenerateTextError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Oracle enumeration would exceed the completion budget.
class CapExceededError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// MBAR did not converge, or too many bootstrap replicas were discarded.
// Maps to CLI exit code 3.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double last_residual)
      : Error(what), last_residual_(last_residual) {}
  double last_residual() const noexcept { return last_residual_; }

 private:
  double last_residual_;
};

// Filesystem and record-store failures. Maps to CLI exit code 4.
class IoError : public Error {
 public:
  using Error::Error;
};

// External model transport failure after bounded retries.
class NetworkError : public IoError {
 public:
  using IoError::IoError;
};

// External model returned a malformed or non-normalized payload.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace raretail

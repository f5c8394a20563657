#pragma once

#include <stdexcept>
#include <string>

namespace ensemble_forge {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A precondition on an argument was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// File contents did not match the expected format or schema version.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity reached a place where only finite values are allowed.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Raised by backend calls. Always names the backend that failed.
class BackendError : public Error {
 public:
  BackendError(std::string backend, std::string detail)
      : Error("backend '" + backend + "': " + detail), backend_(std::move(backend)), detail_(std::move(detail)) {}

  const std::string& backend() const noexcept { return backend_; }
  /// The message without the backend prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string backend_;
  std::string detail_;
};

}  // namespace ensemble_forge

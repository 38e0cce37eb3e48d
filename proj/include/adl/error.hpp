#pragma once

#include <stdexcept>
#include <string>

namespace adl {

enum class ErrorCode {
  kInvalidArgument = 1,
  kDomain = 2,
  kIo = 3,
  kParse = 4,
  kNumeric = 5,
  kState = 6,
};

// Base exception for the library. The C API maps `code()` onto adl_status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorCode::kInvalidArgument, what) {}
};

// Raised when an argument is outside the mathematical domain of a map, e.g. a
// score below the initial manifold of the score/norm curve.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what)
      : Error(ErrorCode::kDomain, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCode::kIo, what) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what)
      : Error(ErrorCode::kParse, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ErrorCode::kNumeric, what) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& what)
      : Error(ErrorCode::kState, what) {}
};

}  // namespace adl

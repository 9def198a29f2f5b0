#pragma once

#include <stdexcept>
#include <string>

namespace edualign {

// Error classes map onto the CLI exit-code contract:
//   2 = configuration / input error
//   3 = data or checkpoint corruption
//   4 = numerical failure
class Error : public std::runtime_error {
 public:
  Error(int exit_code, const std::string& msg)
      : std::runtime_error(msg), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class ArgumentError : public Error {
 public:
  explicit ArgumentError(const std::string& m) : Error(2, m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(2, m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error(2, m) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& m) : Error(3, m) {}
};

class ParseError : public DataError {
 public:
  explicit ParseError(const std::string& m) : DataError(m) {}
};

class CorruptionError : public DataError {
 public:
  explicit CorruptionError(const std::string& m) : DataError(m) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& m) : Error(4, m) {}
};

class AnnotationError : public Error {
 public:
  explicit AnnotationError(const std::string& m) : Error(2, m) {}
};

// Transient transport failures (timeouts, connection resets); callers may retry.
class RetryableAnnotationError : public AnnotationError {
 public:
  explicit RetryableAnnotationError(const std::string& m) : AnnotationError(m) {}
};

// Thrown when a correlation is requested on constant input. Surfaced
// explicitly so callers can report "undefined" instead of a silent NaN.
class UndefinedCorrelation : public Error {
 public:
  explicit UndefinedCorrelation(const std::string& m) : Error(2, m) {}
};

}  // namespace edualign

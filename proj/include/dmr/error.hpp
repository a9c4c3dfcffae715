#pragma once

#include <stdexcept>
#include <string>

namespace dmr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed input file or record. line() is 1-based, 0 when not applicable.
class DataError : public Error {
 public:
  DataError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Invalid configuration or argument value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN / Inf in a loss or gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace dmr

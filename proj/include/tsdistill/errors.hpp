#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tsdistill {

// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes or channel counts do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A hyperparameter or argument is outside its valid range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// A caller broke a precondition (non-scalar loss, out-of-range interval, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Factorization failure, non-finite values and similar numeric breakdowns.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. Carries the 1-based location when known (0 = unknown).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t column = 0)
      : Error(format(what, line, column)), line_(line), column_(column) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  static std::string format(const std::string& what, std::size_t line, std::size_t column) {
    std::string out = what;
    if (line > 0) {
      out += " (line " + std::to_string(line);
      if (column > 0) out += ", column " + std::to_string(column);
      out += ")";
    }
    return out;
  }

  std::size_t line_;
  std::size_t column_;
};

}  // namespace tsdistill

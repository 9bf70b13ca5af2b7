#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cdd {

// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Value outside the domain of a function (log of a non-positive number,
// a non-finite intermediate).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Input for which the quantity is undefined (zero-norm vector, empty score
// denominator, single-class PR task).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Caller broke a precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Operations invoked out of order (duplicate task, missing snapshot).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Data that parsed but breaks an invariant (empty polarity subset, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
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

}  // namespace cdd

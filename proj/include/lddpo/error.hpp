#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lddpo {

// Malformed arguments to a library call (bad token id, empty sequence,
// length mismatch, out-of-range index).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid or infeasible configuration (world, training or experiment).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside the mathematical domain of a closed-form expression.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint, dataset or other artifact that should exist does not.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        line_(line) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Finite-difference oracle hit a non-finite function value.
class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lddpo

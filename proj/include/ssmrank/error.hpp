#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ssmrank {

/// Base of every error thrown by the library. The CLI maps subclasses onto
/// exit codes (input = 2, capacity = 3, numeric = 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed user input: bad ids, empty text, unparsable files.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A file line could not be parsed.
class ParseError : public InputError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : InputError(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Parameters that violate a documented invariant.
class ParameterError : public InputError {
 public:
  using InputError::InputError;
};

/// Caller broke a precondition (shape mismatch, wrong trace, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Requested configuration does not fit the memory budget.
class CapacityError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

}  // namespace detail
}  // namespace ssmrank

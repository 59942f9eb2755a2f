#pragma once

#include <stdexcept>
#include <string>

namespace rlda {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes or sizes do not line up. Messages name the operands.
struct DimensionError : Error {
  using Error::Error;
};

// Bad or inconsistent configuration (unknown keys, invalid combinations).
// The CLI maps this to exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

// Non-finite values or failed numeric recovery. CLI exit code 3.
struct NumericError : Error {
  using Error::Error;
};

// An API precondition was violated (e.g. stepping a terminal state).
struct ContractError : Error {
  using Error::Error;
};

// Input outside a function's mathematical domain.
struct DomainError : Error {
  using Error::Error;
};

}  // namespace rlda

#pragma once

#include <stdexcept>
#include <string>

namespace msat {

// Error taxonomy maps onto the CLI exit-code contract:
//   ConfigError -> 2, IoError (and format subtypes) -> 3, DivergenceError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class VersionError : public IoError {
 public:
  using IoError::IoError;
};

class ChecksumError : public IoError {
 public:
  using IoError::IoError;
};

class TruncatedError : public IoError {
 public:
  using IoError::IoError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Thrown when an environment is stepped after termination or a state
// precondition is violated.
class StateError : public Error {
 public:
  using Error::Error;
};

// Non-finite training loss aborts the run instead of propagating NaNs.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace msat

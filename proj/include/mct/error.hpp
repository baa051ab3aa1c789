#pragma once

#include <stdexcept>
#include <string>

namespace mct {

// Every failure raised by the library derives from Error so the CLI can map
// error categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or rank disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or inconsistent specs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during forward/backward or training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace mct

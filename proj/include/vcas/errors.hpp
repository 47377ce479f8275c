#pragma once

#include <stdexcept>
#include <string>

namespace vcas {

// Base of every error the library throws. The CLI maps each subtype to an
// exit code (see tools/vcas.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// Corrupt or truncated files, wrong magic/version.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Rejected run configuration or unmet command precondition.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace vcas

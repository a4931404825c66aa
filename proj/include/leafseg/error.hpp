#pragma once

#include <stdexcept>
#include <string>

namespace leafseg {

/// Base of every error the library throws on bad data or failed I/O.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents (TIFF, JSON, manifest, checkpoint).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Inputs that violate a documented precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or infinity.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace leafseg

#pragma once

#include <stdexcept>
#include <string>

namespace hsod {

// Base of every error the library throws. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes or image dimensions that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents: bad magic, truncated payload, header/payload mismatch.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Header dimensions disagree with the payload (e.g. trailing bytes).
class PayloadMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Well-formed input whose content violates a precondition (empty mask, white <= dark, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or scene description.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A non-finite value appeared during a numeric computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace hsod

#pragma once

#include <stdexcept>
#include <string>

namespace spectra {

// Root of every error the library throws. The CLI maps subclasses onto exit
// codes, so new error kinds must derive from the right intermediate class.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exit code 1 family.
class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

// Exit code 2 family.
class DataError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public DataError {
 public:
  using DataError::DataError;
};

class LabelError : public DataError {
 public:
  using DataError::DataError;
};

class CalibrationError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CrcMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Exit code 3 family.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace spectra

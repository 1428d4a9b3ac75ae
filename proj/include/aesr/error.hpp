#pragma once

#include <stdexcept>
#include <string>

namespace aesr {

// Every failure raised by the library derives from Error so callers can catch
// one type; the subclasses only distinguish how a CLI should report them.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or model file failed its checksum or structural validation.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// A statistical fit had no usable data (constant samples, too few images).
class FitError : public Error {
 public:
  using Error::Error;
};

/// A loss or activation became NaN/Inf during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace aesr

#pragma once

#include <stdexcept>
#include <string>

namespace cisseg {

// Base class of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes, axes, or class sets that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf or out-of-domain values.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid arguments that are neither shape nor numeric problems.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// File read/write failures, corrupted or version-mismatched records.
class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace cisseg

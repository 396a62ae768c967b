#pragma once

#include <stdexcept>
#include <string>

namespace capsfor {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

/// Shapes that do not fit together (names the offending axes).
class DimensionError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "dimension"; }
};

/// Out-of-range hyperparameter or label.
class ParameterError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "parameter"; }
};

/// Malformed weight, checkpoint or score file.
class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format"; }
};

/// Missing or unusable input data (images, manifests).
class DataError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "data"; }
};

/// NaN/Inf encountered during forward, backward or optimisation.
class NumericalError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numerical"; }
};

/// Invalid run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

/// Misuse of the gradient tape (second backward, non-scalar loss).
class TapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "tape"; }
};

}  // namespace capsfor

#pragma once

#include <stdexcept>
#include <string>

namespace percgan {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or missing configuration value. The message names the field.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A weights container, checkpoint or descriptor could not be read.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes or spatial sizes violate a contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered in activations or losses.
class NumericError : public Error {
 public:
  using Error::Error;
};

class PartitionError : public Error {
 public:
  using Error::Error;
};

class SurgeryError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or encoding failure; carries the underlying message verbatim.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace percgan

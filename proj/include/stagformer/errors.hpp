#pragma once

#include <stdexcept>
#include <string>

namespace stagformer {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value (model, mask, rope, run config).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Out-of-range token id or coordinate.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Mathematically undefined input (e.g. softmax of an empty row).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Object used in the wrong lifecycle state (tape, caches, decode state).
class StateError : public Error {
 public:
  using Error::Error;
};

// Operation not available for this model variant.
class ModeError : public Error {
 public:
  using Error::Error;
};

// Malformed or incompatible file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite value during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace stagformer

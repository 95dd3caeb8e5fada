#pragma once

#include <stdexcept>
#include <string>

namespace evoprompt {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not compose.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar hyperparameter is outside its valid range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// An API was used out of its documented order or preconditions.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Zero norms, non-finite values and similar numeric hazards.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid user data (token ids, labels, files).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent configuration (missing prompt layers, bad flag combinations).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite or exploding loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace evoprompt

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace condnet {

/// Base of every error the engine throws.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree.
class DimensionError : public Error {
  using Error::Error;
};
/// Invalid layer / policy / training configuration.
class ConfigError : public Error {
  using Error::Error;
};
/// Operation called in the wrong lifecycle state (e.g. backward before forward).
class StateError : public Error {
  using Error::Error;
};
/// Architecture failed static validation.
class ValidationError : public Error {
  using Error::Error;
};
/// Non-finite value produced or consumed.
class EvaluationError : public Error {
  using Error::Error;
};
class ArgumentError : public Error {
  using Error::Error;
};
/// Malformed file contents.
class FormatError : public Error {
  using Error::Error;
};
class DataError : public Error {
  using Error::Error;
};
class UnsupportedError : public Error {
  using Error::Error;
};

} // namespace condnet

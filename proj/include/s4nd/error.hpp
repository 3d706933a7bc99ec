#pragma once

#include <stdexcept>
#include <string>

namespace s4nd {

/// Base of every error thrown by the library. Each subclass maps to one
/// process exit code in the command-line tool.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree along a named axis.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Kernel/stride/padding combination produces an empty or negative extent.
class GeometryError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked out of order, e.g. backward without a recorded forward.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input (headers, CSV rows, config files).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input (checkpoints, raw payloads).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Phantom placement could not satisfy its constraints within the retry budget.
class GenerationError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Well-formed input that violates a semantic rule (duplicate candidates,
/// evaluation without ground truth).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace s4nd

#pragma once

#include <stdexcept>
#include <string>

namespace kkl {

/// Shapes of arguments do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced a non-finite value, diverged, or failed a numeric check.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configuration or archive file is malformed or inconsistent.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace kkl

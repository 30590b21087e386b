// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace voxseg {

/// Bad input, bad config, violated precondition. The CLI maps these to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Spatial shape incompatible with an operation (e.g. indivisible model input).
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// File system or format failures. Exit code 1.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace voxseg

#pragma once

#include <stdexcept>
#include <string>

namespace mkst {

/// Bad input: malformed configs, inconsistent shapes, schema violations.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not conform for the requested operation.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Divergence or non-finite values during a forward/backward pass.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system and stream failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mkst

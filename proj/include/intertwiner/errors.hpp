#pragma once

#include <stdexcept>
#include <string>

namespace intertwiner {

// Bad values fed to an operation (zero-norm rows, out-of-domain inputs, ...).
class InvalidInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Shape mismatch between operands.
class DimensionError : public InvalidInputError {
 public:
  using InvalidInputError::InvalidInputError;
};

// Problem size beyond a hard operation limit (e.g. brute-force oracle).
class SizeLimitError : public InvalidInputError {
 public:
  using InvalidInputError::InvalidInputError;
};

// Numerical degeneracy at runtime (kernel underflow, diverged training).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training loss became non-finite; carries the offending step.
class TrainingDivergedError : public NumericError {
 public:
  TrainingDivergedError(int step, const std::string& what)
      : NumericError(what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

// Filesystem-level failure (missing file, unwritable directory).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file contents or config documents.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace intertwiner

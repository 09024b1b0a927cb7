#pragma once

#include <stdexcept>
#include <string>

namespace gocoma {

// Bad shapes, non-finite values, mismatched curvature, malformed records.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Point outside the open Poincare ball.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Non-finite loss or gradient; the message names the operation.
class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing external tool (compiler, interpreter).
class EnvironmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gocoma

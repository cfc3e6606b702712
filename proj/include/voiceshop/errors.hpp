#pragma once

#include <stdexcept>
#include <string>

namespace vs {

// Precondition or shape contract violated by the caller.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation (t outside [0,1], log of a nonpositive value, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Non-finite values produced during a computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ODE solver exhausted its step budget.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Training diverged (NaN loss) or cannot start (degenerate data).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LookupError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Parallel manifest is incomplete or inconsistent.
class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An upstream artifact (checkpoint, world, manifest) is missing on disk.
class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace vs

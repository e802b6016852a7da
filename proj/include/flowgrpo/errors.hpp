#pragma once

#include <stdexcept>
#include <string>

namespace flowgrpo {

// Bad arguments: dimension mismatch, out-of-range time, invalid plan.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Evaluation at a point where a schedule coefficient divides by zero.
class SingularityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Operation called in the wrong state (e.g. backward without a forward tape).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN/Inf encountered in a loss, gradient or ratio.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flowgrpo

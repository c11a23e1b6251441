#pragma once

#include <stdexcept>
#include <string>

namespace difftrack {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid argument or precondition violation.
struct ParameterError : Error {
  using Error::Error;
};

// A numerical routine failed to reach its tolerance.
struct NumericalError : Error {
  using Error::Error;
};

// An iterative limit process did not stabilize within the supplied budget.
struct ConvergenceError : Error {
  using Error::Error;
};

// Problem size exceeds an enumeration bound.
struct CapacityError : Error {
  using Error::Error;
};

// A value lies outside the representable or admissible range.
struct RangeError : Error {
  using Error::Error;
};

// Inputs are mutually inconsistent with the declared model.
struct ModelError : Error {
  using Error::Error;
};

// Malformed experiment configuration.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace difftrack

#pragma once

#include <stdexcept>
#include <string>

namespace fusionformer {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes are incompatible. Message names both shapes.
struct DimensionError : Error {
  using Error::Error;
};

// A token or id does not exist in the named lookup table.
struct VocabularyError : Error {
  using Error::Error;
};

// A sequence exceeds a configured maximum length.
struct LengthError : Error {
  using Error::Error;
};

// A caller violated an operation contract (e.g. backward on a non-scalar).
struct ContractError : Error {
  using Error::Error;
};

// Fusion weight normalizer fell below the epsilon guard.
struct DegenerateWeightsError : Error {
  using Error::Error;
};

// Learning-rate schedule queried past its final step.
struct ScheduleError : Error {
  using Error::Error;
};

// A loss term had no unmasked target positions.
struct EmptyLossError : Error {
  using Error::Error;
};

// Invalid run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// File could not be read or written.
struct IoError : Error {
  using Error::Error;
};

// Training aborted (non-finite gradient, degenerate state, ...).
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace fusionformer

#pragma once

#include <stdexcept>
#include <string>

namespace hran {

// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or dimensionality disagreement between tensors; the message names both shapes.
struct DimensionError : Error {
  using Error::Error;
};

// Violated operation precondition (empty sequence, non-scalar backward root, ...).
struct ContractError : Error {
  using Error::Error;
};

// Softmax requested over a fully masked support.
struct InvalidMaskError : Error {
  using Error::Error;
};

// Token id outside the owning vocabulary.
struct VocabError : Error {
  using Error::Error;
};

// Bad argument value (non-positive sigma, invalid split fractions, ...).
struct ParameterError : Error {
  using Error::Error;
};

// Non-finite value where a finite one is required.
struct NumericError : Error {
  using Error::Error;
};

// Malformed file content (raw corpus, vocab file, checkpoint, config).
struct FormatError : Error {
  using Error::Error;
};

// Checkpoint and run configuration disagree on load/resume.
struct CompatibilityError : Error {
  using Error::Error;
};

}  // namespace hran

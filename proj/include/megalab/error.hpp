#pragma once

#include <stdexcept>
#include <string>

namespace megalab {

// Base for every error raised by the library. The CLI maps each subclass
// onto a distinct process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Input violates a documented precondition or invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered in a computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Checkpoint/config/vocabulary mismatch between artifacts.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

// A required upstream artifact (e.g. stage-1 checkpoint) is absent.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

// dtw_distance on contours without voiced frames.
class EmptyVoicedError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace megalab

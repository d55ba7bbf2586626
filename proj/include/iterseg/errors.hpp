#pragma once

#include <stdexcept>
#include <string>

namespace iterseg {

// Base class for every error this library throws on purpose.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk data: bad magic, bad version, truncated payload.
struct FormatError : Error {
  using Error::Error;
};

// Structurally valid data with impossible sizes (zero-sized grid, mismatched
// payload length, image/label dimension mismatch).
struct SizeError : Error {
  using Error::Error;
};

// Rejected configuration: unknown key, out-of-range value, missing required
// field, malformed config text.
struct ConfigError : Error {
  using Error::Error;
};

// Tensor or parameter-vector shape mismatch between data and config.
struct ShapeError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

// Unknown id: semantic class not in the class table, missing frame, missing
// checkpoint provenance.
struct LookupError : Error {
  using Error::Error;
};

// Manifest-level contract breaks: duplicate frames, missing files, a sequence
// without a labeled frame.
struct ManifestError : Error {
  using Error::Error;
};

// File could not be read or written.
struct IoError : Error {
  using Error::Error;
};

// A metric has an empty denominator (no classes present, no ground truth).
struct UndefinedMetricError : Error {
  using Error::Error;
};

// Internal invariant broke. Always a bug, never a data problem.
struct ContractError : Error {
  using Error::Error;
};

}  // namespace iterseg

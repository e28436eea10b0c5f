// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace p4q {

/// Base of every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or extents do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument is outside its domain (non-positive temperature, k > K, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// An object was used in the wrong lifecycle state (unfinalized params, empty calibrator).
class StateError : public Error {
 public:
  using Error::Error;
};

/// API misuse that is not a shape problem (non-scalar loss, reused tape).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input data is unusable (NaN/Inf batch, empty dataset, bad labels).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Integer codes outside the range their params allow.
class CorruptionError : public DataError {
 public:
  using DataError::DataError;
};

/// On-disk container or sidecar does not parse.
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// Cosine of a zero-norm vector.
class DegenerateVectorError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced during a numeric computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace p4q

#pragma once

#include <stdexcept>
#include <string>

namespace purifine {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An argument or constructed value violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Two objects that must share a shape (dimension, architecture) do not.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A file exists but its contents are not in the expected format.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Reading or writing the filesystem failed.
class StorageError : public Error {
 public:
  using Error::Error;
};

/// Optimization produced a non-finite loss.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// The embedding-poisoning attack did not reach its success gate.
class AttackFailure : public Error {
 public:
  using Error::Error;
};

}  // namespace purifine

#pragma once

#include <stdexcept>
#include <string>

namespace raml {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file header or unknown enum value in a file/config.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Payload shorter or longer than the header declares.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Tensor or mask dimensions disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An operation was called outside its domain (empty mask, zero vector, ...).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A pipeline stage found a required input artifact missing.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace raml

#pragma once

#include <stdexcept>
#include <string>

namespace cirguard {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or parameter shapes do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument is outside its valid domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// A persisted file could not be decoded.
class FormatError : public Error {
 public:
  enum class Kind { MalformedHeader, LengthMismatch, UnsupportedVersion, BadMagic, Io };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Operation requires a trained model (populated running statistics).
class UntrainedModelError : public Error {
 public:
  using Error::Error;
};

}  // namespace cirguard

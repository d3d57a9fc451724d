#pragma once

#include <stdexcept>
#include <string>

namespace onda {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes disagree. Carries the offending dimension index (or -1 when
/// the rank itself is wrong).
class ShapeError : public Error {
 public:
  ShapeError(const std::string& what, int dimension)
      : Error(what), dimension_(dimension) {}
  int dimension() const noexcept { return dimension_; }

 private:
  int dimension_;
};

/// A NaN or Inf reached a place where only finite values are allowed.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or incompatible file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace onda

#pragma once

#include <stdexcept>
#include <string>

namespace hdmnet {

// Base for every error this library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible extents, bad axis, wrong rank.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an op, or a zero-norm row used as a divisor.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Inputs that violate an operation's domain (non-binary mask, empty mask...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

}  // namespace hdmnet

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace strega {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor dimensions disagree with what an operation requires.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& what, int axis)
      : Error(what + " (axis " + std::to_string(axis) + ")"), axis_(axis) {}
  explicit ShapeError(const std::string& what) : Error(what), axis_(-1) {}

  /// Offending axis, or -1 when the mismatch is in the rank itself.
  int axis() const noexcept { return axis_; }

 private:
  int axis_;
};

/// Input carries too little information for the operation (constant image,
/// single-element batch statistic, empty mask, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class NonFiniteGradientError : public Error {
 public:
  using Error::Error;
};

/// A file did not match the expected binary layout.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " at byte offset " + std::to_string(offset)), detail_(what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }
  /// Message without the offset suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::size_t offset_;
};

/// User-supplied configuration or arguments are invalid. Maps to CLI exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace strega

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "strega/error.hpp"

namespace strega {

using Dims = std::vector<std::size_t>;

inline std::size_t element_count(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::string dims_to_string(const Dims& dims);

/// Dense row-major grid. Rank 0 is not allowed; every axis has size >= 1.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Dims dims, T fill = T{}) : dims_(std::move(dims)) {
    validate_dims(dims_);
    data_.assign(element_count(dims_), fill);
  }
  Tensor(Dims dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    validate_dims(dims_);
    if (data_.size() != element_count(dims_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + dims_to_string(dims_));
    }
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new dims with equal element count.
  Tensor reshaped(Dims dims) const& {
    Tensor out = *this;
    out.reshape(std::move(dims));
    return out;
  }
  Tensor reshaped(Dims dims) && {
    reshape(std::move(dims));
    return std::move(*this);
  }
  void reshape(Dims dims) {
    validate_dims(dims);
    if (element_count(dims) != data_.size()) {
      throw ShapeError("cannot reshape " + dims_to_string(dims_) + " to " + dims_to_string(dims));
    }
    dims_ = std::move(dims);
  }

  /// Copy of the contiguous block at leading index `i` (slice of a volume, image of a batch).
  Tensor slice(std::size_t i) const {
    if (rank() < 2 || i >= dims_[0]) throw ShapeError("slice index out of range", 0);
    Dims sub(dims_.begin() + 1, dims_.end());
    const std::size_t n = element_count(sub);
    return Tensor(sub, std::vector<T>(data_.begin() + i * n, data_.begin() + (i + 1) * n));
  }
  void set_slice(std::size_t i, const Tensor& part) {
    if (rank() < 2 || i >= dims_[0]) throw ShapeError("slice index out of range", 0);
    Dims sub(dims_.begin() + 1, dims_.end());
    if (part.dims() != sub) throw ShapeError("slice dims " + dims_to_string(part.dims()) +
                                             " do not match " + dims_to_string(sub));
    std::copy(part.data_.begin(), part.data_.end(), data_.begin() + i * part.size());
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(dims_, std::move(out));
  }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static void validate_dims(const Dims& dims) {
    if (dims.empty()) throw ShapeError("rank-0 tensors are not supported");
    for (std::size_t a = 0; a < dims.size(); ++a) {
      if (dims[a] == 0) throw ShapeError("zero-sized dimension", static_cast<int>(a));
    }
  }

  Dims dims_;
  std::vector<T> data_;
};

using ImageTensor = Tensor<float>;
/// Binary anomaly grid, values in {0,1}.
using BinMask = Tensor<std::uint8_t>;
/// Tissue label grid, values in {0..3}.
using SegMask = Tensor<std::uint8_t>;

/// Throws ShapeError naming the first axis on which `a` and `b` differ.
void require_same_dims(const Dims& a, const Dims& b, const std::string& context);

}  // namespace strega

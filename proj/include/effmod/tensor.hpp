#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "effmod/errors.hpp"

namespace effmod {

/// Extents of a dense NCHW tensor.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr std::array<std::size_t, 4> dims() const { return {n, c, h, w}; }
  constexpr std::size_t operator[](std::size_t axis) const {
    return axis == 0 ? n : axis == 1 ? c : axis == 2 ? h : w;
  }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," +
         std::to_string(s.h) + "," + std::to_string(s.w) + ")";
}

inline std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << to_string(s);
}

/// Dense 4-D array in contiguous row-major NCHW order.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    detail::require(data_.size() == shape_.numel(),
                    "tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + to_string(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor ones(Shape shape) { return Tensor(shape, T(1)); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::size_t offset(std::size_t in, std::size_t ic, std::size_t ih, std::size_t iw) const {
    return ((in * shape_.c + ic) * shape_.h + ih) * shape_.w + iw;
  }
  T& at(std::size_t in, std::size_t ic, std::size_t ih, std::size_t iw) {
    return data_[offset(in, ic, ih, iw)];
  }
  const T& at(std::size_t in, std::size_t ic, std::size_t ih, std::size_t iw) const {
    return data_[offset(in, ic, ih, iw)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the (n, c) spatial plane.
  T* plane(std::size_t in, std::size_t ic) { return data_.data() + (in * shape_.c + ic) * shape_.plane(); }
  const T* plane(std::size_t in, std::size_t ic) const {
    return data_.data() + (in * shape_.c + ic) * shape_.plane();
  }

  /// Same data, new extents with equal element count.
  Tensor reshaped(Shape s) const {
    detail::require(s.numel() == size(), "reshape " + to_string(shape_) + " -> " + to_string(s) +
                                             " changes element count");
    return Tensor(s, data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
};

/// Bitwise equality (distinguishes -0.0 from 0.0 and compares NaN payloads).
template <class T>
bool bit_identical(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data(), a.data() + a.size(), b.data(), [](T x, T y) {
    return std::memcmp(&x, &y, sizeof(T)) == 0;
  });
}

template <class T>
T max_abs(const Tensor<T>& t) {
  T m = 0;
  for (T v : t.vec()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace effmod

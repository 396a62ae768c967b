#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "capsfor/errors.hpp"

namespace capsfor {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/**
 * Dense row-major n-dimensional array. Shapes are channel-first ([C,H,W],
 * batched as [B,C,H,W]). A rank-0 tensor holds a single scalar.
 */
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(1, T(0)) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
  static Tensor vector(std::initializer_list<T> v) {
    return Tensor(Shape{v.size()}, std::vector<T>(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape_));
    }
    return shape_[axis];
  }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <class... I>
  T& at(I... idx) { return data_[offset({static_cast<std::size_t>(idx)...})]; }
  template <class... I>
  const T& at(I... idx) const { return data_[offset({static_cast<std::size_t>(idx)...})]; }

  T item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <std::floating_point U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  void require_same_shape(const Tensor& other, std::string_view what) const {
    if (shape_ != other.shape_) {
      throw DimensionError(std::string(what) + ": shape " + shape_str(shape_) + " vs " +
                           shape_str(other.shape_));
    }
  }

 private:
  void check_dims() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0) {
        throw DimensionError("axis " + std::to_string(i) + " has zero extent in shape " +
                             shape_str(shape_));
      }
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw DimensionError("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                           std::to_string(shape_.size()));
    }
    std::size_t off = 0, a = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[a]) throw DimensionError("index out of range on axis " + std::to_string(a));
      off = off * shape_[a++] + i;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Largest absolute elementwise difference; shapes must agree.
template <std::floating_point T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

/// max |a-b| / max(|a|,|b|,floor), the relative error used by gradient checks.
template <std::floating_point T>
double max_rel_error(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-6) {
  a.require_same_shape(b, "max_rel_error");
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    const double den = std::max({std::abs(x), std::abs(y), floor});
    m = std::max(m, std::abs(x - y) / den);
  }
  return m;
}

}  // namespace capsfor

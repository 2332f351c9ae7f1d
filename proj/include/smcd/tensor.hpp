#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "smcd/error.hpp"

namespace smcd {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// 64-byte aligned so Eigen's vectorized reductions split the same way on every
// allocation; otherwise sums differ in the last ulp from run to run.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense row-major tensor. The last dimension is contiguous.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    for (int d : shape_)
      SMCD_REQUIRE(d >= 0, ContractViolation, "negative tensor dimension");
  }
  Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    SMCD_REQUIRE(data_.size() == shape_numel(shape_), ShapeError,
                 "tensor data size does not match shape " + shape_str(shape_));
  }
  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    SMCD_REQUIRE(data_.size() == shape_numel(shape_), ShapeError,
                 "tensor data size does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? i + rank() : i)); }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  Buffer<T>& vec() noexcept { return data_; }
  const Buffer<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::initializer_list<int> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<int> idx) const { return data_[offset(idx)]; }

  /// Same storage interpreted under a new shape of equal element count.
  Tensor reshaped(Shape s) const& {
    SMCD_REQUIRE(shape_numel(s) == size(), ShapeError,
                 "cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }
  Tensor reshaped(Shape s) && {
    SMCD_REQUIRE(shape_numel(s) == size(), ShapeError,
                 "cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), std::move(data_));
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<int> idx) const {
    SMCD_REQUIRE(idx.size() == shape_.size(), ContractViolation, "index rank mismatch");
    std::size_t off = 0;
    std::size_t i = 0;
    for (int v : idx) {
      SMCD_REQUIRE(v >= 0 && v < shape_[i], ContractViolation, "index out of range");
      off = off * static_cast<std::size_t>(shape_[i]) + static_cast<std::size_t>(v);
      ++i;
    }
    return off;
  }

  Shape shape_;
  Buffer<T> data_;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

/// View a tensor as rows x cols where cols is the last dimension.
template <typename T>
MatMap<T> as_matrix(Tensor<T>& t) {
  const int cols = t.rank() ? t.dim(-1) : 1;
  const int rows = cols ? static_cast<int>(t.size() / static_cast<std::size_t>(cols)) : 0;
  return MatMap<T>(t.data(), rows, cols);
}
template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t) {
  const int cols = t.rank() ? t.dim(-1) : 1;
  const int rows = cols ? static_cast<int>(t.size() / static_cast<std::size_t>(cols)) : 0;
  return ConstMatMap<T>(t.data(), rows, cols);
}

template <typename T>
T sum(const Tensor<T>& t) {
  T s = 0;
  for (T v : t.vec()) s += v;
  return s;
}

template <typename T>
T max_abs(const Tensor<T>& t) {
  T m = 0;
  for (T v : t.vec()) m = std::max(m, v < 0 ? -v : v);
  return m;
}

}  // namespace smcd

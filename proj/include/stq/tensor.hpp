#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stq/error.hpp"

// Hot loops get an AVX2 clone picked at load time. Contraction stays off, so
// both clones produce identical results.
#if defined(__GNUC__) && defined(__x86_64__) && !defined(__clang__)
#define STQ_HOT __attribute__((target_clones("avx2", "default")))
#else
#define STQ_HOT
#endif

namespace stq {

// Working precision of the engine. Everything numeric flows through this
// alias; switching it to float gives the 32-bit mode.
using Real = double;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline void check_extents(const Shape& shape) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
}

}  // namespace detail

// Dense row-major array of Real. A default-constructed tensor is empty (no
// shape, no storage); everything else has positive extents.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    detail::check_extents(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    detail::check_extents(shape_);
    if (data_.size() != shape_numel(shape_))
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static BasicTensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data) {
    return BasicTensor({rows, cols}, std::move(data));
  }

  static BasicTensor scalar(T v) { return BasicTensor({1}, std::vector<T>{v}); }

  bool empty() const noexcept { return data_.empty(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors; callers are responsible for rank.
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  BasicTensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return BasicTensor(std::move(shape), data_);
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<Real>;

// Holds quantized integers of any bit-width up to 8. Accumulations over
// these values are done in 64-bit.
using IntTensor = BasicTensor<std::int32_t>;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_rank(const Tensor& a, std::size_t r, const char* op) {
  if (a.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(a.shape()));
}

inline Real max_abs(std::span<const Real> v) {
  Real m = 0;
  for (auto x : v) m = std::max(m, x < 0 ? -x : x);
  return m;
}

inline Real max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  Real m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    Real d = a[i] - b[i];
    m = std::max(m, d < 0 ? -d : d);
  }
  return m;
}

inline Real frobenius_norm(const Tensor& a) {
  Real s = 0;
  for (auto x : a.data()) s += x * x;
  return std::sqrt(s);
}

inline Real mean_squared_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mean_squared_diff");
  Real s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    Real d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<Real>(a.numel());
}

}  // namespace stq

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <type_traits>
#include <vector>

#include "moc/errors.hpp"

namespace moc {

/// Accumulator type used for reductions: one step wider than storage.
template <typename T>
using accum_t = std::conditional_t<std::is_same_v<T, float>, double, long double>;

/// Dense row-major [heads, length, dim] array. Rows are head-major so that a
/// head's tokens are contiguous.
template <typename T>
class Tensor3 {
 public:
  using value_type = T;

  Tensor3() = default;
  Tensor3(std::size_t heads, std::size_t length, std::size_t dim, T fill = T{})
      : heads_(heads), length_(length), dim_(dim), data_(heads * length * dim, fill) {}

  std::size_t heads() const noexcept { return heads_; }
  std::size_t length() const noexcept { return length_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> row(std::size_t h, std::size_t i) noexcept {
    return {data_.data() + (h * length_ + i) * dim_, dim_};
  }
  std::span<const T> row(std::size_t h, std::size_t i) const noexcept {
    return {data_.data() + (h * length_ + i) * dim_, dim_};
  }

  T& operator()(std::size_t h, std::size_t i, std::size_t c) noexcept {
    return data_[(h * length_ + i) * dim_ + c];
  }
  const T& operator()(std::size_t h, std::size_t i, std::size_t c) const noexcept {
    return data_[(h * length_ + i) * dim_ + c];
  }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }

  bool same_shape(const Tensor3& other) const noexcept {
    return heads_ == other.heads_ && length_ == other.length_ && dim_ == other.dim_;
  }

  bool all_finite() const noexcept {
    for (const T& v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  Tensor3<U> cast() const {
    Tensor3<U> out(heads_, length_, dim_);
    for (std::size_t n = 0; n < data_.size(); ++n) out.flat()[n] = static_cast<U>(data_[n]);
    return out;
  }

  friend bool operator==(const Tensor3& a, const Tensor3& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t heads_ = 0;
  std::size_t length_ = 0;
  std::size_t dim_ = 0;
  std::vector<T> data_;
};

template <typename A, typename B>
auto dot(std::span<const A> a, std::span<const B> b) {
  using Acc = accum_t<std::common_type_t<A, B>>;
  Acc acc = 0;
  for (std::size_t c = 0; c < a.size(); ++c) acc += static_cast<Acc>(a[c]) * static_cast<Acc>(b[c]);
  return acc;
}

/// Norm-wise relative error: max |a - b| over max |b|, floored at `floor`.
template <typename A, typename B>
double max_relative_error(std::span<const A> a, std::span<const B> b, double floor = 1e-30) {
  require(a.size() == b.size(), ErrorCode::ShapeMismatch, "relative error over unequal sizes");
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    diff = std::max(diff, std::abs(static_cast<double>(a[n]) - static_cast<double>(b[n])));
    scale = std::max(scale, std::abs(static_cast<double>(b[n])));
  }
  return diff / std::max(scale, floor);
}

template <typename A, typename B>
double max_relative_error(const Tensor3<A>& a, const Tensor3<B>& b, double floor = 1e-30) {
  require(a.heads() == b.heads() && a.length() == b.length() && a.dim() == b.dim(),
          ErrorCode::ShapeMismatch, "tensor shapes differ");
  return max_relative_error(a.flat(), b.flat(), floor);
}

}  // namespace moc

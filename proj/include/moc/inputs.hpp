#pragma once

#include <cstddef>
#include <string>

#include "moc/errors.hpp"
#include "moc/tensor.hpp"

namespace moc {

/// Per-head query/key/value features, each [H, L, d].
template <typename T>
struct AttentionInputs {
  Tensor3<T> q;
  Tensor3<T> k;
  Tensor3<T> v;

  AttentionInputs() = default;
  AttentionInputs(std::size_t heads, std::size_t length, std::size_t dim)
      : q(heads, length, dim), k(heads, length, dim), v(heads, length, dim) {}
  AttentionInputs(Tensor3<T> q_, Tensor3<T> k_, Tensor3<T> v_)
      : q(std::move(q_)), k(std::move(k_)), v(std::move(v_)) {}

  std::size_t heads() const noexcept { return q.heads(); }
  std::size_t length() const noexcept { return q.length(); }
  std::size_t dim() const noexcept { return q.dim(); }

  void validate() const {
    require(q.same_shape(k) && q.same_shape(v), ErrorCode::ShapeMismatch, "Q, K and V shapes differ");
    require(heads() >= 1 && length() >= 1 && dim() >= 1, ErrorCode::ShapeMismatch,
            "attention inputs need H, L, d >= 1");
    require(q.all_finite() && k.all_finite() && v.all_finite(), ErrorCode::NonFiniteInput,
            "attention inputs contain non-finite values");
  }

  template <typename U>
  AttentionInputs<U> cast() const {
    return {q.template cast<U>(), k.template cast<U>(), v.template cast<U>()};
  }
};

}  // namespace moc

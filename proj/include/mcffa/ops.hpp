#pragma once

#include <cstddef>
#include <type_traits>
#include <vector>

#include "mcffa/tensor.hpp"

namespace mcffa {

enum class ElementwiseKind { kAdd, kSub, kMul, kDiv };

// Right-aligned broadcast: extents are compared from the last axis, and an
// extent of 1 (or a missing leading axis) stretches to match.
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
BasicTensor<T> elementwise(ElementwiseKind kind, const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> elementwise(ElementwiseKind kind, const BasicTensor<T>& a, std::type_identity_t<T> b) {
  return elementwise(kind, a, BasicTensor<T>::scalar(b));
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseKind::kAdd, a, b);
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseKind::kSub, a, b);
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseKind::kMul, a, b);
}
template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(ElementwiseKind::kDiv, a, b);
}

template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }
template <typename T>
BasicTensor<T> operator/(const BasicTensor<T>& a, const BasicTensor<T>& b) { return div(a, b); }
template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, std::type_identity_t<T> b) {
  return elementwise(ElementwiseKind::kAdd, a, b);
}
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, std::type_identity_t<T> b) {
  return elementwise(ElementwiseKind::kSub, a, b);
}
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, std::type_identity_t<T> b) {
  return elementwise(ElementwiseKind::kMul, a, b);
}
template <typename T>
BasicTensor<T> operator/(const BasicTensor<T>& a, std::type_identity_t<T> b) {
  return elementwise(ElementwiseKind::kDiv, a, b);
}

// [M,K] x [K,N] -> [M,N].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Full reductions to a scalar tensor (accumulated in double).
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape);
// Flattens everything after the first axis: [N, ...] -> [N, prod(...)].
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x);

// Concatenation along `axis`; all other extents must agree.
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);
// Row-wise softmax over a rank-2 tensor, max-subtracted.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x);

// Identity forward whose backward multiplies the incoming gradient by
// `factor`. Used as a fault-injection fixture for the gradient checker.
template <typename T>
BasicTensor<T> scale_gradient(const BasicTensor<T>& x, std::type_identity_t<T> factor);

// Numerically stable logistic function shared by the sigmoid op.
template <typename T>
T stable_sigmoid(T x);

}  // namespace mcffa

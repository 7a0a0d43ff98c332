#pragma once

#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "mcffa/gradcheck.hpp"
#include "mcffa/ops.hpp"
#include "mcffa/tensor.hpp"

namespace mcffa::testing {

template <typename T = float>
BasicTensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                             bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return BasicTensor<T>::from(shape, std::move(v), requires_grad);
}

// Values bounded away from zero: |x| in [margin, hi].
template <typename T = float>
BasicTensor<T> random_away_from_zero(const Shape& shape, std::mt19937_64& rng, double margin, double hi = 1.0) {
  std::uniform_real_distribution<double> mag(margin, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(sign(rng) ? mag(rng) : -mag(rng));
  return BasicTensor<T>::from(shape, std::move(v));
}

// sum(y * r) with fixed random r: a scalar objective whose gradient
// exercises every output element with O(1) weights.
template <typename T>
BasicTensor<T> projection(const BasicTensor<T>& y, const BasicTensor<T>& r) {
  return sum(mul(y, r));
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

// Runs `build` (a generic callable taking the input list) once over the
// float inputs and once over double copies, and checks the float gradient of
// inputs[wrt] against the double central difference.
template <typename Build>
GradCheckResult mixed_check(Build build, const std::vector<Tensor>& inputs, std::size_t wrt, double h = 1e-6,
                            const GradCheckOptions& options = {}) {
  std::vector<TensorD> mirrors;
  for (const auto& t : inputs) mirrors.push_back(tensor_cast<double>(t));
  ScalarFunction<float> f = [&] { return build(inputs); };
  ScalarFunction<double> g = [&] { return build(mirrors); };
  return mixed_precision_check(f, inputs[wrt], g, mirrors[wrt], h, options);
}

}  // namespace mcffa::testing

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "mcffa/errors.hpp"
#include "mcffa/tensor.hpp"

namespace mcffa {

struct GradCheckOptions {
  // Elements whose analytic and numeric values are both below this are
  // effectively compared absolutely.
  double epsilon = 1e-8;
  // When positive, the denominator is also at least this fraction of the
  // largest |numeric| among the checked elements, so entries far below the
  // tensor's gradient scale are judged by that scale rather than their own.
  double scale_floor = 0;
  // 0 checks every element; otherwise a deterministic sample of this many.
  std::size_t max_elements = 0;
  std::uint64_t sample_seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0;
  double numeric_at_worst = 0;
  std::size_t checked = 0;
};

template <typename T>
using ScalarFunction = std::function<BasicTensor<T>()>;

namespace detail {

inline std::vector<std::size_t> check_indices(std::size_t n, const GradCheckOptions& options) {
  std::vector<std::size_t> indices(n);
  std::iota(indices.begin(), indices.end(), std::size_t{0});
  if (options.max_elements != 0 && options.max_elements < n) {
    std::mt19937_64 rng(options.sample_seed);
    std::shuffle(indices.begin(), indices.end(), rng);
    indices.resize(options.max_elements);
    std::sort(indices.begin(), indices.end());
  }
  return indices;
}

template <typename T>
std::vector<T> analytic_gradient(const ScalarFunction<T>& loss, BasicTensor<T> x) {
  const bool was_tracking = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  loss().backward();
  std::vector<T> g = x.grad();
  x.set_requires_grad(was_tracking);
  x.zero_grad();
  return g;
}

// Central difference of `loss` along element i of x, dividing by the step
// actually representable in T.
template <typename T>
double central_difference(const ScalarFunction<T>& loss, BasicTensor<T>& x, std::size_t i, double h) {
  auto values = x.mutable_data();
  const T original = values[i];
  const T up = static_cast<T>(original + h);
  const T down = static_cast<T>(original - h);
  values[i] = up;
  const double plus = loss().item();
  values[i] = down;
  const double minus = loss().item();
  values[i] = original;
  return (plus - minus) / (static_cast<double>(up) - static_cast<double>(down));
}

inline void record(GradCheckResult& result, std::size_t i, double analytic, double numeric, double epsilon) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), epsilon});
  const double err = std::abs(analytic - numeric) / denom;
  ++result.checked;
  if (result.checked == 1 || err > result.max_relative_error) {
    result.max_relative_error = err;
    result.worst_index = i;
    result.analytic_at_worst = analytic;
    result.numeric_at_worst = numeric;
  }
}

inline GradCheckResult compare(const std::vector<std::size_t>& indices, const std::vector<double>& analytic,
                               const std::vector<double>& numeric, const GradCheckOptions& options) {
  double scale = 0;
  for (double n : numeric) scale = std::max(scale, std::abs(n));
  const double floor = std::max(options.epsilon, options.scale_floor * scale);
  GradCheckResult result;
  for (std::size_t j = 0; j < indices.size(); ++j) record(result, indices[j], analytic[j], numeric[j], floor);
  return result;
}

}  // namespace detail

// Compares the reverse-mode gradient of `loss` with respect to `x` against a
// central difference of step `h`. `loss` (any callable returning a scalar
// BasicTensor<T>) must rebuild its graph from x's current values on every
// call. Returns
//   max_i |analytic_i - fd_i| / max(|analytic_i|, |fd_i|, epsilon).
template <typename F, typename T>
GradCheckResult finite_diff_check(F&& loss_fn, BasicTensor<T> x, double h, const GradCheckOptions& options = {}) {
  if (!(h > 0)) throw ConfigError("finite-difference step must be positive");
  const ScalarFunction<T> loss(std::forward<F>(loss_fn));
  const std::vector<T> analytic = detail::analytic_gradient(loss, x);
  NoGradGuard no_grad;
  const auto indices = detail::check_indices(x.numel(), options);
  std::vector<double> a, n;
  for (std::size_t i : indices) {
    a.push_back(analytic[i]);
    n.push_back(detail::central_difference(loss, x, i, h));
  }
  return detail::compare(indices, a, n, options);
}

// Checks the float backward rules against a central difference evaluated on
// a double-precision mirror of the same computation. `x` and `x_mirror` must
// hold the same values, and `mirror` must compute what `loss` computes.
GradCheckResult mixed_precision_check(const ScalarFunction<float>& loss, Tensor x,
                                      const ScalarFunction<double>& mirror, TensorD x_mirror, double h,
                                      const GradCheckOptions& options = {});

}  // namespace mcffa

#include "mcffa/gradcheck.hpp"

namespace mcffa {

GradCheckResult mixed_precision_check(const ScalarFunction<float>& loss, Tensor x,
                                      const ScalarFunction<double>& mirror, TensorD x_mirror, double h,
                                      const GradCheckOptions& options) {
  if (!(h > 0)) throw ConfigError("finite-difference step must be positive");
  if (x.shape() != x_mirror.shape()) throw ShapeError("mirror tensor shape differs from checked tensor");
  const std::vector<float> analytic = detail::analytic_gradient(loss, x);
  NoGradGuard no_grad;
  const auto indices = detail::check_indices(x.numel(), options);
  std::vector<double> a, n;
  for (std::size_t i : indices) {
    a.push_back(analytic[i]);
    n.push_back(detail::central_difference(mirror, x_mirror, i, h));
  }
  return detail::compare(indices, a, n, options);
}

}  // namespace mcffa

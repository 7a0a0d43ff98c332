#include <cstring>
#include <random>

#include "doctest.h"
#include "mcffa/errors.hpp"
#include "mcffa/gradcheck.hpp"
#include "mcffa/nn.hpp"
#include "mcffa/ops.hpp"
#include "test_util.hpp"

using namespace mcffa;
using mcffa::testing::projection;
using mcffa::testing::random_tensor;

namespace {

Conv2dParams fixed_conv(std::size_t in, std::size_t out, std::size_t k, float w, float b, std::size_t d = 1,
                        std::size_t s = 1) {
  Conv2dParams p;
  p.weight = Tensor::full({out, in, k, k}, w);
  p.bias = Tensor::full({out}, b);
  p.dilation = d;
  p.stride = s;
  return p;
}

Conv2dParams random_conv(std::size_t in, std::size_t out, std::size_t k, std::mt19937_64& rng, std::size_t d = 1,
                         std::size_t s = 1, std::size_t groups = 1) {
  Conv2dParams p;
  p.weight = random_tensor({out, in / groups, k, k}, rng);
  p.bias = random_tensor({out}, rng);
  p.dilation = d;
  p.stride = s;
  p.groups = groups;
  return p;
}

}  // namespace

TEST_CASE("conv2d counts in-bounds taps") {
  Tensor x = Tensor::full({1, 1, 5, 5}, 1);
  Tensor y = conv2d(x, fixed_conv(1, 1, 3, 1, 0));
  CHECK(y.shape() == Shape{1, 1, 5, 5});
  CHECK(y.at({0, 0, 2, 2}) == 9);
  CHECK(y.at({0, 0, 0, 0}) == 4);

  // Dilation 2 with SAME padding 2: taps on a stride-2 grid.
  Tensor yd = conv2d(x, fixed_conv(1, 1, 3, 1, 0, 2));
  Tensor ref = conv2d_reference(x, fixed_conv(1, 1, 3, 1, 0, 2));
  CHECK(yd.at({0, 0, 2, 2}) == 9);
  CHECK(yd.at({0, 0, 0, 0}) == 4);
  CHECK(std::memcmp(yd.data().data(), ref.data().data(), yd.numel() * sizeof(float)) == 0);

  Tensor yb = conv2d(x, fixed_conv(1, 2, 3, 0, 0.5));
  for (float v : yb.data()) CHECK(v == float(0.5));
}

TEST_CASE("conv2d errors") {
  Tensor x = Tensor::zeros({1, 2, 5, 5});
  CHECK_THROWS_AS(conv2d(x, fixed_conv(3, 1, 3, 1, 0)), ShapeError);
  Conv2dParams p = fixed_conv(2, 1, 5, 1, 0);
  p.padding = Padding::zeros(0);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 3, 3}), p), ShapeError);
  CHECK(conv_output_extent(5, 3, 1, 1, 0) == 3);
  CHECK(conv_output_extent(32, 3, 2, 1, 1) == 16);
}

TEST_CASE("conv2d gradients match finite differences (k=3, d=3)") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = random_tensor({1, 2, 6, 6}, rng);
    Conv2dParams p = random_conv(2, 2, 3, rng, 3);
    Tensor r = random_tensor({1, 2, 6, 6}, rng);
    auto f = [&] { return projection(conv2d(x, p), r); };
    CHECK(finite_diff_check(f, x, 0.5).max_relative_error < 1e-3);
    CHECK(finite_diff_check(f, p.weight, 0.5).max_relative_error < 1e-3);
    CHECK(finite_diff_check(f, p.bias, 0.5).max_relative_error < 1e-3);
  }
}

TEST_CASE("property: conv2d equals the nested-loop reference") {
  std::mt19937_64 rng(42);
  int cases = 0;
  for (std::size_t k : {1, 3, 5, 7, 9})
    for (std::size_t d : {1, 2, 4, 11, 12})
      for (std::size_t s : {1, 2}) {
        std::uniform_int_distribution<std::size_t> hw(1, 14);
        Tensor x = random_tensor({2, 3, hw(rng), hw(rng)}, rng);
        Conv2dParams p = random_conv(3, 2, k, rng, d, s);
        Tensor a = conv2d(x, p), b = conv2d_reference(x, p);
        REQUIRE(a.shape() == b.shape());
        CHECK(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0);
        ++cases;
      }
  CHECK(cases == 50);
}

TEST_CASE("SAME padding at stride 1 preserves extents for every MSDRC kernel/dilation") {
  std::mt19937_64 rng(1);
  const std::size_t pairs[][2] = {{3, 3}, {3, 6}, {5, 5}, {5, 8}, {7, 7}, {7, 10}, {9, 9}, {9, 12}};
  for (auto [k, d] : pairs) {
    Tensor x = random_tensor({1, 1, 7, 11}, rng);
    Tensor y = conv2d(x, random_conv(1, 1, k, rng, d));
    CHECK(y.shape() == x.shape());
  }
}

TEST_CASE("separable conv with identity kernels is the identity") {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({1, 3, 5, 5}, rng);
  Conv2dParams dw;
  dw.weight = Tensor::zeros({3, 1, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) dw.weight.mutable_data()[c * 9 + 4] = 1;
  dw.groups = 3;
  Conv2dParams pw;
  pw.weight = Tensor::zeros({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) pw.weight.mutable_data()[c * 3 + c] = 1;
  Tensor y = separable_conv2d(x, dw, pw);
  CHECK(std::memcmp(x.data().data(), y.data().data(), x.numel() * sizeof(float)) == 0);
}

TEST_CASE("separable conv equals composition of grouped and dense 1x1 convs") {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({2, 4, 7, 7}, rng);
  Conv2dParams dw = random_conv(4, 4, 3, rng, 2, 1, 4);
  Conv2dParams pw = random_conv(4, 5, 1, rng);
  Tensor y = separable_conv2d(x, dw, pw);
  // Oracle: a dense conv whose weight is block-diagonal over channels.
  Conv2dParams dense_dw;
  dense_dw.weight = Tensor::zeros({4, 4, 3, 3});
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < 9; ++t) dense_dw.weight.mutable_data()[(c * 4 + c) * 9 + t] = dw.weight.data()[c * 9 + t];
  dense_dw.bias = dw.bias;
  dense_dw.dilation = 2;
  Tensor ref = conv2d_reference(conv2d_reference(x, dense_dw), pw);
  CHECK(mcffa::testing::max_abs_diff(y.data(), ref.data()) < 1e-5);
}

TEST_CASE("separable conv box filter sums channels") {
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  Conv2dParams dw;
  dw.weight = Tensor::full({2, 1, 3, 3}, 1);
  dw.groups = 2;
  Conv2dParams pw;
  pw.weight = Tensor::full({1, 2, 1, 1}, 1);
  Tensor y = separable_conv2d(x, dw, pw);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0;
      for (int c = 0; c < 2; ++c)
        for (int u = -1; u <= 1; ++u)
          for (int v = -1; v <= 1; ++v) {
            int r = i + u, q = j + v;
            if (r >= 0 && r < 4 && q >= 0 && q < 4) acc += x.at({0, std::size_t(c), std::size_t(r), std::size_t(q)});
          }
      CHECK(y.at({0, 0, std::size_t(i), std::size_t(j)}) == doctest::Approx(acc).epsilon(1e-5));
    }
}

TEST_CASE("separable conv validates stage shapes") {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  Conv2dParams dense = random_conv(2, 2, 3, rng);
  Conv2dParams pw = random_conv(2, 2, 1, rng);
  CHECK_THROWS_AS(separable_conv2d(x, dense, pw), ShapeError);
}

TEST_CASE("activation examples") {
  Tensor s = softmax(Tensor::zeros({1, 4}));
  for (float v : s.data()) CHECK(v == doctest::Approx(0.25));
  CHECK(sigmoid(Tensor::scalar(0)).item() == float(0.5));
  Tensor r = relu(Tensor::from({2}, {-1, 2}));
  CHECK(r.data()[0] == 0);
  CHECK(r.data()[1] == 2);
  Tensor big = softmax(Tensor::from({1, 2}, {1000, 0}));
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(big.data()[1]));
  CHECK(stable_sigmoid<float>(-1000) == 0);
  CHECK(stable_sigmoid<float>(1000) == 1);
  CHECK_THROWS_AS(softmax(Tensor::zeros({4})), ShapeError);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> q(-512, 512);
  for (int trial = 0; trial < 50; ++trial) {
    // Dyadic values so that x + c is exact in float.
    std::vector<float> v(12);
    for (auto& x : v) x = static_cast<float>(q(rng)) / 128;
    Tensor x = Tensor::from({3, 4}, v);
    Tensor y = softmax(x);
    for (int r = 0; r < 3; ++r) {
      double total = 0;
      for (int c = 0; c < 4; ++c) total += y.data()[r * 4 + c];
      CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
    }
    Tensor shifted = softmax(x + float(trial - 25));
    CHECK(std::memcmp(y.data().data(), shifted.data().data(), y.numel() * sizeof(float)) == 0);
  }
}

TEST_CASE("dense examples and gradients") {
  Tensor x = Tensor::from({1, 2}, {1, 2});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor y = dense(x, eye, Tensor::zeros({2}));
  CHECK(y.data()[0] == 1);
  CHECK(y.data()[1] == 2);
  Tensor y2 = dense(x, eye, Tensor::from({2}, {10, 10}));
  CHECK(y2.data()[0] == 11);
  CHECK(y2.data()[1] == 12);
  CHECK_THROWS_AS(dense(x, Tensor::zeros({3, 2}), Tensor::zeros({2})), ShapeError);

  std::mt19937_64 rng(10);
  Tensor xi = random_tensor({3, 4}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({5}, rng);
  Tensor r = random_tensor({3, 5}, rng);
  auto f = [&] { return projection(dense(xi, w, b), r); };
  CHECK(finite_diff_check(f, xi, 0.5).max_relative_error < 1e-3);
  CHECK(finite_diff_check(f, w, 0.5).max_relative_error < 1e-3);
  CHECK(finite_diff_check(f, b, 0.5).max_relative_error < 1e-3);
}

TEST_CASE("global average pooling") {
  Tensor c = Tensor::full({1, 1, 3, 4}, 2.5);
  CHECK(global_avg_pool(c).item() == float(2.5));
  Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}, true);
  Tensor z = global_avg_pool(x);
  CHECK(z.item() == float(2.5));
  z.backward();
  for (float g : x.grad()) CHECK(g == float(0.25));
  std::mt19937_64 rng(3);
  Tensor xr = random_tensor({2, 3, 4, 5}, rng), r = random_tensor({2, 3}, rng);
  CHECK(finite_diff_check([&] { return projection(global_avg_pool(xr), r); }, xr, 0.5).max_relative_error < 1e-3);
}

TEST_CASE("batchnorm train mode standardises per channel") {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({4, 3, 5, 5}, rng, -2, 5);
  BatchNormState st = BatchNormState::create(3);
  Tensor y = batchnorm(x, st, Mode::kTrain);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    const std::size_t count = 4 * 25;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) m += y.data()[(n * 3 + c) * 25 + i];
    m /= count;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 25; ++i) {
        double d = y.data()[(n * 3 + c) * 25 + i] - m;
        v += d * d;
      }
    v /= count;
    CHECK(std::abs(m) < 1e-4);
    // eps = 1e-5 shrinks the variance slightly below 1.
    CHECK(std::abs(v - 1.0) < 1e-4 + 1e-5 * 10);
  }
}

TEST_CASE("batchnorm running statistics and infer mode") {
  Tensor x = Tensor::from({2, 1, 1, 2}, {1, 2, 3, 6});  // mean 3, var 3.5
  BatchNormState st = BatchNormState::create(1);
  batchnorm(x, st, Mode::kTrain);
  CHECK(st.running_mean.data()[0] == doctest::Approx(0.9 * 0 + 0.1 * 3.0));
  CHECK(st.running_var.data()[0] == doctest::Approx(0.9 * 1 + 0.1 * 3.5));

  // Infer before any training uses mean 0, var 1.
  BatchNormState fresh = BatchNormState::create(1);
  Tensor y = batchnorm(x, fresh, Mode::kInfer);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i] / std::sqrt(1 + 1e-5)));
  CHECK_THROWS_AS(batchnorm(Tensor::zeros({1, 2, 2, 2}), fresh, Mode::kInfer), ShapeError);
}

TEST_CASE("batchnorm on standardised input is near identity") {
  Tensor x = Tensor::from({4, 1, 1, 1}, {-1, -1, 1, 1});
  BatchNormState st = BatchNormState::create(1);
  Tensor y = batchnorm(x, st, Mode::kTrain);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-4));
}

TEST_CASE("batchnorm gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed + 100);
    std::vector<Tensor> in{random_tensor({3, 2, 3, 3}, rng, -1, 2), random_tensor({2}, rng, 0.5, 1.5),
                           random_tensor({2}, rng, -0.5, 0.5), random_tensor({3, 2, 3, 3}, rng),
                           random_tensor({2}, rng, -0.2, 0.2), random_tensor({2}, rng, 0.5, 2.0)};
    for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
      auto build = [mode](const auto& v) {
        using T = typename std::decay_t<decltype(v[0])>::value_type;
        BasicBatchNormState<T> st = BasicBatchNormState<T>::create(2);
        st.gamma = v[1];
        st.beta = v[2];
        st.running_mean = v[4].clone();
        st.running_var = v[5].clone();
        return projection(batchnorm(v[0], st, mode), v[3]);
      };
      INFO("seed " << seed << " train " << (mode == Mode::kTrain));
      for (std::size_t wrt = 0; wrt < 3; ++wrt) CHECK(mcffa::testing::mixed_check(build, in, wrt).max_relative_error < 1e-3);
    }
  }
}

TEST_CASE("64-bit mode: batchnorm and conv gradients agree to 1e-6") {
  std::mt19937_64 rng(5);
  TensorD x = random_tensor<double>({2, 2, 5, 5}, rng);
  auto conv = make_conv<double>(2, 3, 3, rng, 1, 2);
  BasicBatchNormState<double> st = BasicBatchNormState<double>::create(3);
  TensorD r = random_tensor<double>({2, 3, 5, 5}, rng);
  auto g = [&] { return projection(batchnorm(conv2d(x, conv), st, Mode::kTrain), r); };
  CHECK(finite_diff_check(g, x, 1e-5).max_relative_error < 1e-6);
  CHECK(finite_diff_check(g, conv.weight, 1e-5).max_relative_error < 1e-6);
  CHECK(finite_diff_check(g, st.gamma, 1e-5).max_relative_error < 1e-6);
}

TEST_CASE("dropout contracts") {
  std::mt19937_64 rng(99);
  Tensor x = random_tensor({3, 4}, rng);
  Rng drng(1);
  CHECK(dropout(x, 0.0, Mode::kTrain, drng).data().data() == x.data().data());
  CHECK(dropout(x, 0.7, Mode::kInfer, drng).data().data() == x.data().data());
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::kTrain, drng), ConfigError);
  CHECK_THROWS_AS(dropout(x, -0.1, Mode::kTrain, drng), ConfigError);

  Tensor ones = Tensor::full({100000}, 1);
  Tensor y = dropout(ones, 0.4, Mode::kTrain, drng);
  std::size_t survivors = 0;
  double total = 0;
  for (float v : y.data()) {
    survivors += v != 0;
    total += v;
  }
  CHECK(std::abs(survivors / 1e5 - 0.6) < 0.01);
  CHECK(std::abs(total / 1e5 - 1.0) < 0.02);
}

TEST_CASE("dropout backward uses the same mask") {
  Tensor x = Tensor::full({1000}, 1, true);
  Rng drng(5);
  Tensor y = dropout(x, 0.5, Mode::kTrain, drng);
  sum(y).backward();
  auto g = x.grad();
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == y.data()[i]);
}

TEST_CASE("he uniform init respects the fan-in bound") {
  Rng rng(3);
  Conv2dParams p = make_conv(4, 8, 3, rng);
  const double bound = std::sqrt(6.0 / 36);
  for (float v : p.weight.data()) CHECK(std::abs(v) <= bound);
  for (float v : p.bias.data()) CHECK(v == 0);
}

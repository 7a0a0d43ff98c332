#include <cstring>
#include <random>

#include "doctest.h"
#include "mcffa/errors.hpp"
#include "mcffa/gradcheck.hpp"
#include "mcffa/ops.hpp"
#include "test_util.hpp"

using namespace mcffa;
using mcffa::testing::random_tensor;

TEST_CASE("elementwise add and identity multiply") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({2}, {3, 4});
  Tensor c = add(a, b);
  CHECK(c.data()[0] == 4);
  CHECK(c.data()[1] == 6);

  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor y = x * float(1.0);
  CHECK(std::memcmp(x.data().data(), y.data().data(), x.numel() * sizeof(float)) == 0);
}

TEST_CASE("broadcast errors name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4]") != std::string::npos);
  }
}

// Explicitly materialise both operands at the broadcast shape, then apply
// the operation element by element.
static std::vector<float> materialize(const Tensor& t, const Shape& out) {
  std::vector<float> v(numel(out));
  const Shape& s = t.shape();
  std::vector<std::size_t> idx(out.size());
  for (std::size_t flat = 0; flat < v.size(); ++flat) {
    std::size_t rem = flat;
    for (std::size_t ax = out.size(); ax-- > 0;) {
      idx[ax] = rem % out[ax];
      rem /= out[ax];
    }
    std::size_t src = 0;
    for (std::size_t k = 0; k < s.size(); ++k) {
      std::size_t ax = out.size() - s.size() + k;
      src = src * s[k] + (s[k] == 1 ? 0 : idx[ax]);
    }
    v[flat] = t.data()[src];
  }
  return v;
}

TEST_CASE("broadcast add/mul agree with explicit materialization oracle") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> rank_d(0, 4), ext(1, 3), coin(0, 1);
  int checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    Shape out(rank_d(rng));
    for (auto& e : out) e = ext(rng);
    auto shrink = [&](Shape s) {
      // Drop some leading axes and set some extents to 1.
      std::size_t drop = s.empty() ? 0 : std::uniform_int_distribution<std::size_t>(0, s.size())(rng);
      s.erase(s.begin(), s.begin() + drop);
      for (auto& e : s)
        if (coin(rng)) e = 1;
      return s;
    };
    Shape sa = shrink(out), sb = shrink(out);
    Shape bs;
    try {
      bs = broadcast_shape(sa, sb);
    } catch (const ShapeError&) {
      continue;
    }
    Tensor a = random_tensor(sa, rng), b = random_tensor(sb, rng);
    auto ma = materialize(a, bs), mb = materialize(b, bs);
    Tensor s = add(a, b), p = mul(a, b);
    REQUIRE(s.shape() == bs);
    for (std::size_t i = 0; i < ma.size(); ++i) {
      CHECK(s.data()[i] == ma[i] + mb[i]);
      CHECK(p.data()[i] == ma[i] * mb[i]);
    }
    ++checked;
  }
  CHECK(checked > 100);
}

TEST_CASE("add backward is ones and matches finite differences") {
  std::mt19937_64 rng(5);
  Tensor a = random_tensor({3, 2}, rng);
  Tensor b = random_tensor({3, 2}, rng);
  auto res = finite_diff_check([&] { return sum(add(a, b)); }, a, 1e-3);
  CHECK(res.max_relative_error < 1e-3);
  a.set_requires_grad(true);
  a.zero_grad();
  sum(add(a, b)).backward();
  for (float g : a.grad()) CHECK(g == 1);
}

TEST_CASE("matmul examples") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(eye, m);
  CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{1, 2, 3, 4});
  Tensor row = Tensor::from({1, 2}, {1, 2});
  Tensor col = Tensor::from({2, 1}, {3, 4});
  CHECK(matmul(row, col).item() == 11);
  CHECK_THROWS_AS(matmul(row, row), ShapeError);
}

TEST_CASE("matmul gradient matches finite differences") {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  CHECK(finite_diff_check([&] { return sum(matmul(a, b)); }, a, 0.5).max_relative_error < 1e-3);
  CHECK(finite_diff_check([&] { return sum(matmul(a, b)); }, b, 0.5).max_relative_error < 1e-3);
}

TEST_CASE("backward examples and errors") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  sum(x).backward();
  CHECK(x.grad() == std::vector<float>{1, 1, 1});
  x.zero_grad();
  sum(mul(x, x)).backward();
  CHECK(x.grad() == std::vector<float>{2, 4, 6});

  CHECK_THROWS_AS(mul(x, x).backward(), ShapeError);  // non-scalar
  Tensor leaf = Tensor::scalar(1, true);
  CHECK_THROWS_AS(leaf.backward(), ShapeError);  // empty tape
}

TEST_CASE("gradients accumulate across uses and across backward calls") {
  Tensor x = Tensor::from({2}, {1, -2}, true);
  // Shared use inside one graph.
  sum(add(x, x)).backward();
  CHECK(x.grad() == std::vector<float>{2, 2});
  // Linearity: separate backward passes add up like one pass on the sum.
  Tensor y = Tensor::from({2}, {0.5, 3}, true);
  std::mt19937_64 rng(1);
  Tensor r = random_tensor({2}, rng);
  auto l1 = [&] { return sum(mul(mul(y, y), r)); };
  auto l2 = [&] { return sum(sigmoid(y)); };
  y.zero_grad();
  l1().backward();
  l2().backward();
  auto separate = y.grad();
  y.zero_grad();
  add(l1(), l2()).backward();
  auto joint = y.grad();
  for (int i = 0; i < 2; ++i) CHECK(separate[i] == doctest::Approx(joint[i]).epsilon(1e-6));
}

TEST_CASE("tape is topological and consumed after backward") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor h = relu(x * float(2));
  Tensor loss = sum(add(h, sigmoid(h)));
  Tape<float> tape = Tape<float>::record(loss);
  const auto& nodes = tape.nodes();
  REQUIRE(!nodes.empty());
  CHECK(nodes.back() == loss.impl());
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto& input : nodes[i]->op->inputs) {
      auto pos = std::find(nodes.begin(), nodes.end(), input);
      if (pos != nodes.end()) CHECK(static_cast<std::size_t>(pos - nodes.begin()) < i);
    }
  loss.backward();
  CHECK(loss.is_leaf());
  CHECK(x.has_grad());
}

TEST_CASE("finite_diff_check oracle self tests") {
  std::mt19937_64 rng(9);
  TensorD x = random_tensor<double>({5}, rng);
  CHECK(finite_diff_check([&] { return sum(x); }, x, 1e-3).max_relative_error < 1e-9);
  Tensor xf = random_tensor({5}, rng);
  CHECK(finite_diff_check([&] { return sum(xf); }, xf, 1e-2).max_relative_error < 1e-4);

  Tensor away = mcffa::testing::random_away_from_zero({6}, rng, 0.01);
  CHECK(finite_diff_check([&] { return sum(relu(away)); }, away, 1e-3).max_relative_error < 1e-3);

  Tensor zero = Tensor::from({1}, {0});
  auto res = finite_diff_check([&] { return sum(sigmoid(zero)); }, zero, 1e-3);
  CHECK(res.analytic_at_worst == doctest::Approx(0.25));
  CHECK(res.max_relative_error < 1e-4);
}

TEST_CASE("property: differentiable ops pass finite differences on random shapes") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> ext(1, 4), op(0, 6);
  const char* names[] = {"add", "mul", "div", "sigmoid", "relu", "softmax", "matmul"};
  for (int trial = 0; trial < 140; ++trial) {
    Shape s{static_cast<std::size_t>(ext(rng)), static_cast<std::size_t>(ext(rng))};
    const int which = op(rng);
    std::vector<Tensor> in{mcffa::testing::random_away_from_zero(s, rng, 0.2),
                           mcffa::testing::random_away_from_zero(s, rng, 0.5), random_tensor(s, rng),
                           random_tensor({s[1], 3}, rng), random_tensor({s[0], 3}, rng)};
    auto build = [which](const auto& v) {
      const auto &a = v[0], &b = v[1], &r = v[2];
      switch (which) {
        case 0: return sum(mul(add(a, b), r));
        case 1: return sum(mul(mul(a, b), r));
        case 2: return sum(mul(div(b, a), r));
        case 3: return sum(mul(sigmoid(a), r));
        case 4: return sum(mul(relu(a), r));
        case 5: return sum(mul(softmax(a), r));
        default: return sum(mul(matmul(a, v[3]), v[4]));
      }
    };
    auto res = mcffa::testing::mixed_check(build, in, 0);
    INFO("op " << names[which] << " shape " << to_string(s) << " trial " << trial);
    CHECK(res.max_relative_error < 1e-3);
  }
}

TEST_CASE("64-bit mode: composite graph gradients agree to 1e-6") {
  std::mt19937_64 rng(41);
  TensorD a = mcffa::testing::random_away_from_zero<double>({3, 4}, rng, 0.2);
  TensorD b = mcffa::testing::random_away_from_zero<double>({3, 4}, rng, 0.5);
  TensorD w = random_tensor<double>({4, 2}, rng);
  TensorD r = random_tensor<double>({3, 2}, rng);
  auto loss = [&] { return sum(mul(softmax(matmul(sigmoid(div(mul(a, b), b + 2.0)), w)), r)); };
  CHECK(finite_diff_check(loss, a, 1e-6).max_relative_error < 1e-6);
  CHECK(finite_diff_check(loss, w, 1e-6).max_relative_error < 1e-6);
}

TEST_CASE("determinism: identical inputs give bitwise-identical results") {
  auto run = [] {
    std::mt19937_64 rng(77);
    Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
    return softmax(matmul(a, b));
  };
  Tensor r1 = run(), r2 = run();
  CHECK(std::memcmp(r1.data().data(), r2.data().data(), r1.numel() * sizeof(float)) == 0);
}

TEST_CASE("debug checks flag non-finite outputs from finite inputs") {
  const bool previous = debug_checks();
  set_debug_checks(true);
  Tensor a = Tensor::from({1}, {1});
  Tensor z = Tensor::from({1}, {0});
  CHECK_THROWS_AS(div(a, z), NumericError);
  set_debug_checks(false);
  CHECK_NOTHROW(div(a, z));
  set_debug_checks(previous);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({1, 1, 1, 1, 1}), ShapeError);
  Tensor t = Tensor::zeros({2, 3}, true);
  CHECK(t.grad().size() == t.numel());
}

#include "mcffa/selfcheck.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <random>

#include "mcffa/blocks.hpp"
#include "mcffa/errors.hpp"
#include "mcffa/gradcheck.hpp"
#include "mcffa/nn.hpp"
#include "mcffa/ops.hpp"
#include "mcffa/random.hpp"
#include "mcffa/training.hpp"

namespace mcffa {

namespace {

// Central-difference step on the double mirror, small enough that a point a
// few ulps away from a ReLU kink rarely straddles it.
constexpr double kStep = 1e-7;
// A gradient entry a thousand times below its tensor's largest one carries
// float round-off of its own size, so it is judged against that scale.
constexpr double kScaleFloor = 1e-3;

struct Kernel {
  std::size_t k, d, s;
};

// Seed i runs entries i and i + 5: five seeds cover every kernel size,
// dilations up to 12 and both strides.
constexpr Kernel kConvGrid[10] = {{3, 1, 1}, {5, 3, 2}, {7, 6, 1}, {9, 12, 1}, {1, 1, 2},
                                  {3, 8, 2}, {5, 10, 1}, {9, 9, 2}, {7, 12, 2}, {9, 5, 1}};

struct Accumulator {
  LayerReport report;

  void add(const GradCheckResult& r, const std::string& input) {
    report.elements += r.checked;
    if (r.max_relative_error > report.max_relative_error || report.worst_input.empty()) {
      report.max_relative_error = std::max(report.max_relative_error, r.max_relative_error);
      report.worst_input = input;
    }
  }
};

Tensor uniform(const Shape& shape, Rng& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(d(rng));
  return Tensor::from(shape, std::move(v));
}

// |x| in [margin, 1], random sign: keeps ReLU inputs off the kink.
Tensor away_from_zero(const Shape& shape, Rng& rng, double margin) {
  std::uniform_real_distribution<double> mag(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(sign(rng) ? mag(rng) : -mag(rng));
  return Tensor::from(shape, std::move(v));
}

template <typename T>
BasicTensor<T> faulty(const BasicTensor<T>& y, bool fault) {
  return fault ? scale_gradient(y, T(1.5)) : y;
}

template <typename T>
BasicTensor<T> objective(const BasicTensor<T>& y, const BasicTensor<T>& r) {
  return sum(mul(y, r));
}

// Checks inputs[i] for every i in wrt through `build`, which is called with
// the float inputs and with their double copies.
template <typename Build>
void check_inputs(Accumulator& acc, Build build, const std::vector<Tensor>& inputs,
                  const std::vector<std::pair<std::size_t, std::string>>& wrt, const GradCheckOptions& opt) {
  std::vector<TensorD> mirrors;
  for (const auto& t : inputs) mirrors.push_back(tensor_cast<double>(t));
  ScalarFunction<float> f = [&] { return build(inputs); };
  ScalarFunction<double> g = [&] { return build(mirrors); };
  for (const auto& [i, name] : wrt) {
    GradCheckOptions o = opt;
    o.scale_floor = kScaleFloor;
    o.sample_seed = opt.sample_seed * 131 + i;
    acc.add(mixed_precision_check(f, inputs[i], g, mirrors[i], kStep, o), name);
  }
}

template <typename T>
BasicConv2dParams<T> conv_of(const BasicTensor<T>& w, const BasicTensor<T>& b, std::size_t s, std::size_t d,
                             std::size_t groups = 1) {
  BasicConv2dParams<T> p;
  p.weight = w;
  p.bias = b;
  p.stride = s;
  p.dilation = d;
  p.groups = groups;
  return p;
}

void check_conv2d(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.conv2d");
  for (std::size_t pick : {seed % 10, (seed + 5) % 10}) {
    const Kernel kc = kConvGrid[pick];
    std::vector<Tensor> in{uniform({2, 2, 10, 10}, rng), uniform({3, 2, kc.k, kc.k}, rng), uniform({3}, rng)};
    const std::size_t out = conv_output_extent(10, kc.k, kc.s, kc.d, kc.d * (kc.k - 1) / 2);
    in.push_back(uniform({2, 3, out, out}, rng));
    auto build = [&](const auto& v) { return objective(faulty(conv2d(v[0], conv_of(v[1], v[2], kc.s, kc.d)), fault), v[3]); };
    GradCheckOptions opt;
    opt.max_elements = 40;
    opt.sample_seed = seed;
    const std::string tag = "k" + std::to_string(kc.k) + "d" + std::to_string(kc.d) + "s" + std::to_string(kc.s);
    check_inputs(acc, build, in, {{0, "input " + tag}, {1, "weight " + tag}, {2, "bias " + tag}}, opt);
  }
}

void check_separable(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.separable");
  const std::size_t stride = 1 + seed % 2;
  std::vector<Tensor> in{uniform({2, 3, 8, 8}, rng), uniform({3, 1, 3, 3}, rng), uniform({3}, rng),
                         uniform({4, 3, 1, 1}, rng), uniform({4}, rng)};
  const std::size_t out = conv_output_extent(8, 3, stride, 1, 1);
  in.push_back(uniform({2, 4, out, out}, rng));
  auto build = [&](const auto& v) {
    const auto dw = conv_of(v[1], v[2], stride, 1, 3);
    const auto pw = conv_of(v[3], v[4], 1, 1);
    return objective(faulty(separable_conv2d(v[0], dw, pw), fault), v[5]);
  };
  GradCheckOptions opt;
  opt.max_elements = 40;
  opt.sample_seed = seed;
  check_inputs(acc, build, in,
               {{0, "input"}, {1, "depthwise.weight"}, {2, "depthwise.bias"}, {3, "pointwise.weight"},
                {4, "pointwise.bias"}},
               opt);
}

void check_dense(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.dense");
  std::vector<Tensor> in{uniform({3, 5}, rng), uniform({5, 4}, rng), uniform({4}, rng), uniform({3, 4}, rng)};
  auto build = [&](const auto& v) { return objective(faulty(dense(v[0], v[1], v[2]), fault), v[3]); };
  check_inputs(acc, build, in, {{0, "input"}, {1, "weight"}, {2, "bias"}}, {});
}

void check_batchnorm(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.batchnorm");
  const Mode mode = seed % 2 == 0 ? Mode::kTrain : Mode::kInfer;
  std::vector<Tensor> in{uniform({4, 3, 3, 3}, rng, -2, 2), uniform({3}, rng, 0.5, 1.5), uniform({3}, rng),
                         uniform({4, 3, 3, 3}, rng), uniform({3}, rng, -0.5, 0.5), uniform({3}, rng, 0.5, 2)};
  auto build = [&](const auto& v) {
    using T = typename std::decay_t<decltype(v[0])>::value_type;
    auto st = BasicBatchNormState<T>::create(3);
    st.gamma = v[1];
    st.beta = v[2];
    st.running_mean = v[4].detach().clone();
    st.running_var = v[5].detach().clone();
    return objective(faulty(batchnorm(v[0], st, mode), fault), v[3]);
  };
  const std::string m = mode == Mode::kTrain ? " (train)" : " (infer)";
  check_inputs(acc, build, in, {{0, "input" + m}, {1, "gamma" + m}, {2, "beta" + m}}, {});
}

void check_relu(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.relu");
  std::vector<Tensor> in{away_from_zero({4, 6}, rng, 0.05), uniform({4, 6}, rng)};
  auto build = [&](const auto& v) { return objective(faulty(relu(v[0]), fault), v[1]); };
  check_inputs(acc, build, in, {{0, "input"}}, {});
}

void check_sigmoid(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.sigmoid");
  std::vector<Tensor> in{uniform({4, 6}, rng, -4, 4), uniform({4, 6}, rng)};
  auto build = [&](const auto& v) { return objective(faulty(sigmoid(v[0]), fault), v[1]); };
  check_inputs(acc, build, in, {{0, "input"}}, {});
}

void check_softmax(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.softmax");
  std::vector<Tensor> in{uniform({3, 5}, rng, -3, 3), uniform({3, 5}, rng)};
  auto build = [&](const auto& v) { return objective(faulty(softmax(v[0]), fault), v[1]); };
  check_inputs(acc, build, in, {{0, "input"}}, {});
}

void check_gap(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.gap");
  std::vector<Tensor> in{uniform({2, 3, 5, 4}, rng), uniform({2, 3}, rng)};
  auto build = [&](const auto& v) { return objective(faulty(global_avg_pool(v[0]), fault), v[1]); };
  check_inputs(acc, build, in, {{0, "input"}}, {});
}

void check_cross_entropy(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.cross_entropy");
  std::vector<Tensor> in{uniform({3, 4}, rng, -3, 3)};
  std::vector<int> labels;
  for (int i = 0; i < 3; ++i) labels.push_back(static_cast<int>(rng() % 4));
  auto build = [&](const auto& v) { return faulty(cross_entropy(softmax(v[0]), labels), fault); };
  check_inputs(acc, build, in, {{0, "logits"}}, {});
}

void check_se(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.se");
  // Hidden pre-activations are kept off zero through large biases.
  std::vector<Tensor> in{uniform({2, 8, 4, 4}, rng), uniform({8, 4}, rng), away_from_zero({4}, rng, 0.3),
                         uniform({4, 8}, rng), uniform({8}, rng), uniform({2, 8, 4, 4}, rng)};
  auto build = [&](const auto& v) {
    using T = typename std::decay_t<decltype(v[0])>::value_type;
    BasicSeParams<T> p{v[1], v[2], v[3], v[4]};
    return objective(faulty(se_forward(v[0], p), fault), v[5]);
  };
  GradCheckOptions opt;
  opt.max_elements = 48;
  opt.sample_seed = seed;
  check_inputs(acc, build, in, {{0, "input"}, {1, "fc1.weight"}, {2, "fc1.bias"}, {3, "fc2.weight"}, {4, "fc2.bias"}},
               opt);
}

// Moves biases and batchnorm shifts off zero so no ReLU input sits exactly on
// its kink at the evaluation point.
void randomize_offsets(const ParameterList& params, Rng& rng) {
  std::uniform_real_distribution<double> d(-0.3, 0.3);
  for (const auto& p : params) {
    if (p.buffer) continue;
    if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
      Tensor t = p.tensor;
      for (auto& v : t.mutable_data()) v = static_cast<float>(d(rng));
    }
  }
}

void check_msdrc(Accumulator& acc, std::uint64_t seed, bool fault) {
  Rng rng = make_rng(seed, "gradcheck.msdrc");
  const MsdrcConfig cfg{2, 0};
  const MsdrcParams p = MsdrcParams::create(cfg, rng);
  ParameterList plist;
  p.collect("msdrc", plist);
  randomize_offsets(plist, rng);
  std::vector<Tensor> in{uniform({1, 2, 12, 12}, rng), uniform({1, 2, 12, 12}, rng)};
  std::vector<std::pair<std::size_t, std::string>> wrt{{0, "input"}};
  for (const auto& np : plist) {
    wrt.emplace_back(in.size(), np.name);
    in.push_back(np.tensor);
  }
  auto build = [&](const auto& v) {
    using T = typename std::decay_t<decltype(v[0])>::value_type;
    BasicMsdrcParams<T> q;
    for (std::size_t b = 0; b < 4; ++b) {
      q.first[b] = conv_of(v[2 + 4 * b], v[3 + 4 * b], 1, kMsdrcBranches[b].dilation1);
      q.second[b] = conv_of(v[4 + 4 * b], v[5 + 4 * b], 1, kMsdrcBranches[b].dilation2);
    }
    q.projection = conv_of(v[18], v[19], 1, 1);
    return objective(faulty(msdrc_forward(v[0], cfg, q), fault), v[1]);
  };
  GradCheckOptions opt;
  opt.max_elements = 8;
  opt.sample_seed = seed;
  check_inputs(acc, build, in, wrt, opt);
}

// The objective's gradient with respect to the probabilities is of order one,
// so entries below 1e-6 are compared absolutely at that scale.
constexpr double kModelEpsilon = 1e-6;

void check_micro_model(Accumulator& acc, std::uint64_t seed, bool fault) {
  const ModelConfig cfg = micro_config();
  McffaModel m(cfg, seed);
  BasicMcffaModel<double> md(cfg, seed);
  Rng rng = make_rng(seed, "gradcheck.model");
  randomize_offsets(m.parameters(), rng);
  assign_parameters(md.parameters(), m.parameters());
  const Tensor x = uniform({2, 3, cfg.input_size, cfg.input_size}, rng, 0, 1);
  const TensorD xd = tensor_cast<double>(x);
  const Tensor r = uniform({2, 4}, rng);
  const TensorD rd = tensor_cast<double>(r);
  ScalarFunction<float> f = [&] {
    Rng drop(seed);
    return objective(faulty(m.forward(x, Mode::kTrain, drop), fault), r);
  };
  ScalarFunction<double> fd = [&] {
    Rng drop(seed);
    return objective(faulty(md.forward(xd, Mode::kTrain, drop), fault), rd);
  };
  const auto pf = m.parameters();
  const auto pd = md.parameters();
  GradCheckOptions opt;
  opt.epsilon = kModelEpsilon;
  opt.max_elements = 3;
  for (std::size_t i = 0; i < pf.size(); ++i) {
    if (pf[i].buffer || !pf[i].trainable) continue;
    opt.sample_seed = seed * 1000 + i;
    acc.add(mixed_precision_check(f, pf[i].tensor, fd, pd[i].tensor, kStep, opt), pf[i].name);
  }
  opt.max_elements = 16;
  acc.add(mixed_precision_check(f, x, fd, xd, kStep, opt), "image");
}

using CheckFn = void (*)(Accumulator&, std::uint64_t, bool);

const std::vector<std::pair<std::string, CheckFn>>& registry() {
  static const std::vector<std::pair<std::string, CheckFn>> r{
      {"conv2d", check_conv2d},
      {"separable_conv2d", check_separable},
      {"dense", check_dense},
      {"batchnorm", check_batchnorm},
      {"relu", check_relu},
      {"sigmoid", check_sigmoid},
      {"softmax", check_softmax},
      {"global_avg_pool", check_gap},
      {"cross_entropy", check_cross_entropy},
      {"se_block", check_se},
      {"msdrc", check_msdrc},
      {"micro_model", check_micro_model},
  };
  return r;
}

}  // namespace

std::vector<std::string> gradcheck_layers() {
  std::vector<std::string> names;
  for (const auto& [n, fn] : registry()) names.push_back(n);
  return names;
}

LayerReport check_layer(const std::string& layer, std::size_t seeds, bool fault, double tolerance) {
  for (const auto& [name, fn] : registry()) {
    if (name != layer) continue;
    if (seeds == 0) throw ConfigError("gradient check needs at least one seed");
    Accumulator acc;
    acc.report.layer = layer;
    acc.report.seeds = seeds;
    for (std::uint64_t s = 0; s < seeds; ++s) fn(acc, s, fault);
    acc.report.passed = acc.report.max_relative_error < tolerance;
    return acc.report;
  }
  throw ConfigError("unknown layer '" + layer + "' for gradient check");
}

std::vector<LayerReport> run_gradcheck(std::size_t seeds, const std::string& fault_layer, double tolerance) {
  const auto names = gradcheck_layers();
  if (!fault_layer.empty() && std::find(names.begin(), names.end(), fault_layer) == names.end()) {
    throw ConfigError("unknown layer '" + fault_layer + "' for fault injection");
  }
  std::vector<LayerReport> out;
  for (const auto& n : names) out.push_back(check_layer(n, seeds, n == fault_layer, tolerance));
  return out;
}

}  // namespace mcffa

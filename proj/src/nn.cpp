#include "mcffa/nn.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "mcffa/errors.hpp"
#include "mcffa/ops.hpp"

namespace mcffa {

namespace {

using Index = std::ptrdiff_t;

struct ConvGeometry {
  std::size_t n, c, h, w;     // input
  std::size_t o, cg, k;       // weight: out, in per group, kernel
  std::size_t ho, wo;         // output
  std::size_t s, d, p, groups;
  std::size_t out_per_group;
};

template <typename T>
ConvGeometry conv_geometry(const BasicTensor<T>& x, const BasicConv2dParams<T>& p) {
  if (x.rank() != 4) throw ShapeError("conv2d expects [N,C,H,W] input, got " + to_string(x.shape()));
  if (!p.weight.defined() || p.weight.rank() != 4) throw ShapeError("conv2d weight must be [out,in,k,k]");
  const Shape& ws = p.weight.shape();
  if (ws[2] != ws[3]) throw ShapeError("conv2d kernel must be square, got " + to_string(ws));
  if (p.stride == 0 || p.dilation == 0 || p.groups == 0) throw ShapeError("conv2d stride, dilation and groups must be >= 1");
  if (ws[0] % p.groups != 0) throw ShapeError("conv2d out channels not divisible by groups");
  ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.o = ws[0];
  g.cg = ws[1];
  g.k = ws[2];
  g.s = p.stride;
  g.d = p.dilation;
  g.groups = p.groups;
  g.p = p.resolved_padding();
  g.out_per_group = g.o / g.groups;
  if (g.cg * g.groups != g.c) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(g.c) + " channels, weight expects " +
                     std::to_string(g.cg * g.groups));
  }
  if (p.bias.defined() && p.bias.numel() != g.o) throw ShapeError("conv2d bias must have one entry per output channel");
  g.ho = conv_output_extent(g.h, g.k, g.s, g.d, g.p);
  g.wo = conv_output_extent(g.w, g.k, g.s, g.d, g.p);
  if (g.ho == 0 || g.wo == 0) {
    throw ShapeError("conv2d output extent is non-positive for input " + to_string(x.shape()) + ", kernel " +
                     std::to_string(g.k) + ", dilation " + std::to_string(g.d));
  }
  return g;
}

// Output positions i in [lo, hi) whose tap i*s + offset lands inside [0, extent).
struct TapRange {
  std::size_t lo = 0, hi = 0;
};

TapRange tap_range(Index offset, std::size_t extent, std::size_t stride, std::size_t out_extent) {
  const Index s = static_cast<Index>(stride);
  Index lo = offset >= 0 ? 0 : (-offset + s - 1) / s;
  Index last_input = static_cast<Index>(extent) - 1 - offset;
  if (last_input < 0) return {};
  Index hi = std::min<Index>(last_input / s + 1, static_cast<Index>(out_extent));
  if (lo >= hi) return {};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

template <typename T>
std::size_t BasicConv2dParams<T>::resolved_padding() const {
  if (padding.kind == Padding::Kind::kExplicit) return padding.amount;
  const std::size_t k = kernel();
  if (k % 2 == 0) throw ShapeError("SAME padding requires an odd kernel, got " + std::to_string(k));
  return dilation * (k - 1) / 2;
}

std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride, std::size_t dilation,
                               std::size_t padding) {
  const Index span = static_cast<Index>(dilation * (kernel - 1) + 1);
  const Index padded = static_cast<Index>(extent + 2 * padding);
  if (padded < span) return 0;
  return static_cast<std::size_t>((padded - span) / static_cast<Index>(stride)) + 1;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicConv2dParams<T>& p) {
  const ConvGeometry g = conv_geometry(x, p);
  const std::size_t in_plane = g.h * g.w;
  const std::size_t out_plane = g.ho * g.wo;
  const std::size_t kk = g.k * g.k;
  auto xd = x.data();
  auto wd = p.weight.data();
  std::vector<T> y(g.n * g.o * out_plane);
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t o = 0; o < g.o; ++o) {
      T* yp = y.data() + (n * g.o + o) * out_plane;
      const T b = p.bias.defined() ? p.bias.data()[o] : T{0};
      std::fill(yp, yp + out_plane, b);
      const std::size_t group = o / g.out_per_group;
      for (std::size_t cg = 0; cg < g.cg; ++cg) {
        const T* xp = xd.data() + (n * g.c + group * g.cg + cg) * in_plane;
        const T* wk = wd.data() + (o * g.cg + cg) * kk;
        for (std::size_t u = 0; u < g.k; ++u) {
          const Index roff = static_cast<Index>(u * g.d) - static_cast<Index>(g.p);
          const TapRange rows = tap_range(roff, g.h, g.s, g.ho);
          if (rows.lo == rows.hi) continue;
          for (std::size_t v = 0; v < g.k; ++v) {
            const Index coff = static_cast<Index>(v * g.d) - static_cast<Index>(g.p);
            const TapRange cols = tap_range(coff, g.w, g.s, g.wo);
            if (cols.lo == cols.hi) continue;
            const T wv = wk[u * g.k + v];
            const std::size_t len = cols.hi - cols.lo;
            const std::size_t col0 = static_cast<std::size_t>(static_cast<Index>(cols.lo * g.s) + coff);
            for (std::size_t i = rows.lo; i < rows.hi; ++i) {
              const std::size_t row = static_cast<std::size_t>(static_cast<Index>(i * g.s) + roff);
              const T* xr = xp + row * g.w + col0;
              T* yr = yp + i * g.wo + cols.lo;
              if (g.s == 1) {
                for (std::size_t j = 0; j < len; ++j) yr[j] += wv * xr[j];
              } else {
                for (std::size_t j = 0; j < len; ++j) yr[j] += wv * xr[j * g.s];
              }
            }
          }
        }
      }
    }
  }

  std::vector<BasicTensor<T>> inputs{x, p.weight};
  if (p.bias.defined()) inputs.push_back(p.bias);
  const bool has_bias = p.bias.defined();
  auto backward = [g, has_bias](TensorImpl<T>& node) {
    TensorImpl<T>& tx = *node.op->inputs[0];
    TensorImpl<T>& tw = *node.op->inputs[1];
    const std::size_t in_plane = g.h * g.w;
    const std::size_t out_plane = g.ho * g.wo;
    const std::size_t kk = g.k * g.k;
    const auto& dy = node.grad;
    std::span<T> dx = tx.requires_grad ? tx.grad_buffer() : std::span<T>{};
    std::span<T> dw = tw.requires_grad ? tw.grad_buffer() : std::span<T>{};
    if (has_bias) {
      TensorImpl<T>& tb = *node.op->inputs[2];
      if (tb.requires_grad) {
        auto db = tb.grad_buffer();
        for (std::size_t n = 0; n < g.n; ++n)
          for (std::size_t o = 0; o < g.o; ++o) {
            const T* gp = dy.data() + (n * g.o + o) * out_plane;
            double acc = 0;
            for (std::size_t q = 0; q < out_plane; ++q) acc += gp[q];
            db[o] += static_cast<T>(acc);
          }
      }
    }
    if (dx.empty() && dw.empty()) return;
    // Input gradients gather many taps, so they are summed in double.
    std::vector<double> dxacc(dx.empty() ? 0 : dx.size(), 0.0);
    for (std::size_t n = 0; n < g.n; ++n) {
      for (std::size_t o = 0; o < g.o; ++o) {
        const T* gp = dy.data() + (n * g.o + o) * out_plane;
        const std::size_t group = o / g.out_per_group;
        for (std::size_t cg = 0; cg < g.cg; ++cg) {
          const std::size_t xoff = (n * g.c + group * g.cg + cg) * in_plane;
          const T* xp = tx.data.data() + xoff;
          double* dxp = dx.empty() ? nullptr : dxacc.data() + xoff;
          const std::size_t woff = (o * g.cg + cg) * kk;
          for (std::size_t u = 0; u < g.k; ++u) {
            const Index roff = static_cast<Index>(u * g.d) - static_cast<Index>(g.p);
            const TapRange rows = tap_range(roff, g.h, g.s, g.ho);
            if (rows.lo == rows.hi) continue;
            for (std::size_t v = 0; v < g.k; ++v) {
              const Index coff = static_cast<Index>(v * g.d) - static_cast<Index>(g.p);
              const TapRange cols = tap_range(coff, g.w, g.s, g.wo);
              if (cols.lo == cols.hi) continue;
              const T wv = tw.data[woff + u * g.k + v];
              double wacc = 0;
              const std::size_t len = cols.hi - cols.lo;
              const std::size_t col0 = static_cast<std::size_t>(static_cast<Index>(cols.lo * g.s) + coff);
              for (std::size_t i = rows.lo; i < rows.hi; ++i) {
                const std::size_t row = static_cast<std::size_t>(static_cast<Index>(i * g.s) + roff);
                const std::size_t base = row * g.w + col0;
                const T* gr = gp + i * g.wo + cols.lo;
                const T* xr = xp + base;
                if (dxp) {
                  double* dxr = dxp + base;
                  for (std::size_t j = 0; j < len; ++j) dxr[j * g.s] += static_cast<double>(wv) * gr[j];
                }
                if (!dw.empty()) {
                  for (std::size_t j = 0; j < len; ++j) wacc += static_cast<double>(gr[j]) * xr[j * g.s];
                }
              }
              if (!dw.empty()) dw[woff + u * g.k + v] += static_cast<T>(wacc);
            }
          }
        }
      }
    }
    for (std::size_t i = 0; i < dxacc.size(); ++i) dx[i] += static_cast<T>(dxacc[i]);
  };
  return make_result<T>("conv2d", {g.n, g.o, g.ho, g.wo}, std::move(y), std::move(inputs), backward);
}

template <typename T>
BasicTensor<T> conv2d_reference(const BasicTensor<T>& x, const BasicConv2dParams<T>& p) {
  const ConvGeometry g = conv_geometry(x, p);
  BasicTensor<T> y = BasicTensor<T>::zeros({g.n, g.o, g.ho, g.wo});
  auto out = y.mutable_data();
  auto xd = x.data();
  auto wd = p.weight.data();
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o)
      for (std::size_t i = 0; i < g.ho; ++i)
        for (std::size_t j = 0; j < g.wo; ++j) {
          T acc = p.bias.defined() ? p.bias.data()[o] : T{0};
          const std::size_t group = o / g.out_per_group;
          for (std::size_t cg = 0; cg < g.cg; ++cg)
            for (std::size_t u = 0; u < g.k; ++u)
              for (std::size_t v = 0; v < g.k; ++v) {
                const Index r = static_cast<Index>(i * g.s + u * g.d) - static_cast<Index>(g.p);
                const Index c = static_cast<Index>(j * g.s + v * g.d) - static_cast<Index>(g.p);
                if (r < 0 || c < 0 || r >= static_cast<Index>(g.h) || c >= static_cast<Index>(g.w)) continue;
                const std::size_t ch = group * g.cg + cg;
                acc += wd[((o * g.cg + cg) * g.k + u) * g.k + v] *
                       xd[((n * g.c + ch) * g.h + static_cast<std::size_t>(r)) * g.w + static_cast<std::size_t>(c)];
              }
          out[((n * g.o + o) * g.ho + i) * g.wo + j] = acc;
        }
  return y;
}

template <typename T>
BasicTensor<T> separable_conv2d(const BasicTensor<T>& x, const BasicConv2dParams<T>& depthwise, const BasicConv2dParams<T>& pointwise) {
  if (depthwise.weight.rank() != 4 || depthwise.weight.dim(1) != 1 || depthwise.groups != depthwise.weight.dim(0)) {
    throw ShapeError("separable_conv2d depthwise stage must use one filter per channel (groups == channels)");
  }
  if (pointwise.kernel() != 1 || pointwise.groups != 1) {
    throw ShapeError("separable_conv2d pointwise stage must be an ungrouped 1x1 convolution");
  }
  return conv2d(conv2d(x, depthwise), pointwise);
}

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1) {
    throw ShapeError("dense expects x:[N,Din], W:[Din,Dout], b:[Dout]; got " + to_string(x.shape()) + ", " +
                     to_string(weight.shape()) + ", " + to_string(bias.shape()));
  }
  if (x.dim(1) != weight.dim(0) || bias.dim(0) != weight.dim(1)) {
    throw ShapeError("dense dimension mismatch: x " + to_string(x.shape()) + ", W " + to_string(weight.shape()) +
                     ", b " + to_string(bias.shape()));
  }
  return add(matmul(x, weight), bias);
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  auto xd = x.data();
  std::vector<T> out(n * c);
  for (std::size_t q = 0; q < n * c; ++q) {
    double acc = 0;
    for (std::size_t i = 0; i < plane; ++i) acc += xd[q * plane + i];
    out[q] = static_cast<T>(acc / static_cast<double>(plane));
  }
  auto backward = [plane](TensorImpl<T>& node) {
    TensorImpl<T>& in = *node.op->inputs[0];
    if (!in.requires_grad) return;
    auto g = in.grad_buffer();
    for (std::size_t q = 0; q < node.grad.size(); ++q) {
      const T share = node.grad[q] / static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) g[q * plane + i] += share;
    }
  };
  return make_result<T>("global_avg_pool", {n, c}, std::move(out), {x}, backward);
}

template <typename T>
BasicBatchNormState<T> BasicBatchNormState<T>::create(std::size_t channels) {
  BasicBatchNormState<T> s;
  s.gamma = BasicTensor<T>::full({channels}, T{1}, true);
  s.beta = BasicTensor<T>::zeros({channels}, true);
  s.running_mean = BasicTensor<T>::zeros({channels});
  s.running_var = BasicTensor<T>::full({channels}, T{1});
  return s;
}

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& x, BasicBatchNormState<T>& state, Mode mode) {
  if (x.rank() != 4 && x.rank() != 2) throw ShapeError("batchnorm expects [N,C,H,W] or [N,C], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (c != state.channels()) {
    throw ShapeError("batchnorm channel mismatch: input " + std::to_string(c) + ", state " +
                     std::to_string(state.channels()));
  }
  const std::size_t count = n * plane;
  auto xd = x.data();
  auto gamma = state.gamma.data();
  auto beta = state.beta.data();
  auto xhat = std::make_shared<std::vector<T>>(xd.size());
  auto inv_std = std::make_shared<std::vector<T>>(c);
  std::vector<T> y(xd.size());
  const bool train = mode == Mode::kTrain;

  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (train) {
      double acc = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < plane; ++i) acc += xd[(b * c + ch) * plane + i];
      mu = acc / static_cast<double>(count);
      double sq = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < plane; ++i) {
          const double dv = xd[(b * c + ch) * plane + i] - mu;
          sq += dv * dv;
        }
      var = sq / static_cast<double>(count);
      auto rm = state.running_mean.mutable_data();
      auto rv = state.running_var.mutable_data();
      rm[ch] = static_cast<T>(state.momentum * rm[ch] + (T{1} - state.momentum) * static_cast<T>(mu));
      rv[ch] = static_cast<T>(state.momentum * rv[ch] + (T{1} - state.momentum) * static_cast<T>(var));
    } else {
      mu = state.running_mean.data()[ch];
      var = state.running_var.data()[ch];
    }
    const double is = 1.0 / std::sqrt(var + static_cast<double>(state.eps));
    (*inv_std)[ch] = static_cast<T>(is);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t q = (b * c + ch) * plane + i;
        const T h = static_cast<T>((xd[q] - mu) * is);
        (*xhat)[q] = h;
        y[q] = gamma[ch] * h + beta[ch];
      }
  }

  auto backward = [n, c, plane, count, train, xhat, inv_std](TensorImpl<T>& node) {
    TensorImpl<T>& tx = *node.op->inputs[0];
    TensorImpl<T>& tg = *node.op->inputs[1];
    TensorImpl<T>& tb = *node.op->inputs[2];
    const auto& dy = node.grad;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t q = (b * c + ch) * plane + i;
          sum_dy += dy[q];
          sum_dy_xhat += static_cast<double>(dy[q]) * (*xhat)[q];
        }
      if (tg.requires_grad) tg.grad_buffer()[ch] += static_cast<T>(sum_dy_xhat);
      if (tb.requires_grad) tb.grad_buffer()[ch] += static_cast<T>(sum_dy);
      if (!tx.requires_grad) continue;
      auto dx = tx.grad_buffer();
      const double gscale = static_cast<double>(tg.data[ch]) * (*inv_std)[ch];
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t q = (b * c + ch) * plane + i;
          if (train) {
            const double m = static_cast<double>(count);
            dx[q] += static_cast<T>(gscale * (dy[q] - sum_dy / m - (*xhat)[q] * sum_dy_xhat / m));
          } else {
            dx[q] += static_cast<T>(gscale * dy[q]);
          }
        }
    }
  };
  return make_result<T>("batchnorm", x.shape(), std::move(y), {x, state.gamma, state.beta}, backward);
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0) || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::kInfer || rate == 0.0) return x;
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::bernoulli_distribution keep(1.0 - rate);
  auto xd = x.data();
  std::vector<T> y(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    (*mask)[i] = keep(rng) ? keep_scale : T{0};
    y[i] = xd[i] * (*mask)[i];
  }
  auto backward = [mask](TensorImpl<T>& node) {
    TensorImpl<T>& in = *node.op->inputs[0];
    if (!in.requires_grad) return;
    auto g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * (*mask)[i];
  };
  return make_result<T>("dropout", x.shape(), std::move(y), {x}, backward);
}

template <typename T>
void he_uniform_init(BasicTensor<T>& weight, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : weight.mutable_data()) v = static_cast<T>(dist(rng));
}

template <typename T>
BasicConv2dParams<T> make_conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng,
                               std::size_t stride, std::size_t dilation, std::size_t groups) {
  if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw ShapeError("make_conv: channels must be divisible by groups");
  }
  BasicConv2dParams<T> p;
  p.weight = BasicTensor<T>::zeros({out_channels, in_channels / groups, kernel, kernel}, true);
  p.bias = BasicTensor<T>::zeros({out_channels}, true);
  p.stride = stride;
  p.dilation = dilation;
  p.groups = groups;
  p.padding = Padding::same();
  he_uniform_init(p.weight, in_channels / groups * kernel * kernel, rng);
  return p;
}

#define MCFFA_INSTANTIATE_NN(T)                                                                               \
  template struct BasicConv2dParams<T>;                                                                        \
  template struct BasicBatchNormState<T>;                                                                      \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicConv2dParams<T>&);                           \
  template BasicTensor<T> conv2d_reference(const BasicTensor<T>&, const BasicConv2dParams<T>&);                 \
  template BasicTensor<T> separable_conv2d(const BasicTensor<T>&, const BasicConv2dParams<T>&,                  \
                                           const BasicConv2dParams<T>&);                                        \
  template BasicTensor<T> dense(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                               \
  template BasicTensor<T> batchnorm(const BasicTensor<T>&, BasicBatchNormState<T>&, Mode);                      \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, Mode, Rng&);                                   \
  template void he_uniform_init(BasicTensor<T>&, std::size_t, Rng&);                                            \
  template BasicConv2dParams<T> make_conv(std::size_t, std::size_t, std::size_t, Rng&, std::size_t, std::size_t, \
                                          std::size_t);

MCFFA_INSTANTIATE_NN(float)
MCFFA_INSTANTIATE_NN(double)

}  // namespace mcffa

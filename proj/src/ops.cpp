#include "mcffa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mcffa/errors.hpp"

namespace mcffa {

namespace {

// Strides of `shape` laid out against `out` (right-aligned), with 0 on
// broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < shape.size(); ++k) {
    std::size_t axis = shape.size() - 1 - k;
    std::size_t out_axis = out.size() - 1 - k;
    strides[out_axis] = shape[axis] == 1 ? 0 : stride;
    stride *= shape[axis];
  }
  return strides;
}

// Calls fn(out_index, a_index, b_index) for every output element in order.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const std::size_t total = numel(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  auto sa = broadcast_strides(a, out);
  auto sb = broadcast_strides(b, out);
  std::vector<std::size_t> index(out.size(), 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < total; ++i) {
    fn(i, ia, ib);
    for (std::size_t axis = out.size(); axis-- > 0;) {
      ++index[axis];
      ia += sa[axis];
      ib += sb[axis];
      if (index[axis] < out[axis]) break;
      ia -= sa[axis] * out[axis];
      ib -= sb[axis] * out[axis];
      index[axis] = 0;
    }
  }
}

const char* kind_name(ElementwiseKind kind) {
  switch (kind) {
    case ElementwiseKind::kAdd: return "add";
    case ElementwiseKind::kSub: return "sub";
    case ElementwiseKind::kMul: return "mul";
    case ElementwiseKind::kDiv: return "div";
  }
  return "?";
}

template <typename T>
T apply(ElementwiseKind kind, T x, T y) {
  switch (kind) {
    case ElementwiseKind::kAdd: return x + y;
    case ElementwiseKind::kSub: return x - y;
    case ElementwiseKind::kMul: return x * y;
    case ElementwiseKind::kDiv: return x / y;
  }
  return 0;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out(std::max(a.size(), b.size()), 1);
  for (std::size_t k = 0; k < out.size(); ++k) {
    std::size_t ea = k < a.size() ? a[a.size() - 1 - k] : 1;
    std::size_t eb = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcast-compatible");
    }
    out[out.size() - 1 - k] = std::max(ea, eb);
  }
  return out;
}

template <typename T>
BasicTensor<T> elementwise(ElementwiseKind kind, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  std::vector<T> out(numel(out_shape));
  auto da = a.data();
  auto db = b.data();
  for_each_broadcast(out_shape, a.shape(), b.shape(),
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = apply(kind, da[ia], db[ib]); });

  auto backward = [kind, out_shape](TensorImpl<T>& node) {
    TensorImpl<T>& ta = *node.op->inputs[0];
    TensorImpl<T>& tb = *node.op->inputs[1];
    const auto& g = node.grad;
    std::span<T> ga = ta.requires_grad ? ta.grad_buffer() : std::span<T>{};
    std::span<T> gb = tb.requires_grad ? tb.grad_buffer() : std::span<T>{};
    const auto& xa = ta.data;
    const auto& xb = tb.data;
    for_each_broadcast(out_shape, ta.shape, tb.shape, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case ElementwiseKind::kAdd:
          if (!ga.empty()) ga[ia] += g[i];
          if (!gb.empty()) gb[ib] += g[i];
          break;
        case ElementwiseKind::kSub:
          if (!ga.empty()) ga[ia] += g[i];
          if (!gb.empty()) gb[ib] -= g[i];
          break;
        case ElementwiseKind::kMul:
          if (!ga.empty()) ga[ia] += g[i] * xb[ib];
          if (!gb.empty()) gb[ib] += g[i] * xa[ia];
          break;
        case ElementwiseKind::kDiv:
          if (!ga.empty()) ga[ia] += g[i] / xb[ib];
          if (!gb.empty()) gb[ib] -= g[i] * xa[ia] / (xb[ib] * xb[ib]);
          break;
      }
    });
  };
  return make_result<T>(kind_name(kind), out_shape, std::move(out), {a, b}, backward);
}


template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul expects rank-2 operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<T> out(m * n, T{0});
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = da[i * k + p];
      const T* brow = db.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  auto backward = [m, k, n](TensorImpl<T>& node) {
    TensorImpl<T>& ta = *node.op->inputs[0];
    TensorImpl<T>& tb = *node.op->inputs[1];
    const auto& g = node.grad;
    if (ta.requires_grad) {
      auto ga = ta.grad_buffer();  // dA = dY * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * tb.data[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (tb.requires_grad) {
      auto gb = tb.grad_buffer();  // dB = A^T * dY
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T av = ta.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
    }
  };
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, backward);
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  auto backward = [](TensorImpl<T>& node) {
    TensorImpl<T>& in = *node.op->inputs[0];
    if (!in.requires_grad) return;
    auto g = in.grad_buffer();
    for (auto& v : g) v += node.grad[0];
  };
  return make_result<T>("sum", {}, {static_cast<T>(acc)}, {x}, backward);
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  const std::size_t n = x.numel();
  double acc = 0;
  for (T v : x.data()) acc += v;
  auto backward = [n](TensorImpl<T>& node) {
    TensorImpl<T>& in = *node.op->inputs[0];
    if (!in.requires_grad) return;
    auto g = in.grad_buffer();
    const T scale = node.grad[0] / static_cast<T>(n);
    for (auto& v : g) v += scale;
  };
  return make_result<T>("mean", {}, {static_cast<T>(acc / static_cast<double>(n))}, {x}, backward);
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, const Shape& shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto backward = [](TensorImpl<T>& node) {
    TensorImpl<T>& in = *node.op->inputs[0];
    if (!in.requires_grad) return;
    auto g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
  };
  return make_result<T>("reshape", shape, std::move(out), {x}, backward);
}

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("flatten needs a batch axis");
  return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range for " + to_string(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const BasicTensor<T>& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw ShapeError("concat operands " + to_string(first) + " and " + to_string(s) + " disagree");
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  std::vector<std::size_t> widths;
  for (const BasicTensor<T>& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t out_width = out_shape[axis] * inner;

  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * widths[k], widths[k], out.data() + o * out_width + offset);
    }
    offset += widths[k];
  }
  auto backward = [widths, outer, out_width](TensorImpl<T>& node) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      TensorImpl<T>& in = *node.op->inputs[k];
      if (in.requires_grad) {
        auto g = in.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[k]; ++i) g[o * widths[k] + i] += node.grad[o * out_width + offset + i];
      }
      offset += widths[k];
    }
  };
  return make_result<T>("concat", out_shape, std::move(out), parts, backward);
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  auto in = x.data();
  std::vector<T> out(in.size());
  // NaN propagates rather than being clipped to zero.
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0 || std::isnan(in[i]) ? in[i] : T{0};
  auto backward = [](TensorImpl<T>& node) {
    TensorImpl<T>& input = *node.op->inputs[0];
    if (!input.requires_grad) return;
    auto g = input.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (input.data[i] > 0) g[i] += node.grad[i];
  };
  return make_result<T>("relu", x.shape(), std::move(out), {x}, backward);
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = stable_sigmoid(in[i]);
  auto backward = [](TensorImpl<T>& node) {
    TensorImpl<T>& input = *node.op->inputs[0];
    if (!input.requires_grad) return;
    auto g = input.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = node.data[i];
      g[i] += node.grad[i] * s * (T{1} - s);
    }
  };
  return make_result<T>("sigmoid", x.shape(), std::move(out), {x}, backward);
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("softmax expects [N,K], got " + to_string(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * cols;
    T* dst = out.data() + r * cols;
    const T peak = *std::max_element(row, row + cols);
    double total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      dst[c] = std::exp(row[c] - peak);
      total += dst[c];
    }
    for (std::size_t c = 0; c < cols; ++c) dst[c] = static_cast<T>(dst[c] / total);
  }
  auto backward = [rows, cols](TensorImpl<T>& node) {
    TensorImpl<T>& input = *node.op->inputs[0];
    if (!input.requires_grad) return;
    auto g = input.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = node.data.data() + r * cols;
      const T* gy = node.grad.data() + r * cols;
      double dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(gy[c]) * y[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (gy[c] - static_cast<T>(dot));
    }
  };
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, backward);
}

template <typename T>
BasicTensor<T> scale_gradient(const BasicTensor<T>& x, std::type_identity_t<T> factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  auto backward = [factor](TensorImpl<T>& node) {
    TensorImpl<T>& input = *node.op->inputs[0];
    if (!input.requires_grad) return;
    auto g = input.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * node.grad[i];
  };
  return make_result<T>("scale_gradient", x.shape(), std::move(out), {x}, backward);
}

#define MCFFA_INSTANTIATE_OPS(T)                                                                    \
  template BasicTensor<T> elementwise(ElementwiseKind, const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                \
  template BasicTensor<T> reshape(const BasicTensor<T>&, const Shape&);                               \
  template BasicTensor<T> flatten(const BasicTensor<T>&);                                             \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                    \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                             \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                             \
  template BasicTensor<T> scale_gradient(const BasicTensor<T>&, std::type_identity_t<T>);             \
  template T stable_sigmoid(T);

MCFFA_INSTANTIATE_OPS(float)
MCFFA_INSTANTIATE_OPS(double)

}  // namespace mcffa

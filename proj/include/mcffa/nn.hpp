#pragma once

// Layer primitives over NCHW tensors. Every layer is a pure function of its
// input, parameters, mode and (where stochastic) an explicit RNG.

#include <cstddef>
#include <vector>

#include "mcffa/random.hpp"
#include "mcffa/tensor.hpp"

namespace mcffa {

enum class Mode { kTrain, kInfer };

struct Padding {
  enum class Kind { kExplicit, kSame };
  Kind kind = Kind::kSame;
  std::size_t amount = 0;

  static Padding same() { return {Kind::kSame, 0}; }
  static Padding zeros(std::size_t p) { return {Kind::kExplicit, p}; }
};

template <typename T>
struct BasicConv2dParams {
  BasicTensor<T> weight;  // [out, in / groups, k, k]
  BasicTensor<T> bias;    // [out]; may be undefined for a bias-free conv
  std::size_t stride = 1;
  std::size_t dilation = 1;
  Padding padding = Padding::same();
  // 1 for a dense conv, in_channels for depthwise.
  std::size_t groups = 1;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1) * groups; }
  std::size_t kernel() const { return weight.dim(2); }
  // SAME resolves to dilation * (kernel - 1) / 2.
  std::size_t resolved_padding() const;
};

using Conv2dParams = BasicConv2dParams<float>;

// floor((extent + 2p - d(k-1) - 1) / s) + 1, or 0 when the window does not fit.
std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride, std::size_t dilation,
                               std::size_t padding);

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicConv2dParams<T>& p);

// Six-nested-loop reference convolution with the same per-output summation
// order as conv2d. Forward only; used as an oracle.
template <typename T>
BasicTensor<T> conv2d_reference(const BasicTensor<T>& x, const BasicConv2dParams<T>& p);

// Depthwise pass (groups == in_channels) followed by a 1x1 pointwise pass.
template <typename T>
BasicTensor<T> separable_conv2d(const BasicTensor<T>& x, const BasicConv2dParams<T>& depthwise,
                                const BasicConv2dParams<T>& pointwise);

// x:[N,Din] * W:[Din,Dout] + b:[Dout].
template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

// [N,C,H,W] -> [N,C], the mean of every channel plane.
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

template <typename T>
struct BasicBatchNormState {
  BasicTensor<T> gamma;         // [C], trainable
  BasicTensor<T> beta;          // [C], trainable
  BasicTensor<T> running_mean;  // [C]
  BasicTensor<T> running_var;   // [C]
  T momentum = T(0.9);
  T eps = T(1e-5);

  static BasicBatchNormState create(std::size_t channels);
  std::size_t channels() const { return gamma.numel(); }
};

using BatchNormState = BasicBatchNormState<float>;

// Train mode normalises with batch statistics over (N,H,W) and updates the
// running statistics as running = momentum * running + (1 - momentum) * batch.
// Infer mode uses the running statistics. Accepts [N,C,H,W] or [N,C].
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& x, BasicBatchNormState<T>& state, Mode mode);

// Inverted dropout: zero with probability `rate`, survivors scaled by
// 1 / (1 - rate). Identity in infer mode or at rate 0.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Mode mode, Rng& rng);

// Uniform(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
template <typename T>
void he_uniform_init(BasicTensor<T>& weight, std::size_t fan_in, Rng& rng);

template <typename T = float>
BasicConv2dParams<T> make_conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Rng& rng,
                               std::size_t stride = 1, std::size_t dilation = 1, std::size_t groups = 1);

}  // namespace mcffa

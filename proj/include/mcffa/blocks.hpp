#pragma once

// Model building blocks: the multi-scale dilated residual module, SE channel
// attention, configurable mini-backbones and the three-branch fusion model.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mcffa/errors.hpp"
#include "mcffa/nn.hpp"
#include "mcffa/random.hpp"
#include "mcffa/tensor.hpp"

namespace mcffa {

// ---------------------------------------------------------------- parameters

template <typename T>
struct BasicNamedTensor {
  std::string name;
  BasicTensor<T> tensor;
  bool trainable = true;  // requires_grad of the tensor; false when frozen
  bool buffer = false;    // running statistics; never optimized
};

template <typename T>
using BasicParameterList = std::vector<BasicNamedTensor<T>>;

using NamedTensor = BasicNamedTensor<float>;
using ParameterList = BasicParameterList<float>;

// Copies values between two parameter lists of identical names and shapes.
template <typename To, typename From>
void assign_parameters(const BasicParameterList<To>& dst, const BasicParameterList<From>& src) {
  if (dst.size() != src.size()) throw ShapeError("assign_parameters: parameter count differs");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].tensor.shape() != src[i].tensor.shape()) {
      throw ShapeError("assign_parameters: mismatch at " + src[i].name);
    }
    BasicTensor<To> target = dst[i].tensor;
    auto out = target.mutable_data();
    auto in = src[i].tensor.data();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<To>(in[k]);
  }
}

// --------------------------------------------------------------------- MSDRC

struct MsdrcBranchSpec {
  std::size_t kernel;
  std::size_t dilation1;
  std::size_t dilation2;
};

inline constexpr std::array<MsdrcBranchSpec, 4> kMsdrcBranches{{{3, 3, 6}, {5, 5, 8}, {7, 7, 10}, {9, 9, 12}}};

struct MsdrcConfig {
  std::size_t channels = 0;
  std::size_t branch_width = 0;  // 0 means `channels`

  std::size_t width() const { return branch_width == 0 ? channels : branch_width; }
};

template <typename T>
struct BasicMsdrcParams {
  std::array<BasicConv2dParams<T>, 4> first;
  std::array<BasicConv2dParams<T>, 4> second;
  BasicConv2dParams<T> projection;  // 1x1, 4 * width -> channels

  static BasicMsdrcParams create(const MsdrcConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, BasicParameterList<T>& out) const;
};

// Per branch: conv(k, d1) -> ReLU -> conv(k, d2) -> ReLU, all SAME padded.
// y = x + ReLU(conv1x1(concat(branches))).
template <typename T>
BasicTensor<T> msdrc_forward(const BasicTensor<T>& x, const MsdrcConfig& cfg, const BasicMsdrcParams<T>& p);

// Output of one branch alone, before concatenation.
template <typename T>
BasicTensor<T> msdrc_branch(const BasicTensor<T>& x, const BasicMsdrcParams<T>& p, std::size_t branch);

// ------------------------------------------------------------------------ SE

struct SeConfig {
  std::size_t channels = 0;
  std::size_t ratio = 16;

  std::size_t hidden() const { return std::max<std::size_t>(channels / (ratio == 0 ? 1 : ratio), 1); }
};

template <typename T>
struct BasicSeParams {
  BasicTensor<T> w1;  // [C, C/R]
  BasicTensor<T> b1;  // [C/R]
  BasicTensor<T> w2;  // [C/R, C]
  BasicTensor<T> b2;  // [C]

  static BasicSeParams create(const SeConfig& cfg, Rng& rng);
  std::size_t channels() const { return w1.dim(0); }
  void collect(const std::string& prefix, BasicParameterList<T>& out) const;
};

// Channel weights S = sigmoid(W2 relu(W1 GAP(u) + b1) + b2), shape [N,C].
template <typename T>
BasicTensor<T> se_weights(const BasicTensor<T>& u, const BasicSeParams<T>& p);

// u scaled per channel by se_weights(u).
template <typename T>
BasicTensor<T> se_forward(const BasicTensor<T>& u, const BasicSeParams<T>& p);

// ------------------------------------------------------------------ backbone

enum class ConvStyle { kPlain, kSeparable };

struct BackboneBlockConfig {
  std::size_t out_channels = 8;
  std::size_t stride = 1;
  ConvStyle style = ConvStyle::kPlain;
  bool trainable = true;
};

struct MiniBackboneConfig {
  std::string id;
  std::size_t in_channels = 3;
  std::size_t stem_channels = 0;  // 0 disables the stem
  bool stem_trainable = true;
  std::vector<BackboneBlockConfig> blocks;

  std::size_t out_channels() const;
  std::size_t total_stride() const;
  void validate() const;
};

template <typename T>
struct BasicConvBnBlock {
  ConvStyle style = ConvStyle::kPlain;
  BasicConv2dParams<T> conv;       // 3x3 plain, or 3x3 depthwise
  BasicBatchNormState<T> bn;
  BasicConv2dParams<T> pointwise;  // separable only
  BasicBatchNormState<T> bn_pointwise;

  // A block is frozen when its weights do not require grad.
  bool trainable() const { return conv.weight.requires_grad(); }
  void set_trainable(bool value);

  void collect(const std::string& prefix, BasicParameterList<T>& out) const;
};

template <typename T>
struct BasicBackboneParams {
  bool has_stem = false;
  BasicConvBnBlock<T> stem;
  std::vector<BasicConvBnBlock<T>> blocks;

  static BasicBackboneParams create(const MiniBackboneConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, BasicParameterList<T>& out) const;
};

// Frozen blocks run batchnorm with running statistics.
template <typename T>
BasicTensor<T> backbone_forward(const BasicTensor<T>& img, const MiniBackboneConfig& cfg,
                                BasicBackboneParams<T>& params, Mode mode);

// ---------------------------------------------------------------------- model

struct HeadConfig {
  std::vector<std::size_t> widths{256, 256, 128};
  std::vector<double> dropout{0.4, 0.4, 0.2};
};

struct ModelConfig {
  std::array<MiniBackboneConfig, 3> branches;
  std::size_t msdrc_branch_width = 0;  // 0 means each branch's channel count
  std::size_t se_ratio = 16;
  HeadConfig head;
  std::size_t classes = 4;
  std::size_t input_size = 224;

  void validate() const;
  std::size_t feature_width() const;
  MsdrcConfig msdrc(std::size_t branch) const;
  SeConfig se(std::size_t branch) const;
};

// Coverage notes for branches whose final feature map is smaller than the
// widest dilated window, 2 * max_dilation * (k - 1) + 1.
std::vector<std::string> coverage_warnings(const ModelConfig& cfg);

template <typename T>
struct BasicSubNetwork {
  BasicBackboneParams<T> backbone;
  BasicMsdrcParams<T> msdrc;
  BasicSeParams<T> se;
};

template <typename T>
struct BasicDenseLayer {
  BasicTensor<T> weight;  // [in, out]
  BasicTensor<T> bias;    // [out]
};

template <typename T>
class BasicMcffaModel {
 public:
  BasicMcffaModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // Concatenated GAP features of the three sub-networks, [N, feature_width].
  BasicTensor<T> features(const BasicTensor<T>& img, Mode mode);
  // Output of one sub-network's backbone, before MSDRC and SE.
  BasicTensor<T> backbone_output(std::size_t branch, const BasicTensor<T>& img, Mode mode);
  // Class probabilities [N, classes]. `rng` drives dropout in train mode.
  BasicTensor<T> forward(const BasicTensor<T>& img, Mode mode, Rng& rng);
  BasicTensor<T> predict(const BasicTensor<T>& img);

  // Every tensor with a stable dotted name, in a fixed order.
  BasicParameterList<T> parameters() const;
  // Applies a trainable flag to every parameter whose name starts with prefix.
  void set_trainable(const std::string& prefix, bool trainable);

 private:
  ModelConfig cfg_;
  std::array<BasicSubNetwork<T>, 3> nets_;
  std::vector<BasicDenseLayer<T>> head_;
  BasicDenseLayer<T> out_;
};

using MsdrcParams = BasicMsdrcParams<float>;
using SeParams = BasicSeParams<float>;
using BackboneParams = BasicBackboneParams<float>;
using McffaModel = BasicMcffaModel<float>;

// ------------------------------------------------------------------- registry

// Backbone presets "A".."H".
std::vector<std::string> backbone_ids();
MiniBackboneConfig backbone_preset(const std::string& id);

// The seven backbone combinations of the variant sweep, e.g. "A,B,C".
std::vector<std::string> sweep_variants();

// Full-size configuration: backbones A, B, C, 224x224 input, head 256/256/128.
ModelConfig paper_config();
// Desk-scale configuration: three one-block 3->8 backbones, 16x16 input, head 8/8/8
// without dropout.
ModelConfig micro_config();

// Parses "X,Y,Z" into a config sharing every non-backbone setting of `base`.
ModelConfig variant_assemble(const std::string& spec, const ModelConfig& base);
ModelConfig variant_assemble(const std::string& spec);

}  // namespace mcffa

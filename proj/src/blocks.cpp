#include "mcffa/blocks.hpp"

#include <map>
#include <set>
#include <sstream>

#include "mcffa/errors.hpp"
#include "mcffa/ops.hpp"

namespace mcffa {

namespace {

template <typename T>
void push(BasicParameterList<T>& out, std::string name, const BasicTensor<T>& t, bool buffer = false) {
  if (!t.defined()) return;
  out.push_back({std::move(name), t, !buffer && t.requires_grad(), buffer});
}

template <typename T>
void push_conv(BasicParameterList<T>& out, const std::string& prefix, const BasicConv2dParams<T>& c) {
  push(out, prefix + ".weight", c.weight);
  push(out, prefix + ".bias", c.bias);
}

template <typename T>
void push_bn(BasicParameterList<T>& out, const std::string& prefix, const BasicBatchNormState<T>& bn) {
  push(out, prefix + ".gamma", bn.gamma);
  push(out, prefix + ".beta", bn.beta);
  push(out, prefix + ".running_mean", bn.running_mean, true);
  push(out, prefix + ".running_var", bn.running_var, true);
}

template <typename T>
BasicTensor<T> he_matrix(std::size_t in, std::size_t out, Rng& rng) {
  BasicTensor<T> w = BasicTensor<T>::zeros({in, out}, true);
  he_uniform_init(w, in, rng);
  return w;
}

std::string prefixed(const std::string& what, std::size_t branch) {
  return "sub-network " + std::to_string(branch) + ": " + what;
}

}  // namespace

// --------------------------------------------------------------------- MSDRC

template <typename T>
BasicMsdrcParams<T> BasicMsdrcParams<T>::create(const MsdrcConfig& cfg, Rng& rng) {
  if (cfg.channels == 0) throw ConfigError("msdrc channels must be positive");
  BasicMsdrcParams<T> p;
  const std::size_t w = cfg.width();
  for (std::size_t b = 0; b < kMsdrcBranches.size(); ++b) {
    const auto& spec = kMsdrcBranches[b];
    p.first[b] = make_conv<T>(cfg.channels, w, spec.kernel, rng, 1, spec.dilation1);
    p.second[b] = make_conv<T>(w, w, spec.kernel, rng, 1, spec.dilation2);
  }
  p.projection = make_conv<T>(4 * w, cfg.channels, 1, rng);
  return p;
}

template <typename T>
void BasicMsdrcParams<T>::collect(const std::string& prefix, BasicParameterList<T>& out) const {
  for (std::size_t b = 0; b < 4; ++b) {
    push_conv(out, prefix + ".b" + std::to_string(b) + ".conv1", first[b]);
    push_conv(out, prefix + ".b" + std::to_string(b) + ".conv2", second[b]);
  }
  push_conv(out, prefix + ".proj", projection);
}

template <typename T>
BasicTensor<T> msdrc_branch(const BasicTensor<T>& x, const BasicMsdrcParams<T>& p, std::size_t branch) {
  if (branch >= 4) throw ConfigError("msdrc has four branches");
  return relu(conv2d(relu(conv2d(x, p.first[branch])), p.second[branch]));
}

template <typename T>
BasicTensor<T> msdrc_forward(const BasicTensor<T>& x, const MsdrcConfig& cfg, const BasicMsdrcParams<T>& p) {
  if (x.rank() != 4 || x.dim(1) != cfg.channels || p.projection.out_channels() != cfg.channels) {
    throw ShapeError("msdrc expects [N," + std::to_string(cfg.channels) + ",H,W] input, got " +
                     to_string(x.shape()));
  }
  std::vector<BasicTensor<T>> parts;
  for (std::size_t b = 0; b < 4; ++b) parts.push_back(msdrc_branch(x, p, b));
  return add(x, relu(conv2d(concat(parts, 1), p.projection)));
}

// ------------------------------------------------------------------------ SE

template <typename T>
BasicSeParams<T> BasicSeParams<T>::create(const SeConfig& cfg, Rng& rng) {
  if (cfg.channels == 0) throw ConfigError("se channels must be positive");
  if (cfg.ratio == 0) throw ConfigError("se ratio must be positive");
  const std::size_t h = cfg.hidden();
  BasicSeParams<T> p;
  p.w1 = he_matrix<T>(cfg.channels, h, rng);
  p.b1 = BasicTensor<T>::zeros({h}, true);
  p.w2 = he_matrix<T>(h, cfg.channels, rng);
  p.b2 = BasicTensor<T>::zeros({cfg.channels}, true);
  return p;
}

template <typename T>
void BasicSeParams<T>::collect(const std::string& prefix, BasicParameterList<T>& out) const {
  push(out, prefix + ".fc1.weight", w1);
  push(out, prefix + ".fc1.bias", b1);
  push(out, prefix + ".fc2.weight", w2);
  push(out, prefix + ".fc2.bias", b2);
}

template <typename T>
BasicTensor<T> se_weights(const BasicTensor<T>& u, const BasicSeParams<T>& p) {
  if (u.rank() != 4 || u.dim(1) != p.channels()) {
    throw ShapeError("se block expects [N," + std::to_string(p.channels()) + ",H,W] input, got " +
                     to_string(u.shape()));
  }
  BasicTensor<T> z = global_avg_pool(u);
  return sigmoid(dense(relu(dense(z, p.w1, p.b1)), p.w2, p.b2));
}

template <typename T>
BasicTensor<T> se_forward(const BasicTensor<T>& u, const BasicSeParams<T>& p) {
  BasicTensor<T> s = se_weights(u, p);
  return mul(u, reshape(s, {u.dim(0), u.dim(1), 1, 1}));
}

// ------------------------------------------------------------------ backbone

std::size_t MiniBackboneConfig::out_channels() const {
  if (!blocks.empty()) return blocks.back().out_channels;
  return stem_channels != 0 ? stem_channels : in_channels;
}

std::size_t MiniBackboneConfig::total_stride() const {
  std::size_t s = 1;
  for (const auto& b : blocks) s *= b.stride;
  return s;
}

void MiniBackboneConfig::validate() const {
  if (in_channels != 3) throw ConfigError("backbone " + id + ": input channels must be 3");
  if (blocks.empty()) throw ConfigError("backbone " + id + ": needs at least one block");
  for (const auto& b : blocks) {
    if (b.out_channels == 0) throw ConfigError("backbone " + id + ": block width must be positive");
    if (b.stride == 0) throw ConfigError("backbone " + id + ": stride must be positive");
  }
}

template <typename T>
void BasicConvBnBlock<T>::set_trainable(bool value) {
  for (auto* t : {&conv.weight, &conv.bias, &bn.gamma, &bn.beta, &pointwise.weight, &pointwise.bias,
                  &bn_pointwise.gamma, &bn_pointwise.beta}) {
    if (t->defined()) t->set_requires_grad(value);
  }
}

template <typename T>
void BasicConvBnBlock<T>::collect(const std::string& prefix, BasicParameterList<T>& out) const {
  push_conv(out, prefix + ".conv", conv);
  push_bn(out, prefix + ".bn", bn);
  if (style == ConvStyle::kSeparable) {
    push_conv(out, prefix + ".pointwise", pointwise);
    push_bn(out, prefix + ".bn_pointwise", bn_pointwise);
  }
}

namespace {

template <typename T>
BasicConvBnBlock<T> make_block(std::size_t in, std::size_t out, std::size_t stride, ConvStyle style, bool trainable,
                               Rng& rng) {
  BasicConvBnBlock<T> b;
  b.style = style;
  if (style == ConvStyle::kPlain) {
    b.conv = make_conv<T>(in, out, 3, rng, stride);
    b.conv.bias = {};
    b.bn = BasicBatchNormState<T>::create(out);
  } else {
    b.conv = make_conv<T>(in, in, 3, rng, stride, 1, in);
    b.conv.bias = {};
    b.bn = BasicBatchNormState<T>::create(in);
    b.pointwise = make_conv<T>(in, out, 1, rng);
    b.pointwise.bias = {};
    b.bn_pointwise = BasicBatchNormState<T>::create(out);
  }
  b.set_trainable(trainable);
  return b;
}

template <typename T>
BasicTensor<T> block_forward(const BasicTensor<T>& x, BasicConvBnBlock<T>& b, Mode mode) {
  const Mode bn_mode = b.trainable() ? mode : Mode::kInfer;
  BasicTensor<T> y = relu(batchnorm(conv2d(x, b.conv), b.bn, bn_mode));
  if (b.style == ConvStyle::kSeparable) y = relu(batchnorm(conv2d(y, b.pointwise), b.bn_pointwise, bn_mode));
  return y;
}

}  // namespace

template <typename T>
BasicBackboneParams<T> BasicBackboneParams<T>::create(const MiniBackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  BasicBackboneParams<T> p;
  std::size_t in = cfg.in_channels;
  if (cfg.stem_channels != 0) {
    p.has_stem = true;
    p.stem = make_block<T>(in, cfg.stem_channels, 1, ConvStyle::kPlain, cfg.stem_trainable, rng);
    in = cfg.stem_channels;
  }
  for (const auto& b : cfg.blocks) {
    p.blocks.push_back(make_block<T>(in, b.out_channels, b.stride, b.style, b.trainable, rng));
    in = b.out_channels;
  }
  return p;
}

template <typename T>
void BasicBackboneParams<T>::collect(const std::string& prefix, BasicParameterList<T>& out) const {
  if (has_stem) stem.collect(prefix + ".stem", out);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".block" + std::to_string(i), out);
}

template <typename T>
BasicTensor<T> backbone_forward(const BasicTensor<T>& img, const MiniBackboneConfig& cfg,
                                BasicBackboneParams<T>& params, Mode mode) {
  if (img.rank() != 4 || img.dim(1) != cfg.in_channels) {
    throw ShapeError("backbone " + cfg.id + " expects [N,3,H,W] input, got " + to_string(img.shape()));
  }
  const std::size_t s = cfg.total_stride();
  if (img.dim(2) < s || img.dim(3) < s) {
    throw ShapeError("backbone " + cfg.id + ": input " + std::to_string(img.dim(2)) + "x" +
                     std::to_string(img.dim(3)) + " is smaller than the stride product " + std::to_string(s));
  }
  BasicTensor<T> y = img;
  if (params.has_stem) y = block_forward(y, params.stem, mode);
  for (auto& b : params.blocks) y = block_forward(y, b, mode);
  return y;
}

// ---------------------------------------------------------------------- model

void ModelConfig::validate() const {
  for (const auto& b : branches) b.validate();
  if (classes < 2) throw ConfigError("class count must be at least 2");
  if (head.widths.size() != head.dropout.size()) throw ConfigError("head widths and dropout rates differ in count");
  for (std::size_t w : head.widths)
    if (w == 0) throw ConfigError("head widths must be positive");
  for (double r : head.dropout)
    if (!(r >= 0 && r < 1)) throw ConfigError("dropout rates must lie in [0,1)");
  if (se_ratio == 0) throw ConfigError("se ratio must be positive");
  if (input_size == 0) throw ConfigError("input size must be positive");
  for (const auto& b : branches) {
    if (input_size < b.total_stride()) {
      throw ConfigError("input size " + std::to_string(input_size) + " too small for backbone " + b.id);
    }
  }
}

std::size_t ModelConfig::feature_width() const {
  std::size_t w = 0;
  for (const auto& b : branches) w += b.out_channels();
  return w;
}

MsdrcConfig ModelConfig::msdrc(std::size_t branch) const {
  return {branches.at(branch).out_channels(), msdrc_branch_width};
}

SeConfig ModelConfig::se(std::size_t branch) const { return {branches.at(branch).out_channels(), se_ratio}; }

std::vector<std::string> coverage_warnings(const ModelConfig& cfg) {
  std::size_t need = 0;
  for (const auto& spec : kMsdrcBranches) {
    need = std::max(need, 2 * std::max(spec.dilation1, spec.dilation2) * (spec.kernel - 1) + 1);
  }
  std::vector<std::string> notes;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& b = cfg.branches[i];
    const std::size_t s = b.total_stride();
    const std::size_t extent = (cfg.input_size + s - 1) / s;
    if (extent < need) {
      std::ostringstream os;
      os << "sub-network " << i << " (" << b.id << "): feature map " << extent << "x" << extent
         << " is smaller than the widest dilated window " << need;
      notes.push_back(os.str());
    }
  }
  return notes;
}

template <typename T>
BasicMcffaModel<T>::BasicMcffaModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  for (std::size_t i = 0; i < 3; ++i) {
    Rng rng = make_rng(seed, "init.branch", i);
    nets_[i].backbone = BasicBackboneParams<T>::create(cfg_.branches[i], rng);
    nets_[i].msdrc = BasicMsdrcParams<T>::create(cfg_.msdrc(i), rng);
    nets_[i].se = BasicSeParams<T>::create(cfg_.se(i), rng);
  }
  Rng rng = make_rng(seed, "init.head");
  std::size_t in = cfg_.feature_width();
  for (std::size_t w : cfg_.head.widths) {
    head_.push_back({he_matrix<T>(in, w, rng), BasicTensor<T>::zeros({w}, true)});
    in = w;
  }
  out_ = {he_matrix<T>(in, cfg_.classes, rng), BasicTensor<T>::zeros({cfg_.classes}, true)};
}

template <typename T>
BasicTensor<T> BasicMcffaModel<T>::features(const BasicTensor<T>& img, Mode mode) {
  std::vector<BasicTensor<T>> parts;
  for (std::size_t i = 0; i < 3; ++i) {
    try {
      BasicTensor<T> f = backbone_forward(img, cfg_.branches[i], nets_[i].backbone, mode);
      f = msdrc_forward(f, cfg_.msdrc(i), nets_[i].msdrc);
      f = se_forward(f, nets_[i].se);
      parts.push_back(global_avg_pool(f));
    } catch (const ShapeError& e) {
      throw ShapeError(prefixed(e.what(), i));
    }
  }
  return concat(parts, 1);
}

template <typename T>
BasicTensor<T> BasicMcffaModel<T>::backbone_output(std::size_t branch, const BasicTensor<T>& img, Mode mode) {
  if (branch >= 3) throw ConfigError("sub-network index " + std::to_string(branch) + " out of range");
  try {
    return backbone_forward(img, cfg_.branches[branch], nets_[branch].backbone, mode);
  } catch (const ShapeError& e) {
    throw ShapeError(prefixed(e.what(), branch));
  }
}

template <typename T>
BasicTensor<T> BasicMcffaModel<T>::forward(const BasicTensor<T>& img, Mode mode, Rng& rng) {
  BasicTensor<T> h = features(img, mode);
  for (std::size_t i = 0; i < head_.size(); ++i) {
    h = dropout(relu(dense(h, head_[i].weight, head_[i].bias)), cfg_.head.dropout[i], mode, rng);
  }
  return softmax(dense(h, out_.weight, out_.bias));
}

template <typename T>
BasicTensor<T> BasicMcffaModel<T>::predict(const BasicTensor<T>& img) {
  Rng unused(0);
  return forward(img, Mode::kInfer, unused);
}

template <typename T>
BasicParameterList<T> BasicMcffaModel<T>::parameters() const {
  BasicParameterList<T> out;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = "branch" + std::to_string(i);
    nets_[i].backbone.collect(p + ".backbone", out);
    nets_[i].msdrc.collect(p + ".msdrc", out);
    nets_[i].se.collect(p + ".se", out);
  }
  for (std::size_t i = 0; i < head_.size(); ++i) {
    push(out, "head.fc" + std::to_string(i) + ".weight", head_[i].weight);
    push(out, "head.fc" + std::to_string(i) + ".bias", head_[i].bias);
  }
  push(out, "head.out.weight", out_.weight);
  push(out, "head.out.bias", out_.bias);
  return out;
}

template <typename T>
void BasicMcffaModel<T>::set_trainable(const std::string& prefix, bool trainable) {
  // Backbone blocks switch as a unit so their batchnorm mode follows.
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string base = "branch" + std::to_string(i) + ".backbone";
    auto& bb = nets_[i].backbone;
    auto touches = [&](const std::string& block) {
      return block.rfind(prefix, 0) == 0 || prefix.rfind(block + ".", 0) == 0 || prefix == block;
    };
    if (bb.has_stem && touches(base + ".stem")) bb.stem.set_trainable(trainable);
    for (std::size_t b = 0; b < bb.blocks.size(); ++b) {
      if (touches(base + ".block" + std::to_string(b))) bb.blocks[b].set_trainable(trainable);
    }
  }
  for (auto& p : parameters()) {
    if (!p.buffer && p.name.rfind(prefix, 0) == 0) p.tensor.set_requires_grad(trainable);
  }
}

// ------------------------------------------------------------------- registry

namespace {

BackboneBlockConfig plain(std::size_t c, std::size_t s = 2) { return {c, s, ConvStyle::kPlain, true}; }
BackboneBlockConfig sep(std::size_t c, std::size_t s = 2) { return {c, s, ConvStyle::kSeparable, true}; }

const std::map<std::string, std::vector<BackboneBlockConfig>>& registry() {
  static const std::map<std::string, std::vector<BackboneBlockConfig>> r{
      {"A", {sep(16), sep(16), sep(16)}},
      {"B", {plain(12), plain(16), plain(24), plain(24, 1)}},
      {"C", {plain(16), sep(24), plain(32)}},
      {"D", {plain(16), plain(16), plain(16)}},
      {"E", {plain(12), plain(20), plain(20)}},
      {"F", {plain(16), plain(24), plain(24), plain(24, 1)}},
      {"G", {sep(16), sep(24), sep(24)}},
      {"H", {plain(16), sep(16), plain(24)}},
  };
  return r;
}

}  // namespace

std::vector<std::string> backbone_ids() {
  std::vector<std::string> ids;
  for (const auto& [id, blocks] : registry()) ids.push_back(id);
  return ids;
}

MiniBackboneConfig backbone_preset(const std::string& id) {
  auto it = registry().find(id);
  if (it == registry().end()) throw ConfigError("unknown backbone id '" + id + "'");
  MiniBackboneConfig cfg;
  cfg.id = id;
  cfg.stem_channels = 8;
  cfg.blocks = it->second;
  return cfg;
}

std::vector<std::string> sweep_variants() { return {"A,E,G", "A,E,H", "A,B,F", "A,B,D", "A,B,E", "A,C,E", "A,B,C"}; }

ModelConfig paper_config() { return variant_assemble("A,B,C", ModelConfig{}); }

ModelConfig micro_config() {
  ModelConfig cfg;
  const ConvStyle styles[3] = {ConvStyle::kPlain, ConvStyle::kSeparable, ConvStyle::kPlain};
  for (std::size_t i = 0; i < 3; ++i) {
    cfg.branches[i].id = "micro" + std::to_string(i);
    cfg.branches[i].stem_channels = 0;
    cfg.branches[i].blocks = {{8, 2, styles[i], true}};
  }
  // Third branch differs from the first by a stem.
  cfg.branches[2].stem_channels = 4;
  cfg.input_size = 16;
  cfg.se_ratio = 2;
  cfg.head.widths = {8, 8, 8};
  cfg.head.dropout = {0, 0, 0};
  return cfg;
}

ModelConfig variant_assemble(const std::string& spec, const ModelConfig& base) {
  std::vector<std::string> ids;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    ids.push_back(b == std::string::npos ? std::string{} : item.substr(b, e - b + 1));
  }
  if (ids.size() != 3) throw ConfigError("variant '" + spec + "' must name exactly three backbones");
  if (std::set<std::string>(ids.begin(), ids.end()).size() != 3) {
    throw ConfigError("variant '" + spec + "' repeats a backbone id");
  }
  ModelConfig cfg = base;
  for (std::size_t i = 0; i < 3; ++i) cfg.branches[i] = backbone_preset(ids[i]);
  cfg.validate();
  return cfg;
}

ModelConfig variant_assemble(const std::string& spec) { return variant_assemble(spec, ModelConfig{}); }

#define MCFFA_INSTANTIATE_BLOCKS(T)                                                                         \
  template struct BasicMsdrcParams<T>;                                                                       \
  template struct BasicSeParams<T>;                                                                          \
  template struct BasicConvBnBlock<T>;                                                                       \
  template struct BasicBackboneParams<T>;                                                                    \
  template class BasicMcffaModel<T>;                                                                         \
  template BasicTensor<T> msdrc_forward(const BasicTensor<T>&, const MsdrcConfig&, const BasicMsdrcParams<T>&); \
  template BasicTensor<T> msdrc_branch(const BasicTensor<T>&, const BasicMsdrcParams<T>&, std::size_t);      \
  template BasicTensor<T> se_weights(const BasicTensor<T>&, const BasicSeParams<T>&);                        \
  template BasicTensor<T> se_forward(const BasicTensor<T>&, const BasicSeParams<T>&);                        \
  template BasicTensor<T> backbone_forward(const BasicTensor<T>&, const MiniBackboneConfig&,                 \
                                           BasicBackboneParams<T>&, Mode);

MCFFA_INSTANTIATE_BLOCKS(float)
MCFFA_INSTANTIATE_BLOCKS(double)

}  // namespace mcffa

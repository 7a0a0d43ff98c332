#include "mcffa/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "mcffa/errors.hpp"

namespace mcffa {

// -------------------------------------------------------------------- labels

namespace {

constexpr const char* kHeader = "image_id,healthy,multiple_diseases,rust,scab";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::vector<LabelRow> parse_labels(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("label file is empty");
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kHeader) throw DataError("label header must be '" + std::string(kHeader) + "', got '" + line + "'");
  std::vector<LabelRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 5) throw DataError("line " + std::to_string(line_no) + ": expected 5 fields");
    if (f[0].empty()) throw DataError("line " + std::to_string(line_no) + ": empty image_id");
    int sum = 0, label = -1;
    for (int c = 0; c < 4; ++c) {
      const std::string& v = f[c + 1];
      int bit;
      if (v == "0" || v == "0.0") {
        bit = 0;
      } else if (v == "1" || v == "1.0") {
        bit = 1;
      } else {
        throw DataError("line " + std::to_string(line_no) + ": label value '" + v + "' is not 0 or 1");
      }
      sum += bit;
      if (bit) label = c;
    }
    if (sum != 1) {
      throw DataError("line " + std::to_string(line_no) + ": one-hot row sums to " + std::to_string(sum) +
                      " (image " + f[0] + ")");
    }
    rows.push_back({f[0], label});
  }
  return rows;
}

std::vector<LabelRow> read_labels(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open label file " + csv_path.string());
  try {
    return parse_labels(in);
  } catch (const DataError& e) {
    throw DataError(csv_path.string() + ": " + e.what());
  }
}

void write_labels(const std::filesystem::path& csv_path, const std::vector<LabelRow>& rows) {
  std::ofstream out(csv_path);
  if (!out) throw DataError("cannot write " + csv_path.string());
  out << kHeader << '\n';
  for (const auto& r : rows) {
    out << r.image_id;
    for (int c = 0; c < 4; ++c) out << ',' << (r.label == c ? 1 : 0);
    out << '\n';
  }
}

// ------------------------------------------------------------------- samples

Tensor image_to_tensor(const Image& img) {
  return Tensor::from({img.channels, img.height, img.width}, img.pixels);
}

Image tensor_to_image(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("image tensor must be [C,H,W], got " + to_string(t.shape()));
  Image img;
  img.channels = t.dim(0);
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.pixels.assign(t.data().begin(), t.data().end());
  return img;
}

std::vector<Sample> load_dataset(const std::filesystem::path& csv_path, const std::filesystem::path& image_dir,
                                 std::size_t resolution) {
  if (resolution == 0) throw ConfigError("resolution must be positive");
  const auto rows = read_labels(csv_path);
  std::vector<Sample> samples;
  samples.reserve(rows.size());
  for (const auto& r : rows) {
    const auto path = image_dir / (r.image_id + ".ppm");
    if (!std::filesystem::exists(path)) throw DataError("missing image file: " + path.string());
    Image img = read_image(path);
    samples.push_back({r.image_id, image_to_tensor(resize_bilinear(img, resolution, resolution)), r.label});
  }
  return samples;
}

std::vector<Sample> make_synthetic(std::size_t per_class, std::size_t resolution, std::uint64_t seed, double noise) {
  if (per_class == 0 || resolution == 0) throw ConfigError("synthetic dataset needs samples and a resolution");
  if (!(noise >= 0 && noise < 0.5)) throw ConfigError("synthetic noise must lie in [0, 0.5)");
  static constexpr double colors[kNumClasses][3] = {
      {0.2, 0.7, 0.2}, {0.7, 0.2, 0.7}, {0.8, 0.5, 0.1}, {0.3, 0.3, 0.8}};
  std::vector<Sample> samples;
  const std::size_t hw = resolution * resolution;
  for (std::size_t i = 0; i < per_class * kNumClasses; ++i) {
    const int label = static_cast<int>(i % kNumClasses);
    Rng rng = make_rng(seed, "synthetic", i);
    std::uniform_real_distribution<double> jitter(-noise, noise);
    std::vector<float> px(3 * hw);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t k = 0; k < hw; ++k) {
        px[c * hw + k] = static_cast<float>(std::clamp(colors[label][c] + jitter(rng), 0.0, 1.0));
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", i);
    samples.push_back({id, Tensor::from({3, resolution, resolution}, std::move(px)), label});
  }
  return samples;
}

void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& csv_path,
                   const std::filesystem::path& image_dir) {
  std::filesystem::create_directories(image_dir);
  std::vector<LabelRow> rows;
  for (const auto& s : samples) {
    write_ppm(image_dir / (s.image_id + ".ppm"), tensor_to_image(s.pixels));
    rows.push_back({s.image_id, s.label});
  }
  write_labels(csv_path, rows);
}

std::vector<int> labels_of(const std::vector<Sample>& samples) {
  std::vector<int> l;
  l.reserve(samples.size());
  for (const auto& s : samples) l.push_back(s.label);
  return l;
}

// ---------------------------------------------------------------- splitting

namespace {

std::map<int, std::vector<std::size_t>> by_class(const std::vector<int>& labels) {
  std::map<int, std::vector<std::size_t>> m;
  for (std::size_t i = 0; i < labels.size(); ++i) m[labels[i]].push_back(i);
  return m;
}

}  // namespace

std::vector<std::size_t> SplitPlan::part(std::size_t p) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] == p) out.push_back(i);
  return out;
}

std::vector<std::size_t> SplitPlan::train_indices() const {
  if (mode == Mode::kHoldout) return part(0);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] != fold_index) out.push_back(i);
  return out;
}

std::vector<std::size_t> SplitPlan::val_indices() const { return part(mode == Mode::kHoldout ? 1 : fold_index); }

SplitPlan make_holdout(const std::vector<int>& labels, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("train fraction must lie in (0,1)");
  if (labels.empty()) throw DataError("cannot split an empty dataset");
  SplitPlan plan;
  plan.mode = SplitPlan::Mode::kHoldout;
  plan.seed = seed;
  plan.train_fraction = train_fraction;
  plan.assignment.assign(labels.size(), 1);

  const auto classes = by_class(labels);
  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(labels.size())));
  struct Quota {
    int label;
    std::size_t take;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [label, idx] : classes) {
    const double q = train_fraction * static_cast<double>(idx.size());
    const auto fl = static_cast<std::size_t>(std::floor(q));
    quotas.push_back({label, fl, q - static_cast<double>(fl)});
    assigned += fl;
  }
  std::vector<std::size_t> order(quotas.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t i = 0; assigned < target && i < order.size(); ++i, ++assigned) ++quotas[order[i]].take;

  for (const auto& q : quotas) {
    std::vector<std::size_t> idx = classes.at(q.label);
    Rng rng = make_rng(seed, "split.holdout", static_cast<std::uint64_t>(q.label));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < q.take; ++i) plan.assignment[idx[i]] = 0;
  }
  return plan;
}

SplitPlan make_kfold(const std::vector<int>& labels, std::size_t k, std::size_t fold_index, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  if (fold_index >= k) throw ConfigError("fold index out of range");
  SplitPlan plan;
  plan.mode = SplitPlan::Mode::kKfold;
  plan.seed = seed;
  plan.k = k;
  plan.fold_index = fold_index;
  plan.assignment.assign(labels.size(), 0);
  std::size_t position = 0;
  for (auto [label, idx] : by_class(labels)) {
    if (idx.size() < k) {
      throw DataError("class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                      " samples, fewer than " + std::to_string(k) + " folds");
    }
    Rng rng = make_rng(seed, "split.kfold", static_cast<std::uint64_t>(label));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx) plan.assignment[i] = position++ % k;
  }
  return plan;
}

// ------------------------------------------------------------- augmentation

AugmentSpec AugmentSpec::identity() {
  AugmentSpec s;
  s.rotation_max_deg = 0;
  s.width_shift_frac = 0;
  s.height_shift_frac = 0;
  s.shear_max_deg = 0;
  s.zoom_lo = s.zoom_hi = 1;
  s.brightness_lo = s.brightness_hi = 1;
  s.hflip = s.vflip = false;
  return s;
}

void AugmentSpec::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(rotation_max_deg) || rotation_max_deg < 0) throw ConfigError("rotation range must be >= 0");
  if (!finite(width_shift_frac) || width_shift_frac < 0) throw ConfigError("width shift must be >= 0");
  if (!finite(height_shift_frac) || height_shift_frac < 0) throw ConfigError("height shift must be >= 0");
  if (!finite(shear_max_deg) || shear_max_deg < 0 || shear_max_deg >= 90) {
    throw ConfigError("shear range must lie in [0,90)");
  }
  if (!(zoom_lo > 0 && zoom_lo <= zoom_hi && finite(zoom_hi))) throw ConfigError("zoom range must satisfy 0 < lo <= hi");
  if (!(brightness_lo >= 0 && brightness_lo <= brightness_hi && finite(brightness_hi))) {
    throw ConfigError("brightness range must satisfy 0 <= lo <= hi");
  }
}

bool Affine::is_identity() const { return m == std::array<double, 6>{1, 0, 0, 0, 1, 0}; }

Affine make_affine(double rotation_deg, double shear_deg, double zoom_x, double zoom_y, double tx, double ty,
                   std::size_t height, std::size_t width) {
  if (rotation_deg == 0 && shear_deg == 0 && zoom_x == 1 && zoom_y == 1 && tx == 0 && ty == 0) return {};
  const double deg = std::numbers::pi / 180.0;
  const double th = rotation_deg * deg, sh = shear_deg * deg;
  // Forward linear part A = R * Sh * Z.
  const double r00 = std::cos(th), r01 = -std::sin(th), r10 = std::sin(th), r11 = std::cos(th);
  const double s00 = 1, s01 = -std::sin(sh), s10 = 0, s11 = std::cos(sh);
  const double rs00 = r00 * s00 + r01 * s10, rs01 = r00 * s01 + r01 * s11;
  const double rs10 = r10 * s00 + r11 * s10, rs11 = r10 * s01 + r11 * s11;
  const double a00 = rs00 * zoom_x, a01 = rs01 * zoom_y, a10 = rs10 * zoom_x, a11 = rs11 * zoom_y;
  const double det = a00 * a11 - a01 * a10;
  if (std::abs(det) < 1e-12) throw ConfigError("degenerate affine transform");
  const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;
  const double cx = (static_cast<double>(width) - 1) / 2, cy = (static_cast<double>(height) - 1) / 2;
  // in = c + A^-1 (out - c - t)
  const double ox = cx + tx, oy = cy + ty;
  Affine a;
  a.m = {i00, i01, cx - i00 * ox - i01 * oy, i10, i11, cy - i10 * ox - i11 * oy};
  return a;
}

Tensor apply_affine(const Tensor& img, const Affine& a) {
  if (img.rank() != 3) throw ShapeError("image tensor must be [C,H,W], got " + to_string(img.shape()));
  if (a.is_identity()) return img.detach().clone();
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  auto src = img.data();
  std::vector<float> out(C * H * W);
  const double maxx = static_cast<double>(W - 1), maxy = static_cast<double>(H - 1);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double sx = std::clamp(a.m[0] * fx + a.m[1] * fy + a.m[2], 0.0, maxx);
      const double sy = std::clamp(a.m[3] * fx + a.m[4] * fy + a.m[5], 0.0, maxy);
      const auto x0 = static_cast<std::size_t>(std::floor(sx)), y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
      const double wx = sx - static_cast<double>(x0), wy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = src.data() + c * H * W;
        const double top = p[y0 * W + x0] * (1 - wx) + p[y0 * W + x1] * wx;
        const double bot = p[y1 * W + x0] * (1 - wx) + p[y1 * W + x1] * wx;
        out[(c * H + y) * W + x] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  return Tensor::from(img.shape(), std::move(out));
}

Tensor hflip(const Tensor& img) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  std::vector<float> out(img.numel());
  auto src = img.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(c * H + y) * W + x] = src[(c * H + y) * W + (W - 1 - x)];
  return Tensor::from(img.shape(), std::move(out));
}

Tensor vflip(const Tensor& img) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  std::vector<float> out(img.numel());
  auto src = img.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(c * H + y) * W + x] = src[(c * H + (H - 1 - y)) * W + x];
  return Tensor::from(img.shape(), std::move(out));
}

Sample augment(const Sample& s, const AugmentSpec& spec, Rng& rng) {
  spec.validate();
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const std::size_t H = s.pixels.dim(1), W = s.pixels.dim(2);
  const double theta = uniform(-spec.rotation_max_deg, spec.rotation_max_deg);
  const double tx = uniform(-spec.width_shift_frac, spec.width_shift_frac) * static_cast<double>(W);
  const double ty = uniform(-spec.height_shift_frac, spec.height_shift_frac) * static_cast<double>(H);
  const double shear = uniform(-spec.shear_max_deg, spec.shear_max_deg);
  const double zx = uniform(spec.zoom_lo, spec.zoom_hi);
  const double zy = uniform(spec.zoom_lo, spec.zoom_hi);
  Tensor out = apply_affine(s.pixels, make_affine(theta, shear, zx, zy, tx, ty, H, W));
  std::bernoulli_distribution coin(0.5);
  if (spec.hflip && coin(rng)) out = hflip(out);
  if (spec.vflip && coin(rng)) out = vflip(out);
  const double b = uniform(spec.brightness_lo, spec.brightness_hi);
  if (b != 1) {
    for (auto& v : out.mutable_data()) v = std::clamp(static_cast<float>(v * b), 0.0f, 1.0f);
  }
  return {s.image_id, out, s.label};
}

// ----------------------------------------------------------------- batching

BatchIterator::BatchIterator(const std::vector<Sample>& samples, std::vector<std::size_t> subset,
                             std::size_t batch_size, bool shuffle, std::uint64_t seed,
                             std::optional<AugmentSpec> augment)
    : samples_(&samples),
      subset_(std::move(subset)),
      batch_size_(batch_size),
      shuffle_(shuffle),
      seed_(seed),
      augment_(std::move(augment)) {
  if (batch_size_ == 0) throw ConfigError("batch size must be at least 1");
  if (subset_.empty()) {
    subset_.resize(samples.size());
    std::iota(subset_.begin(), subset_.end(), std::size_t{0});
  }
  if (subset_.empty()) throw DataError("cannot iterate an empty dataset");
  for (std::size_t i : subset_)
    if (i >= samples.size()) throw DataError("batch subset index out of range");
  if (augment_) augment_->validate();
  start_epoch(0);
}

void BatchIterator::start_epoch(std::size_t epoch) {
  epoch_ = epoch;
  cursor_ = 0;
  order_ = subset_;
  if (shuffle_) {
    Rng rng = make_rng(seed_, "shuffle", epoch);
    std::shuffle(order_.begin(), order_.end(), rng);
  }
}

std::size_t BatchIterator::batch_count() const { return (subset_.size() + batch_size_ - 1) / batch_size_; }

bool BatchIterator::next(Batch& out) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
  const Sample& first = (*samples_)[order_[cursor_]];
  const Shape shape = first.pixels.shape();
  const std::size_t per = first.pixels.numel();
  std::vector<float> data(n * per);
  out.labels.assign(n, 0);
  out.indices.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx = order_[cursor_ + i];
    const Sample& s = (*samples_)[idx];
    if (s.pixels.shape() != shape) throw DataError("samples in one batch differ in shape: " + s.image_id);
    Tensor px = s.pixels;
    if (augment_) {
      Rng rng = make_rng(seed_, "augment", epoch_, idx);
      px = augment(s, *augment_, rng).pixels;
    }
    std::copy(px.data().begin(), px.data().end(), data.begin() + static_cast<std::ptrdiff_t>(i * per));
    out.labels[i] = s.label;
    out.indices[i] = idx;
  }
  cursor_ += n;
  out.images = Tensor::from({n, shape[0], shape[1], shape[2]}, std::move(data));
  return true;
}

}  // namespace mcffa

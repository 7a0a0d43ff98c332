#pragma once

// Label files, samples, stratified splits, augmentation and batching.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "mcffa/image.hpp"
#include "mcffa/random.hpp"
#include "mcffa/tensor.hpp"

namespace mcffa {

inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::array<const char*, kNumClasses> kClassNames{"healthy", "multiple_diseases", "rust", "scab"};

struct LabelRow {
  std::string image_id;
  int label = 0;
};

// Header must be exactly image_id,healthy,multiple_diseases,rust,scab and
// every row one-hot.
std::vector<LabelRow> parse_labels(std::istream& in);
std::vector<LabelRow> read_labels(const std::filesystem::path& csv_path);
void write_labels(const std::filesystem::path& csv_path, const std::vector<LabelRow>& rows);

struct Sample {
  std::string image_id;
  Tensor pixels;  // [3,H,W] in [0,1]
  int label = 0;
};

Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor& t);

// Reads <image_dir>/<image_id>.ppm for every row and resizes to
// resolution x resolution.
std::vector<Sample> load_dataset(const std::filesystem::path& csv_path, const std::filesystem::path& image_dir,
                                 std::size_t resolution);

// Solid-colour images with mild per-pixel noise, one distinct colour per
// class, `per_class` samples each, ids "synth_0000"...
std::vector<Sample> make_synthetic(std::size_t per_class, std::size_t resolution, std::uint64_t seed,
                                   double noise = 0.05);

// Writes <image_dir>/<id>.ppm for every sample plus the label CSV.
void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& csv_path,
                   const std::filesystem::path& image_dir);

// ---------------------------------------------------------------- splitting

struct SplitPlan {
  enum class Mode { kHoldout, kKfold };
  Mode mode = Mode::kHoldout;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  std::size_t k = 0;
  std::size_t fold_index = 0;
  // Holdout: 0 = train, 1 = validation. K-fold: fold number of each sample.
  std::vector<std::size_t> assignment;

  std::vector<std::size_t> part(std::size_t p) const;
  // K-fold: everything outside fold_index. Holdout: part 0.
  std::vector<std::size_t> train_indices() const;
  std::vector<std::size_t> val_indices() const;
};

// Per class, the train count is the largest-remainder share of
// round(fraction * N) so the total is exact.
SplitPlan make_holdout(const std::vector<int>& labels, double train_fraction, std::uint64_t seed);
// Each class is shuffled, classes are concatenated, then position i goes to
// fold i mod k.
SplitPlan make_kfold(const std::vector<int>& labels, std::size_t k, std::size_t fold_index, std::uint64_t seed);

std::vector<int> labels_of(const std::vector<Sample>& samples);

// ------------------------------------------------------------- augmentation

struct AugmentSpec {
  double rotation_max_deg = 40;
  double width_shift_frac = 0.2;
  double height_shift_frac = 0.2;
  double shear_max_deg = 20;
  double zoom_lo = 0.8, zoom_hi = 1.2;
  double brightness_lo = 0.8, brightness_hi = 1.2;
  bool hflip = true;
  bool vflip = true;

  static AugmentSpec identity();
  void validate() const;
};

// Maps output pixel centres to input coordinates:
//   [x_in, y_in] = [[m0 m1 m2], [m3 m4 m5]] * [x_out, y_out, 1].
struct Affine {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};
  bool is_identity() const;
};

// Forward transform about the image centre: translate(tx, ty) * rotate(theta)
// * shear(shear) * scale(zx, zy); returned inverted for sampling.
Affine make_affine(double rotation_deg, double shear_deg, double zoom_x, double zoom_y, double tx, double ty,
                   std::size_t height, std::size_t width);

// Bilinear sampling; coordinates outside the image take the nearest edge.
Tensor apply_affine(const Tensor& img, const Affine& a);
Tensor hflip(const Tensor& img);
Tensor vflip(const Tensor& img);

Sample augment(const Sample& s, const AugmentSpec& spec, Rng& rng);

// ----------------------------------------------------------------- batching

struct Batch {
  Tensor images;  // [N,3,H,W]
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // into the sample list
};

class BatchIterator {
 public:
  // `subset` selects samples (all when empty). With `augment` set, every
  // sample draws its transform from a stream keyed by (seed, epoch, index).
  BatchIterator(const std::vector<Sample>& samples, std::vector<std::size_t> subset, std::size_t batch_size,
                bool shuffle, std::uint64_t seed, std::optional<AugmentSpec> augment = std::nullopt);

  void start_epoch(std::size_t epoch);
  bool next(Batch& out);
  std::size_t batch_count() const;
  std::size_t size() const { return subset_.size(); }
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const std::vector<Sample>* samples_;
  std::vector<std::size_t> subset_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  bool shuffle_;
  std::uint64_t seed_;
  std::optional<AugmentSpec> augment_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
};

}  // namespace mcffa

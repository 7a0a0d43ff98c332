#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mcffa/data.hpp"
#include "mcffa/errors.hpp"
#include "mcffa/image.hpp"

using namespace mcffa;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mcffa_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Image random_image(std::size_t h, std::size_t w, std::mt19937_64& g) {
  Image img;
  img.height = h;
  img.width = w;
  img.pixels.resize(3 * h * w);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& v : img.pixels) v = static_cast<float>(d(g)) / 255.0f;
  return img;
}

std::vector<int> synthetic_labels(std::size_t n, std::uint64_t seed) {
  // Imbalanced four-class mix.
  std::mt19937_64 g(seed);
  std::discrete_distribution<int> d({516, 91, 622, 592});
  std::vector<int> l(n);
  for (auto& v : l) v = d(g);
  return l;
}

}  // namespace

TEST_CASE("ppm decode") {
  std::string bytes = "P6\n# comment\n2 1\n255\n";
  bytes += std::string("\xff\x00\x00\x00\x80\xff", 6);
  Image img = decode_ppm(bytes);
  CHECK(img.width == 2);
  CHECK(img.height == 1);
  CHECK(img.at(0, 0, 0) == 1.0f);
  CHECK(img.at(1, 0, 1) == doctest::Approx(128.0 / 255));
  CHECK(img.at(2, 0, 1) == 1.0f);

  CHECK_THROWS_AS(decode_ppm("P3\n1 1\n255\n1 2 3"), DataError);
  CHECK_THROWS_AS(decode_ppm("GIF89a"), DataError);
  CHECK_THROWS_AS(decode_ppm("P6\n2 x\n255\n"), DataError);
  CHECK_THROWS_AS(decode_ppm("P6\n2 2\n255\nabc"), DataError);
  CHECK_THROWS_AS(decode_ppm("P6\n1 1\n65535\n123456"), DataError);
}

TEST_CASE("ppm file round trip within 1/255") {
  std::mt19937_64 g(1);
  fs::path dir = scratch_dir("ppm");
  Image img = random_image(5, 7, g);
  for (auto& v : img.pixels) v = std::min(1.0f, v + 0.001f);
  write_ppm(dir / "a.ppm", img);
  Image back = read_image(dir / "a.ppm");
  REQUIRE(back.pixels.size() == img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(std::abs(back.pixels[i] - img.pixels[i]) <= 1.0f / 255);
  CHECK_THROWS_AS(read_image(dir / "a.png"), DataError);
  CHECK_THROWS_AS(read_image(dir / "missing.ppm"), DataError);
}

TEST_CASE("bilinear checkerboard upscale") {
  Image img;
  img.height = img.width = 2;
  img.pixels.assign(12, 0);
  for (std::size_t c = 0; c < 3; ++c) img.at(c, 0, 0) = img.at(c, 1, 1) = 1;
  Image up = resize_bilinear(img, 4, 4);
  CHECK(up.at(0, 0, 0) == 1);
  CHECK(up.at(0, 0, 3) == 0);
  CHECK(up.at(0, 3, 0) == 0);
  CHECK(up.at(0, 3, 3) == 1);
  // Source coordinate 0.25 on both axes: .75*.75 + .25*.25.
  CHECK(up.at(0, 1, 1) == doctest::Approx(0.625));
  CHECK(up.at(0, 1, 2) == doctest::Approx(0.375));
  CHECK(up.at(0, 0, 1) == doctest::Approx(0.75));
}

TEST_CASE("label csv parsing") {
  std::istringstream ok("image_id,healthy,multiple_diseases,rust,scab\r\nimg_0,1,0,0,0\r\nimg_1,0,0,0,1\n\n");
  auto rows = parse_labels(ok);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].image_id == "img_0");
  CHECK(rows[0].label == 0);
  CHECK(rows[1].label == 3);

  std::istringstream bad_header("id,healthy,multiple_diseases,rust,scab\n");
  CHECK_THROWS_AS(parse_labels(bad_header), DataError);
  std::istringstream two_hot("image_id,healthy,multiple_diseases,rust,scab\nx,1,0,1,0\n");
  CHECK_THROWS_WITH_AS(parse_labels(two_hot), doctest::Contains("sums to 2"), DataError);
  std::istringstream none("image_id,healthy,multiple_diseases,rust,scab\nx,0,0,0,0\n");
  CHECK_THROWS_AS(parse_labels(none), DataError);
  std::istringstream short_row("image_id,healthy,multiple_diseases,rust,scab\nx,0,1\n");
  CHECK_THROWS_AS(parse_labels(short_row), DataError);
}

TEST_CASE("load_dataset") {
  std::mt19937_64 g(2);
  fs::path dir = scratch_dir("load");
  std::vector<LabelRow> rows;
  for (int i = 0; i < 12; ++i) {
    rows.push_back({"img_" + std::to_string(i), i % 4});
    write_ppm(dir / (rows.back().image_id + ".ppm"), random_image(6 + i % 3, 9, g));
  }
  write_labels(dir / "train.csv", rows);
  auto samples = load_dataset(dir / "train.csv", dir, 8);
  REQUIRE(samples.size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(samples[i].label == rows[i].label);
    CHECK(samples[i].pixels.shape() == Shape{3, 8, 8});
    for (float v : samples[i].pixels.data()) CHECK((v >= 0 && v <= 1));
  }
  fs::remove(dir / "img_3.ppm");
  CHECK_THROWS_WITH_AS(load_dataset(dir / "train.csv", dir, 8), doctest::Contains("img_3"), DataError);
  std::ofstream(dir / "img_3.ppm") << "P6\n3 3\n";
  CHECK_THROWS_AS(load_dataset(dir / "train.csv", dir, 8), DataError);
}

TEST_CASE("holdout split") {
  std::vector<int> labels(100);
  for (std::size_t i = 0; i < 100; ++i) labels[i] = static_cast<int>(i % 4);
  SplitPlan p = make_holdout(labels, 0.8, 7);
  CHECK(p.train_indices().size() == 80);
  CHECK(p.val_indices().size() == 20);
  CHECK(make_holdout(labels, 0.8, 7).assignment == p.assignment);
  CHECK(make_holdout(labels, 0.8, 8).assignment != p.assignment);

  auto big = synthetic_labels(1821, 3);
  SplitPlan q = make_holdout(big, 0.8, 1);
  CHECK(q.train_indices().size() == 1457);
  std::map<int, std::size_t> total, train;
  for (std::size_t i = 0; i < big.size(); ++i) {
    ++total[big[i]];
    if (q.assignment[i] == 0) ++train[big[i]];
  }
  for (auto [c, n] : total) CHECK(std::abs(double(train[c]) - 0.8 * n) <= 1.0);
  CHECK_THROWS_AS(make_holdout(labels, 1.0, 1), ConfigError);
}

TEST_CASE("k-fold split on 1821 ids") {
  auto labels = synthetic_labels(1821, 4);
  SplitPlan p = make_kfold(labels, 4, 0, 11);
  std::vector<std::size_t> sizes;
  std::set<std::size_t> all;
  for (std::size_t f = 0; f < 4; ++f) {
    auto part = p.part(f);
    sizes.push_back(part.size());
    for (auto i : part) CHECK(all.insert(i).second);
  }
  CHECK(all.size() == 1821);
  CHECK(sizes == std::vector<std::size_t>{456, 455, 455, 455});
  std::map<int, std::array<std::size_t, 4>> per;
  for (std::size_t i = 0; i < labels.size(); ++i) ++per[labels[i]][p.assignment[i]];
  for (auto& [c, counts] : per) {
    auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    CHECK(*hi - *lo <= 1);
  }
  CHECK(make_kfold(labels, 4, 2, 11).assignment == p.assignment);
  SplitPlan q = make_kfold(labels, 4, 2, 11);
  CHECK(q.train_indices().size() + q.val_indices().size() == 1821);
  CHECK(q.val_indices() == p.part(2));

  std::vector<int> tiny{0, 0, 0, 1, 1, 1, 1};
  CHECK_THROWS_AS(make_kfold(tiny, 4, 0, 1), DataError);
}

TEST_CASE("augmentation identity, flips and rotation oracle") {
  std::mt19937_64 g(5);
  Sample s{"x", Tensor::from({3, 5, 5}, random_image(5, 5, g).pixels), 2};
  Rng rng(1);
  Sample same = augment(s, AugmentSpec::identity(), rng);
  CHECK(std::equal(same.pixels.data().begin(), same.pixels.data().end(), s.pixels.data().begin()));
  CHECK(same.label == 2);

  Tensor small = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  auto h = hflip(small);
  CHECK(std::vector<float>(h.data().begin(), h.data().end()) == std::vector<float>{2, 1, 4, 3});

  // 90 degrees: out(x, y) samples in(c + R^-1 (p - c)).
  auto transpose = [](const Tensor& t) {
    const std::size_t C = t.dim(0), H = t.dim(1);
    std::vector<float> v(t.numel());
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < H; ++x) v[(c * H + y) * H + x] = t.data()[(c * H + x) * H + y];
    return Tensor::from(t.shape(), v);
  };
  for (std::size_t n : {4, 5, 8}) {
    Tensor img = Tensor::from({3, n, n}, random_image(n, n, g).pixels);
    Tensor r90 = apply_affine(img, make_affine(90, 0, 1, 1, 0, 0, n, n));
    Tensor oracle = hflip(transpose(img));
    Tensor r270 = apply_affine(img, make_affine(270, 0, 1, 1, 0, 0, n, n));
    Tensor oracle270 = vflip(transpose(img));
    for (std::size_t i = 0; i < img.numel(); ++i) {
      CHECK(std::abs(r90.data()[i] - oracle.data()[i]) < 1e-6);
      CHECK(std::abs(r270.data()[i] - oracle270.data()[i]) < 1e-6);
    }
  }
}

TEST_CASE("augmentation keeps labels, dimensions and range") {
  std::mt19937_64 g(6);
  AugmentSpec spec;
  spec.brightness_hi = 2.0;
  for (int trial = 0; trial < 40; ++trial) {
    Sample s{"x", Tensor::from({3, 9, 7}, random_image(9, 7, g).pixels), trial % 4};
    Rng rng(trial);
    Sample a = augment(s, spec, rng);
    CHECK(a.label == s.label);
    CHECK(a.pixels.shape() == s.pixels.shape());
    for (float v : a.pixels.data()) CHECK((v >= 0 && v <= 1));
  }
  AugmentSpec bad;
  bad.zoom_lo = 1.5;
  bad.zoom_hi = 1.0;
  Rng rng(0);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("batch iteration") {
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < 1458; ++i) samples.push_back({std::to_string(i), Tensor::full({3, 1, 1}, float(i)), 0});
  BatchIterator plain(samples, {}, 16, false, 1);
  CHECK(plain.batch_count() == 92);
  Batch b;
  std::vector<std::size_t> seen;
  std::size_t batches = 0, last = 0;
  while (plain.next(b)) {
    ++batches;
    last = b.labels.size();
    for (std::size_t i = 0; i < b.indices.size(); ++i) {
      CHECK(b.images.data()[i * 3] == float(b.indices[i]));
      seen.push_back(b.indices[i]);
    }
  }
  CHECK(batches == 92);
  CHECK(last == 2);
  for (std::size_t i = 0; i < seen.size(); ++i) CHECK(seen[i] == i);

  BatchIterator shuffled(samples, {}, 16, true, 9);
  auto order0 = shuffled.order();
  shuffled.start_epoch(1);
  auto order1 = shuffled.order();
  CHECK(order0 != order1);
  shuffled.start_epoch(0);
  CHECK(shuffled.order() == order0);
  std::multiset<std::size_t> ids(order1.begin(), order1.end());
  CHECK(ids.size() == 1458);
  CHECK(std::set<std::size_t>(ids.begin(), ids.end()).size() == 1458);

  std::vector<Sample> none;
  CHECK_THROWS_AS(BatchIterator(none, {}, 4, false, 1), DataError);
  CHECK_THROWS_AS(BatchIterator(samples, {}, 0, false, 1), ConfigError);
}

TEST_CASE("augmented batches depend only on (seed, epoch, index)") {
  std::mt19937_64 g(8);
  std::vector<Sample> samples;
  for (int i = 0; i < 10; ++i) samples.push_back({"s", Tensor::from({3, 6, 6}, random_image(6, 6, g).pixels), 0});
  AugmentSpec spec;
  BatchIterator a(samples, {}, 3, true, 5, spec);
  BatchIterator b(samples, {}, 4, false, 5, spec);
  std::map<std::size_t, std::vector<float>> pa, pb;
  Batch batch;
  for (auto* it : {&a, &b}) {
    auto& dst = it == &a ? pa : pb;
    it->start_epoch(3);
    while (it->next(batch))
      for (std::size_t i = 0; i < batch.indices.size(); ++i)
        dst[batch.indices[i]] = std::vector<float>(batch.images.data().begin() + i * 108,
                                                   batch.images.data().begin() + (i + 1) * 108);
  }
  CHECK(pa == pb);
}

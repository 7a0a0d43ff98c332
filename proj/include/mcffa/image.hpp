#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mcffa {

// Planar RGB image, values in [0,1]; pixels[(c * height + y) * width + x].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
};

// Binary PPM (P6). maxval up to 255; samples are scaled to [0,1].
Image decode_ppm(std::string_view bytes);
// Encodes with maxval 255, rounding to the nearest level.
std::string encode_ppm(const Image& img);

// Dispatches on the file extension; only .ppm is built in.
Image read_image(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& img);

// Bilinear resampling with half-pixel centres: source coordinate
// (dst + 0.5) * in / out - 0.5, clamped to the image.
Image resize_bilinear(const Image& img, std::size_t height, std::size_t width);

}  // namespace mcffa

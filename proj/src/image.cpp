#include "mcffa/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mcffa/errors.hpp"

namespace mcffa {

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view s) : s_(s) {}

  void skip_space_and_comments() {
    while (pos_ < s_.size()) {
      if (std::isspace(static_cast<unsigned char>(s_[pos_]))) {
        ++pos_;
      } else if (s_[pos_] == '#') {
        while (pos_ < s_.size() && s_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t v = 0;
    while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(s_[pos_] - '0');
      if (v > (1u << 24)) throw DataError(std::string("corrupt image header: ") + what + " too large");
      ++pos_;
    }
    if (pos_ == start) throw DataError(std::string("corrupt image header: missing ") + what);
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance() { ++pos_; }
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace

Image decode_ppm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw DataError("unsupported image format (not a PPM)");
  if (bytes[1] != '6') throw DataError(std::string("unsupported image format P") + bytes[1] + " (only P6)");
  HeaderReader r(bytes.substr(2));
  if (!std::isspace(static_cast<unsigned char>(r.peek())) && r.peek() != '#') {
    throw DataError("corrupt image header: expected whitespace after magic");
  }
  const std::size_t width = r.number("width");
  const std::size_t height = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (width == 0 || height == 0) throw DataError("corrupt image header: zero extent");
  if (maxval == 0) throw DataError("corrupt image header: maxval 0");
  if (maxval > 255) throw DataError("unsupported image format: 16-bit PPM");
  if (!std::isspace(static_cast<unsigned char>(r.peek()))) {
    throw DataError("corrupt image header: expected whitespace before raster");
  }
  r.advance();
  const std::size_t offset = 2 + r.pos();
  const std::size_t n = width * height * 3;
  if (bytes.size() - offset < n) {
    throw DataError("truncated PPM raster: expected " + std::to_string(n) + " bytes, found " +
                    std::to_string(bytes.size() - offset));
  }
  Image img;
  img.height = height;
  img.width = width;
  img.pixels.resize(n);
  const float scale = 1.0f / static_cast<float>(maxval);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const auto v = static_cast<unsigned char>(bytes[offset + (y * width + x) * 3 + c]);
        if (v > maxval) throw DataError("PPM sample exceeds maxval");
        img.at(c, y, x) = static_cast<float>(v) * scale;
      }
  return img;
}

std::string encode_ppm(const Image& img) {
  if (img.channels != 3) throw DataError("PPM needs three channels");
  std::ostringstream os;
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::string out = os.str();
  out.reserve(out.size() + img.width * img.height * 3);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
      }
  return out;
}

Image read_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext != ".ppm") throw DataError("unsupported image format '" + ext + "': " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing image file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_ppm(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const std::string bytes = encode_ppm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Image resize_bilinear(const Image& img, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DataError("resize target must be positive");
  if (img.height == height && img.width == width) return img;
  struct Tap {
    std::size_t i0, i1;
    float f;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      t[o] = {i0, i1, static_cast<float>(src - static_cast<double>(i0))};
    }
    return t;
  };
  const auto ty = taps(img.height, height);
  const auto tx = taps(img.width, width);
  Image out;
  out.channels = img.channels;
  out.height = height;
  out.width = width;
  out.pixels.resize(img.channels * height * width);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const Tap& a = ty[y];
        const Tap& b = tx[x];
        const float top = img.at(c, a.i0, b.i0) * (1 - b.f) + img.at(c, a.i0, b.i1) * b.f;
        const float bot = img.at(c, a.i1, b.i0) * (1 - b.f) + img.at(c, a.i1, b.i1) * b.f;
        out.at(c, y, x) = top * (1 - a.f) + bot * a.f;
      }
  return out;
}

}  // namespace mcffa

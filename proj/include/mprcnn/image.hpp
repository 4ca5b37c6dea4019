#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mprcnn/binary_io.hpp"
#include "mprcnn/tensor.hpp"

namespace mprcnn {

/// 8-bit grayscale image, row-major.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

  bool operator==(const GrayImage&) const = default;
};

/// Binary PGM (P5, maxval 255).
inline void write_pgm(const std::string& path, const GrayImage& img) {
  auto os = io::open_out(path);
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline GrayImage read_pgm(const std::string& path) {
  auto is = io::open_in(path);
  auto token = [&]() {
    std::string t;
    int c = is.get();
    while (c != EOF) {
      if (c == '#') {
        while (c != EOF && c != '\n') c = is.get();
      } else if (!std::isspace(c)) {
        break;
      }
      c = is.get();
    }
    while (c != EOF && !std::isspace(c)) {
      t.push_back(static_cast<char>(c));
      c = is.get();
    }
    return t;
  };
  if (token() != "P5") throw FormatError(path + ": not a binary PGM (P5)");
  GrayImage img;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    if (std::stoi(token()) != 255) throw FormatError(path + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw FormatError(path + ": malformed PGM header");
  }
  if (img.width < 1 || img.height < 1) throw FormatError(path + ": bad PGM dimensions");
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw FormatError(path + ": truncated PGM data");
  }
  return img;
}

/// Bilinear resize with half-pixel centers.
inline GrayImage resize_bilinear(const GrayImage& src, int width, int height) {
  GrayImage dst(width, height);
  const double sx = static_cast<double>(src.width) / width;
  const double sy = static_cast<double>(src.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double ay = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double ax = fx - x0;
      const double v = (1 - ay) * ((1 - ax) * src.at(x0, y0) + ax * src.at(x1, y0)) +
                       ay * ((1 - ax) * src.at(x0, y1) + ax * src.at(x1, y1));
      dst.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return dst;
}

/// Resize so the shorter edge equals `shorter`; returns the scale applied.
inline double resize_shorter_edge(const GrayImage& src, int shorter, GrayImage& out) {
  const int s = std::min(src.width, src.height);
  if (s == shorter) {
    out = src;
    return 1.0;
  }
  const double scale = static_cast<double>(shorter) / s;
  out = resize_bilinear(src, std::max(1, static_cast<int>(std::lround(src.width * scale))),
                        std::max(1, static_cast<int>(std::lround(src.height * scale))));
  return scale;
}

/// (1, 1, H', W') tensor of (v - 128) / 64, zero-padded on the bottom/right
/// so both sides are multiples of `multiple`.
template <class T>
Tensor<T> image_to_tensor(const GrayImage& img, int multiple = 32) {
  const int h = (img.height + multiple - 1) / multiple * multiple;
  const int w = (img.width + multiple - 1) / multiple * multiple;
  Tensor<T> t(1, 1, h, w);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) t(0, 0, y, x) = static_cast<T>((img.at(x, y) - 128.0) / 64.0);
  }
  return t;
}

}  // namespace mprcnn

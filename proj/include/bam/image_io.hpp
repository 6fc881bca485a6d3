#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bam/tensor.hpp"

namespace bam {

/// 8-bit RGB raster, row-major, interleaved channels.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0) {}

  std::uint8_t& at(int y, int x, int ch) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  }
  std::uint8_t at(int y, int x, int ch) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
  }

  bool operator==(const RgbImage& other) const = default;
};

/// Image in [0,1] floats as a {3,H,W} tensor, the model input convention.
template <typename S>
Tensor<S> to_tensor(const RgbImage& img) {
  Tensor<S> t({3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t.at(c, y, x) = static_cast<S>(img.at(y, x, c)) / S(255);
  return t;
}

// PNG container I/O (8-bit, non-interlaced). Index masks are written as
// 8-bit grayscale where the pixel value is the class id; palettized masks
// are read back as their palette indices.
void write_png_rgb(const std::string& path, const RgbImage& image);
void write_png_index(const std::string& path, const LabelMap& mask);
RgbImage read_png_rgb(const std::string& path);
LabelMap read_png_index(const std::string& path);

}  // namespace bam

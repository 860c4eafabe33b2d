#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace probeguide {

/// Row-major float image with intensities in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0.0f) {}

  float& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }

  bool operator==(const Image&) const = default;
};

/// 8-bit grayscale image, the storage form of scan frames.
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }

  bool operator==(const GrayImage&) const = default;
};

GrayImage quantize(const Image& img);
Image to_float(const GrayImage& img);

void write_png(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_png(const std::filesystem::path& path);

/// 8-bit RGB raster used by the plotting tools.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 255) {}

  void set(int r, int c, std::uint8_t red, std::uint8_t green, std::uint8_t blue) {
    const auto i = (static_cast<std::size_t>(r) * width + c) * 3;
    pixels[i] = red;
    pixels[i + 1] = green;
    pixels[i + 2] = blue;
  }
};

void write_png(const std::filesystem::path& path, const RgbImage& img);

}  // namespace probeguide

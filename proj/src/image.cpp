#include "probeguide/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

#include "probeguide/errors.hpp"

namespace probeguide {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png_raw(const std::filesystem::path& path, int height, int width, int color_type, int channels,
                   const std::uint8_t* data) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw DataError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(r) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

GrayImage quantize(const Image& img) {
  GrayImage out(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const float v = std::clamp(img.pixels[i], 0.0f, 1.0f);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

Image to_float(const GrayImage& img) {
  Image out(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) out.pixels[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return out;
}

void write_png(const std::filesystem::path& path, const GrayImage& img) {
  write_png_raw(path, img.height, img.width, PNG_COLOR_TYPE_GRAY, 1, img.pixels.data());
}

void write_png(const std::filesystem::path& path, const RgbImage& img) {
  write_png_raw(path, img.height, img.width, PNG_COLOR_TYPE_RGB, 3, img.pixels.data());
}

GrayImage read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw MissingFileError(path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("png read failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || depth != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("expected 8-bit grayscale png: " + path.string());
  }
  GrayImage img(height, width);
  for (int r = 0; r < height; ++r) png_read_row(png, img.pixels.data() + static_cast<std::size_t>(r) * width, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace probeguide

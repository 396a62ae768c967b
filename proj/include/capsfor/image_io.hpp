#pragma once

// 8-bit RGB image files (PNG via libpng, binary PPM) <-> [3,H,W] tensors in [0,1].
// Link against PNG::PNG when including this header.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cctype>
#include <filesystem>
#include <string>
#include <vector>

#include "capsfor/errors.hpp"
#include "capsfor/tensor.hpp"
#include "capsfor/weights.hpp"

namespace capsfor {

namespace detail {

template <class T>
Tensor<T> from_interleaved(const std::vector<unsigned char>& rgb, std::size_t h, std::size_t w) {
  Tensor<T> img(Shape{3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img[(c * h + y) * w + x] = static_cast<T>(rgb[(y * w + x) * 3 + c] / 255.0);
  return img;
}

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::string skip_ppm_space(const std::string& s, std::size_t& pos) {
  std::string token;
  for (;;) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos < s.size() && s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos]))) token.push_back(s[pos++]);
  return token;
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> read_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  if (detail::skip_ppm_space(bytes, pos) != "P6") throw DataError("'" + path.string() + "' is not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(detail::skip_ppm_space(bytes, pos));
    h = std::stoul(detail::skip_ppm_space(bytes, pos));
    maxval = std::stoul(detail::skip_ppm_space(bytes, pos));
  } catch (const std::exception&) {
    throw DataError("'" + path.string() + "': malformed PPM header");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw DataError("'" + path.string() + "': unsupported PPM geometry");
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + w * h * 3) throw DataError("'" + path.string() + "': truncated PPM payload");
  std::vector<unsigned char> rgb(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + w * h * 3));
  if (maxval != 255) {
    for (auto& v : rgb) v = static_cast<unsigned char>(std::lround(v * 255.0 / static_cast<double>(maxval)));
  }
  return detail::from_interleaved<T>(rgb, h, w);
}

template <std::floating_point T>
Tensor<T> read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw DataError("'" + path.string() + "': " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> rgb(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("'" + path.string() + "': " + image.message);
  }
  return detail::from_interleaved<T>(rgb, image.height, image.width);
}

/// Loads a PNG or binary PPM (by extension) as [3,H,W] in [0,1].
template <std::floating_point T>
Tensor<T> read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("image '" + path.string() + "' does not exist");
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".ppm") return read_ppm<T>(path);
  if (ext == ".png") return read_png<T>(path);
  throw DataError("'" + path.string() + "': unsupported image type (expected .png or .ppm)");
}

namespace detail {
inline void write_png_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& px, std::size_t h,
                            std::size_t w, png_uint_32 format) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, px.data(), 0, nullptr)) {
    throw DataError("failed writing PNG '" + path.string() + "': " + image.message);
  }
}
}  // namespace detail

template <std::floating_point T>
void write_png_rgb(const std::filesystem::path& path, const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("RGB PNG needs [3,H,W], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> px(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) px[(y * w + x) * 3 + c] = detail::to_byte(image[(c * h + y) * w + x]);
  detail::write_png_bytes(path, px, h, w, PNG_FORMAT_RGB);
}

/// Grayscale PNG from an [H,W] map with values in [0,1].
template <std::floating_point T>
void write_png_gray(const std::filesystem::path& path, const Tensor<T>& map) {
  if (map.rank() != 2) throw DimensionError("grayscale PNG needs [H,W], got " + shape_str(map.shape()));
  const std::size_t h = map.dim(0), w = map.dim(1);
  std::vector<unsigned char> px(h * w);
  for (std::size_t i = 0; i < h * w; ++i) px[i] = detail::to_byte(map[i]);
  detail::write_png_bytes(path, px, h, w, PNG_FORMAT_GRAY);
}

template <std::floating_point T>
void write_ppm(const std::filesystem::path& path, const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("PPM needs [3,H,W], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(detail::to_byte(image[(c * h + y) * w + x])));
  write_file(path, out);
}

}  // namespace capsfor

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <png.h>

#include "flowtint/errors.hpp"

namespace flowtint {

// H x W x 3 interleaved RGB, values in [0,1]. The universal sample carrier;
// flattening row-major gives the latent-space vector the flow operates on.
struct ImageTensor {
  int h = 0;
  int w = 0;
  std::vector<double> data;  // size h*w*3

  ImageTensor() = default;
  ImageTensor(int h_, int w_, double fill = 0.0) : h(h_), w(w_), data(static_cast<size_t>(h_) * w_ * 3, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * w + x) * 3 + c]; }

  size_t size() const { return data.size(); }
  bool same_shape(const ImageTensor& o) const { return h == o.h && w == o.w; }

  static ImageTensor from_flat(const std::vector<double>& v, int h, int w) {
    if (v.size() != static_cast<size_t>(h) * w * 3)
      throw DimensionError("from_flat: vector size does not match " + std::to_string(h) + "x" + std::to_string(w) + "x3");
    ImageTensor img(h, w);
    img.data = v;
    return img;
  }

  void clamp01() {
    for (double& v : data) v = std::clamp(v, 0.0, 1.0);
  }
};

inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

inline double luma_at(const ImageTensor& img, int y, int x) {
  return luma(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
}

// 8-bit quantization used for all on-disk images: quantize on write, x/255 on read.
inline std::uint8_t quantize8(double v) {
  double q = std::clamp(v, 0.0, 1.0) * 255.0 + 0.5;
  return static_cast<std::uint8_t>(std::min(255.0, std::floor(q)));
}

inline std::vector<std::uint8_t> to_rgb8(const ImageTensor& img) {
  std::vector<std::uint8_t> out(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) out[i] = quantize8(img.data[i]);
  return out;
}

inline ImageTensor from_rgb8(const std::uint8_t* px, int h, int w) {
  ImageTensor img(h, w);
  for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = px[i] / 255.0;
  return img;
}

inline std::vector<std::uint8_t> encode_png(const ImageTensor& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.w);
  pi.height = static_cast<png_uint_32>(img.h);
  pi.format = PNG_FORMAT_RGB;
  auto rgb = to_rgb8(img);
  png_alloc_size_t bytes = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &bytes, 0, rgb.data(), 0, nullptr))
    throw DataError(std::string("png encode failed: ") + pi.message);
  std::vector<std::uint8_t> buf(bytes);
  if (!png_image_write_to_memory(&pi, buf.data(), &bytes, 0, rgb.data(), 0, nullptr))
    throw DataError(std::string("png encode failed: ") + pi.message);
  buf.resize(bytes);
  return buf;
}

inline void write_png(const std::string& path, const ImageTensor& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.w);
  pi.height = static_cast<png_uint_32>(img.h);
  pi.format = PNG_FORMAT_RGB;
  auto rgb = to_rgb8(img);
  if (!png_image_write_to_file(&pi, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw DataError("png write failed for " + path + ": " + pi.message);
}

inline ImageTensor read_png(const std::string& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw DataError("png read failed for " + path + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, rgb.data(), 0, nullptr))
    throw DataError("png read failed for " + path + ": " + pi.message);
  return from_rgb8(rgb.data(), static_cast<int>(pi.height), static_cast<int>(pi.width));
}

inline std::string base64_encode(const std::vector<std::uint8_t>& in) {
  static const char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back(tbl[v & 63]);
  }
  if (i + 1 == in.size()) {
    std::uint32_t v = in[i] << 16;
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out += "==";
  } else if (i + 2 == in.size()) {
    std::uint32_t v = (in[i] << 16) | (in[i + 1] << 8);
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out += "=";
  }
  return out;
}

}  // namespace flowtint

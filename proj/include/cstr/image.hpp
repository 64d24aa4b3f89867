// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// Float rasters in [0, 1] with binary PGM (P5) / PPM (P6) I/O, bilinear
// resize and separable Gaussian blur.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cstr {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major, channel-interleaved raster.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> px;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c), px(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int c = 0) { return px[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int y, int x, int c = 0) const { return px[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  bool operator==(const Image&) const = default;
};

namespace detail {

inline std::string read_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      if (!tok.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace detail

/// Reads 8-bit binary PGM (P5) or PPM (P6).
inline Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image '" + path + "'");
  const std::string magic = detail::read_token(in);
  int channels = 0;
  if (magic == "P5") channels = 1;
  else if (magic == "P6") channels = 3;
  else throw ImageError("unsupported image magic '" + magic + "' in '" + path + "'");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(detail::read_token(in));
    h = std::stoi(detail::read_token(in));
    maxval = std::stoi(detail::read_token(in));
  } catch (const std::exception&) {
    throw ImageError("malformed header in '" + path + "'");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw ImageError("unsupported geometry or depth in '" + path + "'");
  Image img(h, w, channels);
  std::vector<unsigned char> raw(img.px.size());
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw ImageError("truncated pixel data in '" + path + "'");
  for (std::size_t i = 0; i < raw.size(); ++i) img.px[i] = static_cast<float>(raw[i]) / static_cast<float>(maxval);
  return img;
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_pnm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ImageError("write_pnm supports 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write image '" + path + "'");
  out << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.px.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = to_byte(img.px[i]);
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw ImageError("failed writing '" + path + "'");
}

/// Bilinear resize with half-pixel centers; same-size input is returned as is.
inline Image resize_bilinear(const Image& src, int h, int w) {
  if (src.height == h && src.width == w) return src;
  Image dst(h, w, src.channels);
  const float sy = static_cast<float>(src.height) / h;
  const float sx = static_cast<float>(src.width) / w;
  for (int y = 0; y < h; ++y) {
    const float fy = std::clamp((y + 0.5f) * sy - 0.5f, 0.0f, static_cast<float>(src.height - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const float ty = fy - y0;
    for (int x = 0; x < w; ++x) {
      const float fx = std::clamp((x + 0.5f) * sx - 0.5f, 0.0f, static_cast<float>(src.width - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const float tx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const float top = src.at(y0, x0, c) * (1 - tx) + src.at(y0, x1, c) * tx;
        const float bot = src.at(y1, x0, c) * (1 - tx) + src.at(y1, x1, c) * tx;
        dst.at(y, x, c) = top * (1 - ty) + bot * ty;
      }
    }
  }
  return dst;
}

/// Separable Gaussian blur, radius ceil(3 sigma), clamped borders. The kernel
/// is normalized so constant images stay constant.
inline Image gaussian_blur(const Image& src, float sigma) {
  if (sigma <= 0.0f) return src;
  const int r = static_cast<int>(std::ceil(3.0f * sigma));
  std::vector<float> k(2 * r + 1);
  float sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5f * i * i / (sigma * sigma));
  for (float& v : k) v /= sum;

  Image tmp(src.height, src.width, src.channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        float acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * src.at(y, std::clamp(x + i, 0, src.width - 1), c);
        tmp.at(y, x, c) = acc;
      }
  Image dst(src.height, src.width, src.channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        float acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(std::clamp(y + i, 0, src.height - 1), x, c);
        dst.at(y, x, c) = acc;
      }
  return dst;
}

/// Gray <-> RGB conversion so images match the configured channel count.
inline Image convert_channels(const Image& src, int channels) {
  if (src.channels == channels) return src;
  Image dst(src.height, src.width, channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      if (channels == 1) {
        dst.at(y, x) = 0.299f * src.at(y, x, 0) + 0.587f * src.at(y, x, 1) + 0.114f * src.at(y, x, 2);
      } else {
        for (int c = 0; c < channels; ++c) dst.at(y, x, c) = src.at(y, x, 0);
      }
    }
  return dst;
}

}  // namespace cstr

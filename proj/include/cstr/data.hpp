// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural glyph corpus, manifest loading, augmentation and label coding.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cstr/config.hpp"
#include "cstr/font5x7.hpp"
#include "cstr/image.hpp"

namespace cstr {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered symbol set. Character ids are positions in the symbol string;
/// EOS and PAD follow the last character.
class Charset {
 public:
  explicit Charset(std::string symbols = default_charset()) : symbols_(std::move(symbols)) {
    ids_.fill(-1);
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      const auto c = static_cast<unsigned char>(symbols_[i]);
      if (ids_[c] != -1) throw DataError(std::string("charset: duplicate symbol '") + symbols_[i] + "'");
      ids_[c] = static_cast<int>(i);
    }
    if (symbols_.empty()) throw DataError("charset: empty");
  }

  int size() const { return static_cast<int>(symbols_.size()); }
  int eos() const { return size(); }
  int pad() const { return size() + 1; }
  const std::string& symbols() const { return symbols_; }

  bool contains(char c) const { return ids_[static_cast<unsigned char>(c)] >= 0; }
  int id(char c) const {
    const int i = ids_[static_cast<unsigned char>(c)];
    if (i < 0) throw DataError(std::string("symbol '") + c + "' not in charset");
    return i;
  }
  char symbol(int id) const {
    if (id < 0 || id >= size()) throw DataError("id " + std::to_string(id) + " is not a character");
    return symbols_[static_cast<std::size_t>(id)];
  }

  /// Character ids only (no EOS/PAD).
  std::vector<int> ids(const std::string& text) const {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(id(c));
    return out;
  }

  /// ids + EOS, padded with PAD to max_len + 1.
  std::vector<int> encode_label(const std::string& text, int max_len) const {
    if (text.empty()) throw DataError("label is empty");
    if (static_cast<int>(text.size()) > max_len)
      throw DataError("label '" + text + "' longer than " + std::to_string(max_len));
    std::vector<int> out = ids(text);
    out.push_back(eos());
    out.resize(static_cast<std::size_t>(max_len) + 1, pad());
    return out;
  }

  /// Inverse of encode_label: characters up to the first EOS.
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
      if (i == eos()) break;
      if (i == pad()) continue;
      out.push_back(symbol(i));
    }
    return out;
  }

 private:
  std::string symbols_;
  std::array<int, 256> ids_{};
};

struct SampleRecord {
  std::string path;  // empty for in-memory samples
  Image image;
  std::string label;
  std::string split = "train";
};

struct RenderOptions {
  int canvas_h = 224;
  int canvas_w = 224;
  int channels = 1;
  int min_len = 1;
  int max_len = 25;
  double min_scale = 1.5;
  double max_scale = 4.0;
  double max_rotation_deg = 25.0;
  double min_contrast = 0.3;
  /// Tight crop: the text is stretched to span the canvas width (less a
  /// random margin of up to `max_margin` of the width) and scaled
  /// vertically by the same factor, capped by the canvas height. The scale
  /// range is ignored.
  bool tight_crop = false;
  double max_margin = 0.1;
  /// With tight_crop, the height is scaled on its own to span the canvas
  /// height (less the same random margin), as when a word crop is resized
  /// to a square input.
  bool stretch = false;
};

namespace detail {

inline double fit_scale(int text_w, int text_h, double angle, int canvas_w, int canvas_h) {
  const double c = std::abs(std::cos(angle)), s = std::abs(std::sin(angle));
  const double sx = (canvas_w - 2.0) / (text_w * c + text_h * s);
  const double sy = (canvas_h - 2.0) / (text_w * s + text_h * c);
  return std::min(sx, sy);
}

inline int text_width(int len) { return len * (font5x7::kWidth + 1) - 1; }

}  // namespace detail

/// Throws when the longest string cannot fit at the minimum scale under the
/// largest rotation.
inline void check_render_options(const RenderOptions& o, const Charset& cs) {
  if (o.min_len < 1 || o.max_len < o.min_len) throw DataError("render: invalid length range");
  if (o.min_scale <= 0 || o.max_scale < o.min_scale) throw DataError("render: invalid scale range");
  if (o.min_contrast < 0 || o.min_contrast > 1) throw DataError("render: min_contrast must be in [0, 1]");
  if (o.max_margin < 0 || o.max_margin >= 0.5) throw DataError("render: max_margin must be in [0, 0.5)");
  if (o.channels != 1 && o.channels != 3) throw DataError("render: channels must be 1 or 3");
  for (char c : cs.symbols())
    if (!font5x7::has_glyph(c)) throw DataError(std::string("render: no glyph for '") + c + "'");
  const double worst = o.max_rotation_deg * std::numbers::pi / 180.0;
  const double fit = std::min(detail::fit_scale(detail::text_width(o.max_len), font5x7::kHeight, 0.0, o.canvas_w, o.canvas_h),
                              detail::fit_scale(detail::text_width(o.max_len), font5x7::kHeight, worst, o.canvas_w, o.canvas_h));
  if (!o.tight_crop && fit < o.min_scale) throw DataError("render: canvas too small for " + std::to_string(o.max_len) + " characters");
}

/// Renders a random string with the embedded bitmap font under a random
/// scale, rotation, translation and gray levels. Pure function of the rng
/// state.
template <typename Rng>
SampleRecord render_sample(Rng& rng, const Charset& cs, const RenderOptions& o) {
  check_render_options(o, cs);
  std::uniform_int_distribution<int> len_dist(o.min_len, o.max_len);
  std::uniform_int_distribution<int> sym_dist(0, cs.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SampleRecord rec;
  const int len = len_dist(rng);
  for (int i = 0; i < len; ++i) rec.label.push_back(cs.symbol(sym_dist(rng)));

  const int tw = detail::text_width(len), th = font5x7::kHeight;
  const double angle = (2 * unit(rng) - 1) * o.max_rotation_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(angle), sa = std::sin(angle);
  double sx = 0, sy = 0;
  if (o.tight_crop) {
    sx = (o.canvas_w - 2.0) * (1.0 - 2.0 * o.max_margin * unit(rng)) / tw;
    sy = o.stretch ? (o.canvas_h - 2.0) * (1.0 - 2.0 * o.max_margin * unit(rng)) / th
                   : std::min(sx, (o.canvas_h - 2.0) / th);
    const double w = sx * tw * std::abs(ca) + sy * th * std::abs(sa);
    const double h = sx * tw * std::abs(sa) + sy * th * std::abs(ca);
    const double shrink = std::min({1.0, (o.canvas_w - 2.0) / w, (o.canvas_h - 2.0) / h});
    sx *= shrink;
    sy *= shrink;
  } else {
    const double max_s = std::min(o.max_scale, detail::fit_scale(tw, th, angle, o.canvas_w, o.canvas_h));
    sx = sy = o.min_scale + unit(rng) * std::max(0.0, max_s - o.min_scale);
  }
  const double bw = sx * tw * std::abs(ca) + sy * th * std::abs(sa);
  const double bh = sx * tw * std::abs(sa) + sy * th * std::abs(ca);
  const double cx = bw / 2 + 1 + unit(rng) * std::max(0.0, o.canvas_w - bw - 2);
  const double cy = bh / 2 + 1 + unit(rng) * std::max(0.0, o.canvas_h - bh - 2);
  double bg = unit(rng), fg = unit(rng);
  while (std::abs(fg - bg) < o.min_contrast) {
    bg = unit(rng);
    fg = unit(rng);
  }

  auto ink = [&](double u, double v) {
    if (u < 0 || v < 0 || u >= tw || v >= th) return false;
    const int col = static_cast<int>(u), row = static_cast<int>(v);
    const int glyph = col / (font5x7::kWidth + 1), gx = col % (font5x7::kWidth + 1);
    return gx < font5x7::kWidth && font5x7::pixel(rec.label[static_cast<std::size_t>(glyph)], row, gx);
  };

  rec.image = Image(o.canvas_h, o.canvas_w, o.channels);
  constexpr int kSub = 3;  // supersampling per axis
  for (int y = 0; y < o.canvas_h; ++y)
    for (int x = 0; x < o.canvas_w; ++x) {
      int hits = 0;
      for (int j = 0; j < kSub; ++j)
        for (int i = 0; i < kSub; ++i) {
          const double dx = x + (i + 0.5) / kSub - cx, dy = y + (j + 0.5) / kSub - cy;
          const double u = (dx * ca + dy * sa) / sx + tw / 2.0;
          const double v = (-dx * sa + dy * ca) / sy + th / 2.0;
          hits += ink(u, v);
        }
      const double cov = static_cast<double>(hits) / (kSub * kSub);
      const auto val = static_cast<float>(bg + (fg - bg) * cov);
      for (int c = 0; c < o.channels; ++c) rec.image.at(y, x, c) = val;
    }
  return rec;
}

/// Per-sample seed derived from (global seed, index) with splitmix64.
inline std::uint64_t sample_seed(std::uint64_t global, std::uint64_t index) {
  std::uint64_t z = global + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Samples [first, first + count) of the corpus defined by `seed`.
inline std::vector<SampleRecord> generate_corpus(std::uint64_t seed, std::size_t first, std::size_t count,
                                                 const Charset& cs, const RenderOptions& o) {
  check_render_options(o, cs);
  std::vector<SampleRecord> out;
  out.reserve(count);
  for (std::size_t i = first; i < first + count; ++i) {
    std::mt19937_64 rng(sample_seed(seed, i));
    out.push_back(render_sample(rng, cs, o));
  }
  return out;
}

struct AugmentOptions {
  double max_blur_sigma = 2.0;
  double max_noise_std = 0.1;
  int out_h = 224;
  int out_w = 224;
};

/// Blur with `sigma`, add N(0, noise_std) noise, clamp to [0, 1], resize.
template <typename Rng>
Image augment_with(const Image& img, double sigma, double noise_std, int out_h, int out_w, Rng& rng) {
  Image out = gaussian_blur(img, static_cast<float>(sigma));
  if (noise_std > 0) {
    std::normal_distribution<double> noise(0.0, noise_std);
    for (float& p : out.px) p = static_cast<float>(p + noise(rng));
  }
  for (float& p : out.px) p = std::clamp(p, 0.0f, 1.0f);
  return resize_bilinear(out, out_h, out_w);
}

/// Random-strength Gaussian blur and noise, then resize.
template <typename Rng>
Image augment(const Image& img, Rng& rng, const AugmentOptions& o) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double sigma = unit(rng) * o.max_blur_sigma;
  const double noise = unit(rng) * o.max_noise_std;
  return augment_with(img, sigma, noise, o.out_h, o.out_w, rng);
}

/// Reads `relative/path<TAB>label` lines. Paths are relative to the manifest.
inline std::vector<SampleRecord> load_manifest(const std::string& path, const Charset& cs, int max_len,
                                               bool load_images = true) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path + "'");
  const std::filesystem::path root = std::filesystem::path(path).parent_path();
  std::vector<SampleRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || line.find('\t', tab + 1) != std::string::npos)
      throw DataError(where + ": expected '<path>\\t<label>'");
    SampleRecord rec;
    rec.path = line.substr(0, tab);
    rec.label = line.substr(tab + 1);
    if (rec.label.empty() || static_cast<int>(rec.label.size()) > max_len)
      throw DataError(where + ": label length must be in [1, " + std::to_string(max_len) + "]");
    for (char c : rec.label)
      if (!cs.contains(c)) throw DataError(where + ": symbol '" + std::string(1, c) + "' not in charset");
    if (load_images) {
      try {
        rec.image = read_pnm((root / rec.path).string());
      } catch (const ImageError& e) {
        throw DataError(where + ": " + e.what());
      }
    }
    out.push_back(std::move(rec));
  }
  if (out.empty()) throw DataError("manifest '" + path + "': no samples");
  return out;
}

inline constexpr const char* kGeneratorVersion = "glyph5x7-1";

/// Writes images/NNNNNN.pgm, manifest.tsv and meta.json under `dir`.
inline void write_corpus(const std::string& dir, const std::vector<SampleRecord>& records, const Charset& cs,
                         const RenderOptions& o, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw DataError("cannot write manifest under '" + dir + "'");
  for (std::size_t i = 0; i < records.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.%s", i, records[i].image.channels == 1 ? "pgm" : "ppm");
    write_pnm((fs::path(dir) / name).string(), records[i].image);
    manifest << name << '\t' << records[i].label << '\n';
  }
  const nlohmann::json meta = {
      {"charset", cs.symbols()},
      {"canvas", {{"height", o.canvas_h}, {"width", o.canvas_w}, {"channels", o.channels}}},
      {"generator_version", kGeneratorVersion},
      {"seed", seed},
      {"count", records.size()},
      {"min_len", o.min_len},
      {"max_len", o.max_len},
      {"scale", {o.min_scale, o.max_scale}},
      {"max_rotation_deg", o.max_rotation_deg},
      {"min_contrast", o.min_contrast},
      {"tight_crop", o.tight_crop},
      {"stretch", o.stretch},
      {"max_margin", o.max_margin},
  };
  std::ofstream(fs::path(dir) / "meta.json") << meta.dump(2) << '\n';
}

}  // namespace cstr

// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// Word accuracy and per-character attention maps.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cstr/data.hpp"
#include "cstr/model.hpp"

namespace cstr {

/// Lowercase, then drop everything that is not a letter or digit.
inline std::string normalize_text(const std::string& s) {
  std::string out;
  for (char c : s) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u)) out.push_back(static_cast<char>(std::tolower(u)));
  }
  return out;
}

/// Exact full-string match rate.
inline double word_accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& refs,
                            bool normalize = false) {
  if (preds.size() != refs.size())
    throw std::invalid_argument("word_accuracy: " + std::to_string(preds.size()) + " predictions for " +
                                std::to_string(refs.size()) + " references");
  if (preds.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    hits += normalize ? normalize_text(preds[i]) == normalize_text(refs[i]) : preds[i] == refs[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

inline std::string recognize(const Model<float>& model, const Image& img) {
  const Charset cs(model.config.charset);
  return cs.decode(greedy_decode(model, img).ids);
}

/// One grid per emitted character over the full (H/P x W/P) patch grid.
/// Weight that lands on the CLS token is kept apart in cls_mass.
struct AttentionMapSet {
  std::string text;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<std::vector<double>> grids;  // row-major, grid_h * grid_w
  std::vector<double> cls_mass;
};

/// Spreads per-token weights onto the patch grid. A token standing for
/// several patches shares its weight uniformly among them; patches that no
/// surviving token covers stay zero.
inline std::vector<double> scatter_to_grid(const std::vector<double>& token_weights, const RetainedMap& retained,
                                           int cells, double* cls_mass = nullptr) {
  if (token_weights.size() != retained.size())
    throw std::invalid_argument("scatter_to_grid: " + std::to_string(token_weights.size()) + " weights for " +
                                std::to_string(retained.size()) + " tokens");
  std::vector<double> grid(static_cast<std::size_t>(cells), 0.0);
  double cls = 0;
  for (std::size_t j = 0; j < retained.size(); ++j) {
    const auto& src = retained[j];
    if (src.size() == 1 && src[0] == kClsSource) {
      cls += token_weights[j];
      continue;
    }
    const double share = token_weights[j] / static_cast<double>(src.size());
    for (int p : src) {
      if (p < 0 || p >= cells) throw std::out_of_range("scatter_to_grid: patch index " + std::to_string(p));
      grid[static_cast<std::size_t>(p)] += share;
    }
  }
  if (cls_mass) *cls_mass = cls;
  return grid;
}

inline AttentionMapSet attention_maps(const Model<float>& model, const Image& img) {
  DecodeAttention<float> attn;
  const Decoded d = greedy_decode(model, img, &attn);
  AttentionMapSet out;
  out.text = Charset(model.config.charset).decode(d.ids);
  out.grid_h = model.enc().grid_h();
  out.grid_w = model.enc().grid_w();
  for (const auto& w : attn.per_char) {
    double cls = 0;
    out.grids.push_back(scatter_to_grid(std::vector<double>(w.begin(), w.end()), attn.retained,
                                        out.grid_h * out.grid_w, &cls));
    out.cls_mass.push_back(cls);
  }
  return out;
}

/// Writes char_NN.pgm per emitted character (values scaled so the maximum
/// maps to 255; original weight = pixel / scale) and attention.json.
inline AttentionMapSet export_attention(const Image& img, const Model<float>& model, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw std::runtime_error("cannot create output directory '" + out_dir + "'");

  AttentionMapSet set = attention_maps(model, img);
  nlohmann::json index = {{"text", set.text}, {"grid_h", set.grid_h}, {"grid_w", set.grid_w}};
  nlohmann::json chars = nlohmann::json::array();
  for (std::size_t i = 0; i < set.grids.size(); ++i) {
    const auto& g = set.grids[i];
    const double peak = *std::max_element(g.begin(), g.end());
    const double scale = peak > 0 ? 255.0 / peak : 0.0;
    Image pgm(set.grid_h, set.grid_w, 1);
    for (std::size_t k = 0; k < g.size(); ++k) pgm.px[k] = static_cast<float>(peak > 0 ? g[k] / peak : 0.0);
    char name[32];
    std::snprintf(name, sizeof name, "char_%02zu.pgm", i);
    try {
      write_pnm((fs::path(out_dir) / name).string(), pgm);
    } catch (const ImageError& e) {
      throw std::runtime_error(std::string("attention export: ") + e.what());
    }
    double sum = 0;
    for (double v : g) sum += v;
    chars.push_back({{"index", i},
                     {"char", std::string(1, set.text[i])},
                     {"file", name},
                     {"scale", scale},
                     {"grid_mass", sum},
                     {"cls_mass", set.cls_mass[i]}});
  }
  index["chars"] = chars;
  std::ofstream js(fs::path(out_dir) / "attention.json");
  if (!js) throw std::runtime_error("cannot write attention index under '" + out_dir + "'");
  js << index.dump(2) << '\n';
  return set;
}

}  // namespace cstr

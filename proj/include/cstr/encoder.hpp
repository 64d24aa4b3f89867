// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// Cascaded vision encoder. The image is cut into P x P patches, embedded,
// prefixed with a CLS token and run through C sub-transformers. Between
// sub-transformers the token set is reduced to the next scheduled count, and
// every surviving token remembers which source patches it summarizes.

#pragma once

#include <cmath>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cstr/config.hpp"
#include "cstr/image.hpp"
#include "cstr/layers.hpp"

namespace cstr {

/// Patch vectors in row-major grid order; each row holds one patch flattened
/// as (y, x, channel).
template <typename T>
struct PatchGrid {
  int grid_h = 0;
  int grid_w = 0;
  int patch_size = 0;
  Mat<T> patches;
  std::vector<std::pair<int, int>> origins;  // (y, x) pixel of each patch

  int count() const { return grid_h * grid_w; }
};

template <typename T>
PatchGrid<T> patchify(const Image& img, int patch) {
  if (patch <= 0 || img.height % patch != 0 || img.width % patch != 0)
    throw ShapeError("image " + shape_str(img.height, img.width) + " not divisible by patch " + std::to_string(patch));
  PatchGrid<T> g;
  g.grid_h = img.height / patch;
  g.grid_w = img.width / patch;
  g.patch_size = patch;
  g.patches.resize(g.count(), static_cast<Eigen::Index>(patch) * patch * img.channels);
  for (int gy = 0; gy < g.grid_h; ++gy)
    for (int gx = 0; gx < g.grid_w; ++gx) {
      const int row = gy * g.grid_w + gx;
      g.origins.emplace_back(gy * patch, gx * patch);
      Eigen::Index col = 0;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          for (int c = 0; c < img.channels; ++c) g.patches(row, col++) = static_cast<T>(img.at(gy * patch + y, gx * patch + x, c));
    }
  return g;
}

/// Source of a token: kClsSource for the CLS token, otherwise patch indices.
inline constexpr int kClsSource = -1;
using RetainedMap = std::vector<std::vector<int>>;

template <typename T>
struct TokenState {
  Var<T> tokens;
  RetainedMap retained;
  /// True while tokens 1..N-1 are exactly the patch grid in order.
  bool full_grid = false;

  int count() const { return static_cast<int>(tokens.rows()); }
};

template <typename T, typename Rng>
void init_encoder(ParamStore<T>& s, const EncoderConfig& cfg, Rng& rng, double std = kInitStd) {
  const int k = cfg.embed_dim;
  init_linear(s, "enc.patch", cfg.patch_dim(), k, rng, true, std);
  s.add("enc.cls", Mat<T>::Zero(1, k));
  s.add("enc.pos", trunc_normal<T>(cfg.num_patches() + 1, k, std, rng));
  for (int b = 0; b < cfg.total_blocks(); ++b)
    init_transformer_block(s, "enc.blocks." + std::to_string(b), k, rng, std);
  init_layer_norm(s, "enc.norm", k);
  if (cfg.selection == SelectionScheme::kConv2DStride && cfg.cascaded())
    init_linear(s, "enc.select.0", 2 * k, k, rng, true, std);
}

/// Per-image standardization of the patch matrix: zero mean and unit
/// variance over all pixels. A constant image maps to zeros.
template <typename T>
Mat<T> standardize(const Mat<T>& x) {
  if (x.size() == 0) return x;
  const double n = static_cast<double>(x.size());
  const double mean = x.template cast<double>().sum() / n;
  const double var = (x.template cast<double>().array() - mean).square().sum() / n;
  const double inv = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
  return ((x.template cast<double>().array() - mean) * inv).matrix().template cast<T>();
}

/// Linear patch projection, CLS prepended at index 0, learned 1D position
/// embedding added per index.
template <typename T>
TokenState<T> embed(const Scope<T>& sc, const PatchGrid<T>& grid) {
  const Var<T> patches = sc.tape.constant(standardize(grid.patches));
  const Var<T> x = concat_rows<T>({sc.p("enc.cls"), apply_linear(sc, "enc.patch", patches)});
  const Var<T> pos = sc.p("enc.pos");
  if (pos.rows() != x.rows())
    throw ShapeError("position table has " + std::to_string(pos.rows()) + " rows for " + std::to_string(x.rows()) + " tokens");
  TokenState<T> st;
  st.tokens = add(x, pos);
  st.retained.push_back({kClsSource});
  for (int i = 0; i < grid.count(); ++i) st.retained.push_back({i});
  st.full_grid = true;
  return st;
}

/// Adaptive windows splitting `n` rows into `m` contiguous groups:
/// [floor(i n / m), ceil((i + 1) n / m)).
inline std::vector<RowWindow> adaptive_windows(int n, int m) {
  std::vector<RowWindow> w;
  for (int i = 0; i < m; ++i)
    w.push_back({(i * n) / m, ((i + 1) * n + m - 1) / m});
  return w;
}

/// Reduces the token set to `n_out` tokens. CLS always survives at index 0.
/// `grid_w` is the patch-grid width (conv2d_stride only); `stage` selects the
/// learned reduction weights.
template <typename T>
TokenState<T> select_tokens(const Scope<T>& sc, const TokenState<T>& st, SelectionScheme scheme, int n_out,
                            int grid_w = 0, int stage = 0) {
  const int n = st.count();
  if (n_out >= n) throw ShapeError("select_tokens: N_out " + std::to_string(n_out) + " >= N " + std::to_string(n));
  if (n_out < 2) throw ShapeError("select_tokens: N_out " + std::to_string(n_out) + " < 2");

  TokenState<T> out;
  switch (scheme) {
    case SelectionScheme::kFirstN: {
      std::vector<int> keep(n_out);
      for (int i = 0; i < n_out; ++i) keep[i] = i;
      out.tokens = gather_rows(st.tokens, keep);
      out.retained.assign(st.retained.begin(), st.retained.begin() + n_out);
      break;
    }
    case SelectionScheme::kAvgPool1D:
    case SelectionScheme::kMaxPool1D: {
      auto windows = adaptive_windows(n - 1, n_out - 1);
      out.retained.push_back(st.retained[0]);
      for (auto& w : windows) {
        std::set<int> src;
        for (int r = w.begin; r < w.end; ++r) src.insert(st.retained[r + 1].begin(), st.retained[r + 1].end());
        out.retained.emplace_back(src.begin(), src.end());
        ++w.begin;
        ++w.end;
      }
      const auto mode = scheme == SelectionScheme::kAvgPool1D ? PoolMode::kAverage : PoolMode::kMax;
      out.tokens = concat_rows<T>({gather_rows(st.tokens, {0}), pool_rows(st.tokens, std::move(windows), mode)});
      break;
    }
    case SelectionScheme::kConv2DStride: {
      const int patches = n - 1;
      if (!st.full_grid || grid_w <= 0 || patches % grid_w != 0 || grid_w % 2 != 0 || n_out != 1 + patches / 2)
        throw ShapeError("conv2d_stride needs an intact patch grid with even width halving to N_out");
      std::vector<std::pair<int, int>> pairs;
      out.retained.push_back(st.retained[0]);
      for (int r = 0; r < patches / grid_w; ++r)
        for (int c = 0; c < grid_w; c += 2) {
          const int a = 1 + r * grid_w + c;
          pairs.emplace_back(a, a + 1);
          std::vector<int> src = st.retained[a];
          src.insert(src.end(), st.retained[a + 1].begin(), st.retained[a + 1].end());
          out.retained.push_back(std::move(src));
        }
      const Var<T> merged = apply_linear(sc, "enc.select." + std::to_string(stage), pair_rows(st.tokens, std::move(pairs)));
      out.tokens = concat_rows<T>({gather_rows(st.tokens, {0}), merged});
      break;
    }
  }
  return out;
}

struct EncodeTrace {
  std::vector<int> counts;  // token count entering stage 1, then leaving each stage
};

/// Runs stage `stage` (0-based): its transformer blocks, then the reduction
/// to the scheduled count unless it is the last stage.
template <typename T>
TokenState<T> apply_stage(const Scope<T>& sc, const EncoderConfig& cfg, const TokenSchedule& sched, TokenState<T> st,
                          int stage) {
  int first = 0;
  for (int i = 0; i < stage; ++i) first += cfg.blocks_per_stage[i];
  for (int b = 0; b < cfg.blocks_per_stage[stage]; ++b)
    st.tokens = apply_transformer_block(sc, "enc.blocks." + std::to_string(first + b), st.tokens, cfg.heads);
  const int target = sched.counts[stage + 1];
  if (target < st.count()) st = select_tokens(sc, st, cfg.selection, target, cfg.grid_w(), stage);
  return st;
}

/// e(x) = e_C o ... o e_1 (x), followed by the final layer norm.
template <typename T>
TokenState<T> encode(const Scope<T>& sc, const Image& img, const EncoderConfig& cfg, EncodeTrace* trace = nullptr) {
  if (img.height != cfg.image_h || img.width != cfg.image_w || img.channels != cfg.channels)
    throw ShapeError("encoder expects " + std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w) + "x" +
                     std::to_string(cfg.channels) + " images");
  const TokenSchedule sched = token_schedule(cfg);
  TokenState<T> st = embed(sc, patchify<T>(img, cfg.patch_size));
  if (trace) trace->counts = {st.count()};
  for (int i = 0; i < cfg.stages(); ++i) {
    st = apply_stage(sc, cfg, sched, std::move(st), i);
    if (trace) trace->counts.push_back(st.count());
  }
  st.tokens = apply_layer_norm(sc, "enc.norm", st.tokens);
  return st;
}

}  // namespace cstr

// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "cstr/config.hpp"
#include "cstr/decoder.hpp"
#include "cstr/encoder.hpp"

namespace cstr {

/// Encoder + decoder parameters for one configuration.
template <typename T>
struct Model {
  ModelConfig config;
  TokenSchedule schedule;
  ParamStore<T> params;

  /// Fresh weights drawn from `seed` (truncated normal with cfg.init_std,
  /// zero biases, unit layer-norm scales).
  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    Model m = empty(cfg);
    std::mt19937_64 rng(seed);
    init_encoder(m.params, m.config.encoder, rng, cfg.init_std);
    init_decoder(m.params, m.config.decoder, m.config.encoder.embed_dim, rng, cfg.init_std);
    return m;
  }

  /// Validated configuration without parameters (filled by a checkpoint).
  static Model empty(const ModelConfig& cfg) {
    Model m;
    m.config = cfg;
    m.config.decoder.charset_size = static_cast<int>(cfg.charset.size());
    if (std::set<char>(cfg.charset.begin(), cfg.charset.end()).size() != cfg.charset.size())
      throw ConfigError("charset: duplicate symbols");
    if (!(cfg.init_std > 0)) throw ConfigError("init_std: must be positive");
    m.schedule = validate(m.config.encoder, m.config.decoder).schedule;
    return m;
  }

  const EncoderConfig& enc() const { return config.encoder; }
  const DecoderConfig& dec() const { return config.decoder; }
  int eos_id() const { return dec().charset_size; }

  template <typename U>
  Model<U> cast() const {
    Model<U> m;
    m.config = config;
    m.schedule = schedule;
    m.params = params.template cast<U>();
    return m;
  }
};

/// Encoder output bridged to the decoder width, plus token bookkeeping.
template <typename T>
struct VisionTokens {
  Var<T> tokens;
  RetainedMap retained;
};

template <typename T>
VisionTokens<T> encode_image(const Scope<T>& sc, const Model<T>& m, const Image& img, EncodeTrace* trace = nullptr) {
  TokenState<T> st = encode(sc, img, m.enc(), trace);
  return {bridge(sc, st.tokens), std::move(st.retained)};
}

/// Training objective for one sample.
template <typename T>
Var<T> sample_loss(const Scope<T>& sc, const Model<T>& m, const Image& img, const std::vector<int>& chars,
                   const std::vector<Permutation>& perms, std::vector<Var<T>>* per_perm = nullptr) {
  const VisionTokens<T> v = encode_image(sc, m, img);
  return plm_loss(sc, m.dec(), v.tokens, chars, perms, per_perm);
}

struct Decoded {
  std::vector<int> ids;  // characters only, EOS excluded
};

/// Per-character vision attention gathered during greedy decoding: for each
/// emitted character, the vision-attention weights averaged over heads and
/// blocks (one value per final-stage token).
template <typename T>
struct DecodeAttention {
  std::vector<std::vector<T>> per_char;
  RetainedMap retained;
};

inline int argmax_lowest(const auto& row, int skip = -1) {
  int best = -1;
  for (int i = 0; i < static_cast<int>(row.size()); ++i) {
    if (i == skip) continue;
    if (best < 0 || row(i) > row(best)) best = i;
  }
  return best;
}

/// Left-to-right greedy decoding until EOS or max_len characters. At least
/// one character is always emitted: EOS at step 0 falls back to the best
/// non-EOS symbol.
template <typename T>
Decoded greedy_decode(const Model<T>& m, const Image& img, DecodeAttention<T>* attn = nullptr) {
  auto& params = const_cast<ParamStore<T>&>(m.params);
  Mat<T> vision;
  RetainedMap retained;
  {
    Tape<T> tape;
    const Scope<T> sc{tape, params};
    auto v = encode_image(sc, m, img);
    vision = v.tokens.value();
    retained = std::move(v.retained);
  }
  if (attn) {
    attn->per_char.clear();
    attn->retained = retained;
  }
  Decoded out;
  const int eos = m.eos_id();
  for (int t = 0; t < m.dec().max_len; ++t) {
    Tape<T> tape;
    const Scope<T> sc{tape, params};
    VisionAttention<T> vis;
    const Mat<T> logits = decode_step(sc, m.dec(), tape.constant(vision), out.ids, t, attn ? &vis : nullptr);
    int best = argmax_lowest(logits.row(0));
    if (best == eos && t == 0) best = argmax_lowest(logits.row(0), eos);
    if (best == eos) break;
    out.ids.push_back(best);
    if (attn) {
      std::vector<T> avg(static_cast<std::size_t>(vision.rows()), T(0));
      std::size_t n = 0;
      for (const auto& block : vis)
        for (const auto& head : block) {
          for (Eigen::Index j = 0; j < head.cols(); ++j) avg[j] += head(0, j);
          ++n;
        }
      for (auto& a : avg) a /= static_cast<T>(n);
      attn->per_char.push_back(std::move(avg));
    }
  }
  return out;
}

}  // namespace cstr

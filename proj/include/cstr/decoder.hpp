// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// Permuted-language decoder. A positional query stream asks for the
// character at a given position; the first cross-attention reads the
// character context under a permutation-derived visibility mask, the second
// reads the vision tokens, and an MLP follows. Stacked blocks pass only the
// query stream forward; context and vision tokens are shared by all blocks.

#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cstr/config.hpp"
#include "cstr/layers.hpp"

namespace cstr {

/// Decoding order over positions 0..n-1 (the last position is the EOS slot).
struct Permutation {
  std::vector<int> order;  // order[t] = position decoded at step t
  std::vector<int> rank;   // rank[p]  = step at which position p is decoded

  static Permutation identity(int n) {
    Permutation p;
    p.order.resize(n);
    std::iota(p.order.begin(), p.order.end(), 0);
    p.rank = p.order;
    return p;
  }

  static Permutation from_order(std::vector<int> order) {
    Permutation p;
    p.rank.assign(order.size(), -1);
    for (std::size_t t = 0; t < order.size(); ++t) {
      const int pos = order[t];
      if (pos < 0 || pos >= static_cast<int>(order.size()) || p.rank[pos] != -1)
        throw std::invalid_argument("permutation order is not a bijection");
      p.rank[pos] = static_cast<int>(t);
    }
    p.order = std::move(order);
    return p;
  }

  int size() const { return static_cast<int>(order.size()); }
  bool operator==(const Permutation&) const = default;
};

/// First permutation is the identity; the rest are uniform shuffles.
template <typename Rng>
std::vector<Permutation> sample_permutations(int k, int n, Rng& rng) {
  if (k < 1) throw std::invalid_argument("sample_permutations: k must be >= 1");
  if (n < 1) throw std::invalid_argument("sample_permutations: length must be >= 1");
  std::vector<Permutation> out{Permutation::identity(n)};
  for (int i = 1; i < k; ++i) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int j = n - 1; j > 0; --j) {
      std::uniform_int_distribution<int> pick(0, j);
      std::swap(order[j], order[pick(rng)]);
    }
    out.push_back(Permutation::from_order(std::move(order)));
  }
  return out;
}

/// (n x n) mask: position k is visible to query q iff k is decoded before q.
inline Mask context_mask(const Permutation& perm) {
  const int n = perm.size();
  Mask m(n, n, false);
  for (int q = 0; q < n; ++q)
    for (int k = 0; k < n; ++k) m.set(q, k, perm.rank[k] < perm.rank[q]);
  return m;
}

/// Context mask with a leading always-visible BOS column: (n x (1 + n)).
inline Mask decoder_mask(const Permutation& perm) {
  const Mask ctx = context_mask(perm);
  Mask m(ctx.rows, ctx.cols + 1, false);
  for (int q = 0; q < ctx.rows; ++q) {
    m.set(q, 0, true);
    for (int k = 0; k < ctx.cols; ++k) m.set(q, k + 1, ctx.visible(q, k));
  }
  return m;
}

template <typename T, typename Rng>
void init_decoder(ParamStore<T>& s, const DecoderConfig& dec, int vision_dim, Rng& rng, double std = kInitStd) {
  const int d = dec.embed_dim;
  if (vision_dim != d) init_linear(s, "dec.bridge", vision_dim, d, rng, true, std);
  s.add("dec.pos_queries", trunc_normal<T>(dec.max_positions(), d, std, rng));
  s.add("dec.ctx_pos", trunc_normal<T>(dec.max_positions(), d, std, rng));
  s.add("dec.char_embed", trunc_normal<T>(dec.classes(), d, std, rng));
  s.add("dec.bos", trunc_normal<T>(1, d, std, rng));
  for (int b = 0; b < dec.blocks; ++b) {
    const std::string n = "dec.blocks." + std::to_string(b);
    init_layer_norm(s, n + ".ln_q", d);
    init_layer_norm(s, n + ".ln_ctx", d);
    init_mha(s, n + ".ctx_attn", d, rng, std);
    init_layer_norm(s, n + ".ln_vis", d);
    init_mha(s, n + ".vis_attn", d, rng, std);
    init_layer_norm(s, n + ".ln_mlp", d);
    init_mlp(s, n + ".mlp", d, rng, std);
  }
  init_layer_norm(s, "dec.norm", d);
  init_linear(s, "dec.head", d, dec.classes(), rng, true, std);
}

/// Learned K -> D projection; identity (no parameters) when K == D.
template <typename T>
Var<T> bridge(const Scope<T>& sc, Var<T> vision) {
  if (!sc.store.contains("dec.bridge.w")) return vision;
  return apply_linear(sc, "dec.bridge", vision);
}

/// Vision-attention weights per block (each a per-head list of
/// (queries x vision tokens) matrices).
template <typename T>
using VisionAttention = std::vector<AttentionWeights<T>>;

/// One decoder block.
template <typename T>
Var<T> apply_pld_block(const Scope<T>& sc, const std::string& name, Var<T> queries, Var<T> context, Var<T> vision,
                       const Mask& mask, int heads, AttentionWeights<T>* vis_weights = nullptr) {
  const Var<T> ctx = apply_layer_norm(sc, name + ".ln_ctx", context);
  Var<T> h = add(queries, apply_mha(sc, name + ".ctx_attn", apply_layer_norm(sc, name + ".ln_q", queries), ctx, &mask, heads));
  h = add(h, apply_mha(sc, name + ".vis_attn", apply_layer_norm(sc, name + ".ln_vis", h), vision, nullptr, heads, vis_weights));
  return add(h, apply_mlp(sc, name + ".mlp", apply_layer_norm(sc, name + ".ln_mlp", h)));
}

/// Context stream: [BOS, embed(id_0) + pos_0, ..., embed(id_{m-1}) + pos_{m-1}].
template <typename T>
Var<T> context_stream(const Scope<T>& sc, const std::vector<int>& ctx_ids) {
  const Var<T> bos = sc.p("dec.bos");
  if (ctx_ids.empty()) return bos;
  std::vector<int> pos(ctx_ids.size());
  std::iota(pos.begin(), pos.end(), 0);
  const Var<T> ctx = add(gather_rows(sc.p("dec.char_embed"), ctx_ids), gather_rows(sc.p("dec.ctx_pos"), pos));
  return concat_rows<T>({bos, ctx});
}

/// Logits ((queries) x classes) for the requested positions. `vision` must
/// already be at decoder width (see bridge). `mask` is (queries x (1 + ctx)).
template <typename T>
Var<T> decode_positions(const Scope<T>& sc, const DecoderConfig& dec, Var<T> vision, const std::vector<int>& ctx_ids,
                        const std::vector<int>& query_positions, const Mask& mask, VisionAttention<T>* vis = nullptr) {
  if (vision.cols() != dec.embed_dim)
    throw ShapeError("decoder expects vision width " + std::to_string(dec.embed_dim) + ", got " + std::to_string(vision.cols()));
  for (int p : query_positions)
    if (p < 0 || p >= dec.max_positions()) throw ShapeError("query position " + std::to_string(p) + " beyond max length");
  if (static_cast<int>(ctx_ids.size()) > dec.max_positions()) throw ShapeError("context longer than max length + 1");
  const Var<T> context = context_stream(sc, ctx_ids);
  Var<T> q = gather_rows(sc.p("dec.pos_queries"), query_positions);
  if (vis) vis->assign(dec.blocks, {});
  for (int b = 0; b < dec.blocks; ++b)
    q = apply_pld_block(sc, "dec.blocks." + std::to_string(b), q, context, vision, mask, dec.heads,
                        vis ? &(*vis)[b] : nullptr);
  return apply_linear(sc, "dec.head", apply_layer_norm(sc, "dec.norm", q));
}

/// Character ids followed by EOS: the targets for positions 0..len.
inline std::vector<int> with_eos(const std::vector<int>& chars, int eos_id) {
  std::vector<int> t = chars;
  t.push_back(eos_id);
  return t;
}

/// Permutation language-modeling loss: mean over permutations of the mean
/// next-token cross-entropy over the len + 1 positions (characters + EOS).
template <typename T>
Var<T> plm_loss(const Scope<T>& sc, const DecoderConfig& dec, Var<T> vision, const std::vector<int>& chars,
                const std::vector<Permutation>& perms, std::vector<Var<T>>* per_perm = nullptr) {
  if (chars.empty()) throw std::invalid_argument("plm_loss: empty label");
  if (static_cast<int>(chars.size()) > dec.max_len) throw std::invalid_argument("plm_loss: label longer than max length");
  if (perms.empty()) throw std::invalid_argument("plm_loss: at least one permutation required");
  for (int c : chars)
    if (c < 0 || c >= dec.charset_size) throw std::invalid_argument("plm_loss: character id out of range");
  const std::vector<int> targets = with_eos(chars, dec.charset_size);
  const int n = static_cast<int>(targets.size());
  std::vector<int> positions(n);
  std::iota(positions.begin(), positions.end(), 0);

  // The context and vision streams are shared, so all permutations run as one
  // pass with their query rows and masks stacked.
  const int k = static_cast<int>(perms.size());
  Mask mask(k * n, n + 1, false);
  std::vector<int> queries;
  for (int p = 0; p < k; ++p) {
    if (perms[p].size() != n) throw std::invalid_argument("plm_loss: permutation length != label length + 1");
    const Mask m = decoder_mask(perms[p]);
    std::copy(m.bits.begin(), m.bits.end(), mask.bits.begin() + static_cast<std::ptrdiff_t>(p) * n * (n + 1));
    queries.insert(queries.end(), positions.begin(), positions.end());
  }
  const Var<T> logits = decode_positions(sc, dec, vision, targets, queries, mask);
  std::vector<Var<T>> terms;
  for (int p = 0; p < k; ++p) {
    std::vector<int> rows(n);
    std::iota(rows.begin(), rows.end(), p * n);
    terms.push_back(cross_entropy(k == 1 ? logits : gather_rows(logits, rows), targets));
  }
  if (per_perm) *per_perm = terms;
  return mean_scalars(terms);
}

/// Logits for position t in left-to-right order given the decoded prefix.
template <typename T>
Mat<T> decode_step(const Scope<T>& sc, const DecoderConfig& dec, Var<T> vision, const std::vector<int>& prefix, int t,
                   VisionAttention<T>* vis = nullptr) {
  if (t < 0 || t >= dec.max_positions()) throw std::invalid_argument("decode_step: t beyond max length");
  if (static_cast<int>(prefix.size()) != t) throw std::invalid_argument("decode_step: prefix length must equal t");
  const Mask mask(1, t + 1, true);
  return decode_positions(sc, dec, vision, prefix, {t}, mask, vis).value();
}

}  // namespace cstr

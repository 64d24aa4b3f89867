// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// Parameterized layers built from autograd ops. Parameters live in a
// ParamStore under dotted names ("enc.blocks.3.attn.wq.w").

#pragma once

#include <string>

#include "cstr/autograd.hpp"

namespace cstr {

/// A tape plus the store its parameters are bound from.
template <typename T>
struct Scope {
  Tape<T>& tape;
  ParamStore<T>& store;

  Var<T> p(const std::string& name) const { return tape.param(store, name); }
};

/// Default standard deviation of the truncated-normal weight init.
inline constexpr double kInitStd = 0.02;

template <typename T, typename Rng>
void init_linear(ParamStore<T>& s, const std::string& name, int in, int out, Rng& rng, bool bias = true,
                 double std = kInitStd) {
  s.add(name + ".w", trunc_normal<T>(in, out, std, rng));
  if (bias) s.add(name + ".b", Mat<T>::Zero(1, out));
}

template <typename T>
void init_layer_norm(ParamStore<T>& s, const std::string& name, int dim) {
  s.add(name + ".g", Mat<T>::Ones(1, dim));
  s.add(name + ".b", Mat<T>::Zero(1, dim));
}

template <typename T>
Var<T> apply_linear(const Scope<T>& sc, const std::string& name, Var<T> x) {
  return linear(x, sc.p(name + ".w"), sc.store.contains(name + ".b") ? sc.p(name + ".b") : Var<T>{});
}

template <typename T>
Var<T> apply_layer_norm(const Scope<T>& sc, const std::string& name, Var<T> x) {
  return layer_norm(x, sc.p(name + ".g"), sc.p(name + ".b"));
}

template <typename T, typename Rng>
void init_mha(ParamStore<T>& s, const std::string& name, int dim, Rng& rng, double std = kInitStd) {
  for (const char* proj : {".wq", ".wk", ".wv", ".wo"}) init_linear(s, name + proj, dim, dim, rng, true, std);
}

/// Projected multi-head attention: queries from `xq`, keys/values from `xkv`.
template <typename T>
Var<T> apply_mha(const Scope<T>& sc, const std::string& name, Var<T> xq, Var<T> xkv, const Mask* mask, int heads,
                 AttentionWeights<T>* weights_out = nullptr) {
  const Var<T> q = apply_linear(sc, name + ".wq", xq);
  const Var<T> k = apply_linear(sc, name + ".wk", xkv);
  const Var<T> v = apply_linear(sc, name + ".wv", xkv);
  return apply_linear(sc, name + ".wo", attention(q, k, v, mask, heads, weights_out));
}

inline constexpr int kMlpRatio = 4;

template <typename T, typename Rng>
void init_mlp(ParamStore<T>& s, const std::string& name, int dim, Rng& rng, double std = kInitStd) {
  init_linear(s, name + ".fc1", dim, kMlpRatio * dim, rng, true, std);
  init_linear(s, name + ".fc2", kMlpRatio * dim, dim, rng, true, std);
}

template <typename T>
Var<T> apply_mlp(const Scope<T>& sc, const std::string& name, Var<T> x) {
  return apply_linear(sc, name + ".fc2", gelu(apply_linear(sc, name + ".fc1", x)));
}

template <typename T, typename Rng>
void init_transformer_block(ParamStore<T>& s, const std::string& name, int dim, Rng& rng, double std = kInitStd) {
  init_layer_norm(s, name + ".ln1", dim);
  init_mha(s, name + ".attn", dim, rng, std);
  init_layer_norm(s, name + ".ln2", dim);
  init_mlp(s, name + ".mlp", dim, rng, std);
}

/// Pre-norm encoder block: x + MHA(LN(x)), then x + MLP(LN(x)).
template <typename T>
Var<T> apply_transformer_block(const Scope<T>& sc, const std::string& name, Var<T> x, int heads) {
  const Var<T> h = apply_layer_norm(sc, name + ".ln1", x);
  x = add(x, apply_mha(sc, name + ".attn", h, h, nullptr, heads));
  return add(x, apply_mlp(sc, name + ".mlp", apply_layer_norm(sc, name + ".ln2", x)));
}

}  // namespace cstr

// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense row-major matrices.
// Every op records its value and a closure that pushes the output gradient
// back to its inputs. Nodes are addressed by index, so the tape can grow
// while earlier Var handles stay valid.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <unsupported/Eigen/SpecialFunctions>

#include "cstr/tensor.hpp"

namespace cstr {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Mat<T>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Attention visibility: visible(q, k) == true lets query q read key k.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int r, int c, bool fill) : rows(r), cols(c), bits(static_cast<std::size_t>(r) * c, fill ? 1 : 0) {}

  bool visible(int q, int k) const { return bits[static_cast<std::size_t>(q) * cols + k] != 0; }
  void set(int q, int k, bool v) { bits[static_cast<std::size_t>(q) * cols + k] = v ? 1 : 0; }
  int count_row(int q) const {
    int n = 0;
    for (int k = 0; k < cols; ++k) n += visible(q, k);
    return n;
  }
};

/// A NaN or Inf anywhere makes the sum non-finite; finite sums above the
/// float range are treated as overflow too.
template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return std::isfinite(m.sum());
}

/// Added to the scores of hidden keys before the softmax.
inline constexpr double kMaskPenalty = -1e9;

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Mat<T> v) { return push("constant", std::move(v), false, nullptr); }

  /// Leaf that receives a gradient (readable via grad()).
  Var<T> input(Mat<T> v) { return push("input", std::move(v), true, nullptr); }

  /// Leaf bound to a stored parameter. Its gradient is added to the store's
  /// gradient slot when backward() finishes. Repeated calls share one node.
  Var<T> param(ParamStore<T>& store, const std::string& name) {
    auto& e = store.entry(name);
    if (auto it = param_nodes_.find(&e.value); it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.external = &e.value;
    n.param_grad = &e.grad;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_[&e.value] = id;
    return {this, id};
  }

  const Mat<T>& value(Var<T> v) const {
    const Node& n = nodes_[v.id];
    return n.external ? *n.external : n.value;
  }
  const Mat<T>& value(int id) const { return value(Var<T>{const_cast<Tape*>(this), id}); }

  /// Gradient of the last backward() target w.r.t. v (empty if unreached).
  const Mat<T>& grad(Var<T> v) const { return nodes_[v.id].grad; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1x1 node.
  void backward(Var<T> loss) {
    if (value(loss).size() != 1) throw ShapeError("backward() needs a scalar, got " + shape_str(value(loss)));
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[loss.id].grad = Mat<T>::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (!all_finite(n.grad)) throw NumericError("non-finite gradient at '" + std::string(n.op) + "'");
      if (n.backward) n.backward(*this, i);
    }
    for (auto& n : nodes_)
      if (n.param_grad && n.grad.size() != 0) *n.param_grad += n.grad;
  }

  // Op plumbing.

  Var<T> push(std::string_view op, Mat<T> v, bool needs_grad, Backward fn) {
    if (!all_finite(v)) throw NumericError("non-finite value produced by '" + std::string(op) + "'");
    Node n;
    n.op = op;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<T>& out_grad(int self) const { return nodes_[self].grad; }

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = g;
    else n.grad += g;
  }

 private:
  struct Node {
    std::string_view op = "param";
    Mat<T> value;
    const Mat<T>* external = nullptr;
    Mat<T>* param_grad = nullptr;
    Mat<T> grad;
    bool needs_grad = false;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::map<const void*, int> param_nodes_;
};

namespace detail {

template <typename T>
bool any_needs_grad(std::initializer_list<Var<T>> vs) {
  for (const auto& v : vs)
    if (v.valid() && v.tape->needs_grad(v.id)) return true;
  return false;
}

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape != b.tape) throw std::invalid_argument("vars recorded on different tapes");
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.cols() != B.rows()) throw ShapeError("matmul " + shape_str(A) + " * " + shape_str(B));
  Mat<T> out = A * B;
  const int ia = a.id, ib = b.id;
  return a.tape->push("matmul", std::move(out), detail::any_needs_grad({a, b}), [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.out_grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// x (N x in) * W (in x out) + b (1 x out). Pass an invalid Var for no bias.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b = {}) {
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.cols() != W.rows()) throw ShapeError("linear " + shape_str(X) + " * " + shape_str(W));
  Mat<T> out = X * W;
  const bool has_bias = b.valid();
  if (has_bias) {
    const auto& B = b.value();
    if (B.rows() != 1 || B.cols() != W.cols()) throw ShapeError("linear bias " + shape_str(B));
    out.rowwise() += B.row(0);
  }
  const int ix = x.id, iw = w.id, ib = b.id;
  const bool ng = detail::any_needs_grad({x, w, b});
  return x.tape->push("linear", std::move(out), ng, [ix, iw, ib, has_bias](Tape<T>& t, int self) {
    const auto& g = t.out_grad(self);
    if (t.needs_grad(ix)) t.accumulate(ix, g * t.value(iw).transpose());
    if (t.needs_grad(iw)) t.accumulate(iw, t.value(ix).transpose() * g);
    if (has_bias && t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeError("add " + shape_str(A) + " + " + shape_str(B));
  Mat<T> out = A + B;
  const int ia = a.id, ib = b.id;
  return a.tape->push("add", std::move(out), detail::any_needs_grad({a, b}), [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.out_grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Mat<T> out = a.value() * s;
  const int ia = a.id;
  return a.tape->push("scale", std::move(out), detail::any_needs_grad({a}),
                      [ia, s](Tape<T>& t, int self) { t.accumulate(ia, t.out_grad(self) * s); });
}

/// Row-wise layer normalization with affine gamma/beta (both 1 x D).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const auto& X = x.value();
  const auto& G = gamma.value();
  const auto& B = beta.value();
  const Eigen::Index n = X.rows(), d = X.cols();
  if (G.cols() != d || B.cols() != d || G.rows() != 1 || B.rows() != 1)
    throw ShapeError("layer_norm " + shape_str(X) + " with gamma " + shape_str(G));
  Mat<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mu = X.row(i).mean();
    const T var = (X.row(i).array() - mu).square().mean();
    rstd(i) = T(1) / std::sqrt(var + eps);
    xhat.row(i) = (X.row(i).array() - mu) * rstd(i);
  }
  Mat<T> out = (xhat.array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->push("layer_norm", std::move(out), detail::any_needs_grad({x, gamma, beta}),
                      [ix, ig, ib, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, int self) {
                        const auto& g = t.out_grad(self);
                        if (t.needs_grad(ig)) t.accumulate(ig, (g.array() * xhat.array()).colwise().sum().matrix());
                        if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
                        if (t.needs_grad(ix)) {
                          const auto& G = t.value(ig);
                          Mat<T> dxhat = g.array().rowwise() * G.row(0).array();
                          Mat<T> dx(dxhat.rows(), dxhat.cols());
                          for (Eigen::Index i = 0; i < dx.rows(); ++i) {
                            const T m1 = dxhat.row(i).mean();
                            const T m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
                            dx.row(i) = rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
                          }
                          t.accumulate(ix, dx);
                        }
                      });
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
  const auto X = x.value().array();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  // Phi(x), kept for the backward pass.
  auto cdf = std::make_shared<Mat<T>>((T(0.5) * (T(1) + (X * inv_sqrt2).erf())).matrix());
  Mat<T> out = (X * cdf->array()).matrix();
  const int ix = x.id;
  return x.tape->push("gelu", std::move(out), detail::any_needs_grad({x}), [ix, cdf](Tape<T>& t, int self) {
    const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    const auto X = t.value(ix).array();
    const auto d = cdf->array() + X * (T(-0.5) * X.square()).exp() * inv_sqrt_2pi;
    t.accumulate(ix, (d * t.out_grad(self).array()).matrix());
  });
}

/// Per-head attention weights recorded during a forward pass.
template <typename T>
using AttentionWeights = std::vector<Mat<T>>;

/// Multi-head scaled dot-product attention without projections:
/// q (Nq x D), k and v (Nk x D), D split evenly across heads. Hidden keys get
/// kMaskPenalty added to their score. A query row with no visible key is an
/// error. When `weights_out` is set it receives one (Nq x Nk) matrix per head.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const Mask* mask, int heads,
                 AttentionWeights<T>* weights_out = nullptr) {
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  const Eigen::Index nq = Q.rows(), nk = K.rows(), d = Q.cols();
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention dim " + std::to_string(d) + " not divisible by heads");
  if (K.cols() != d || V.cols() != d || V.rows() != nk)
    throw ShapeError("attention q" + shape_str(Q) + " k" + shape_str(K) + " v" + shape_str(V));
  if (mask && (mask->rows != nq || mask->cols != nk))
    throw ShapeError("attention mask " + shape_str(mask->rows, mask->cols) + " vs scores " + shape_str(nq, nk));
  if (mask)
    for (int i = 0; i < nq; ++i)
      if (mask->count_row(i) == 0) throw ShapeError("attention row " + std::to_string(i) + " has no visible key");

  const Eigen::Index dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<AttentionWeights<T>>();
  probs->reserve(heads);
  Mat<T> out(nq, d);
  for (int h = 0; h < heads; ++h) {
    Mat<T> s = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * sc;
    if (mask)
      for (Eigen::Index i = 0; i < nq; ++i)
        for (Eigen::Index j = 0; j < nk; ++j)
          if (!mask->visible(static_cast<int>(i), static_cast<int>(j))) s(i, j) += static_cast<T>(kMaskPenalty);
    for (Eigen::Index i = 0; i < nq; ++i) {
      const T mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp();
      s.row(i) /= s.row(i).sum();
    }
    out.middleCols(h * dh, dh).noalias() = s * V.middleCols(h * dh, dh);
    probs->push_back(std::move(s));
  }
  if (weights_out) *weights_out = *probs;

  const int iq = q.id, ik = k.id, iv = v.id;
  return q.tape->push("attention", std::move(out), detail::any_needs_grad({q, k, v}),
                      [iq, ik, iv, heads, dh, sc, probs](Tape<T>& t, int self) {
                        const auto& g = t.out_grad(self);
                        const auto& Q = t.value(iq);
                        const auto& K = t.value(ik);
                        const auto& V = t.value(iv);
                        Mat<T> dq = Mat<T>::Zero(Q.rows(), Q.cols());
                        Mat<T> dk = Mat<T>::Zero(K.rows(), K.cols());
                        Mat<T> dv = Mat<T>::Zero(V.rows(), V.cols());
                        for (int h = 0; h < heads; ++h) {
                          const Mat<T>& p = (*probs)[h];
                          const auto go = g.middleCols(h * dh, dh);
                          Mat<T> dp = go * V.middleCols(h * dh, dh).transpose();
                          dv.middleCols(h * dh, dh).noalias() += p.transpose() * go;
                          Eigen::Matrix<T, Eigen::Dynamic, 1> rs = (dp.array() * p.array()).rowwise().sum();
                          Mat<T> ds = (p.array() * (dp.array().colwise() - rs.array())) * sc;
                          dq.middleCols(h * dh, dh).noalias() += ds * K.middleCols(h * dh, dh);
                          dk.middleCols(h * dh, dh).noalias() += ds.transpose() * Q.middleCols(h * dh, dh);
                        }
                        t.accumulate(iq, dq);
                        t.accumulate(ik, dk);
                        t.accumulate(iv, dv);
                      });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  bool ng = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows column mismatch");
    rows += p.rows();
    ng = ng || p.tape->needs_grad(p.id);
  }
  Mat<T> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id, p.rows());
    r += p.rows();
  }
  return parts[0].tape->push("concat_rows", std::move(out), ng, [spans](Tape<T>& t, int self) {
    const auto& g = t.out_grad(self);
    Eigen::Index r = 0;
    for (const auto& [id, n] : spans) {
      if (t.needs_grad(id)) t.accumulate(id, g.middleRows(r, n));
      r += n;
    }
  });
}

/// out.row(i) = x.row(index[i]); indices may repeat.
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<int> index) {
  const auto& X = x.value();
  Mat<T> out(static_cast<Eigen::Index>(index.size()), X.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= X.rows())
      throw ShapeError("gather_rows index " + std::to_string(index[i]) + " out of " + std::to_string(X.rows()));
    out.row(static_cast<Eigen::Index>(i)) = X.row(index[i]);
  }
  const int ix = x.id;
  return x.tape->push("gather_rows", std::move(out), detail::any_needs_grad({x}),
                      [ix, index = std::move(index)](Tape<T>& t, int self) {
                        const auto& g = t.out_grad(self);
                        const auto& X = t.value(ix);
                        Mat<T> dx = Mat<T>::Zero(X.rows(), X.cols());
                        for (std::size_t i = 0; i < index.size(); ++i) dx.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
                        t.accumulate(ix, dx);
                      });
}

enum class PoolMode { kAverage, kMax };

/// Half-open row window [begin, end).
struct RowWindow {
  int begin = 0;
  int end = 0;
};

/// One output row per window: mean or elementwise max over the window's rows.
template <typename T>
Var<T> pool_rows(Var<T> x, std::vector<RowWindow> windows, PoolMode mode) {
  const auto& X = x.value();
  const Eigen::Index d = X.cols();
  Mat<T> out(static_cast<Eigen::Index>(windows.size()), d);
  // Source row of each max, per (window, column).
  std::vector<int> argmax;
  if (mode == PoolMode::kMax) argmax.resize(windows.size() * static_cast<std::size_t>(d));
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto [b, e] = windows[w];
    if (b < 0 || e > X.rows() || b >= e) throw ShapeError("pool_rows window out of range");
    const auto row = static_cast<Eigen::Index>(w);
    if (mode == PoolMode::kAverage) {
      out.row(row) = X.middleRows(b, e - b).colwise().mean();
    } else {
      for (Eigen::Index c = 0; c < d; ++c) {
        int best = b;
        for (int r = b + 1; r < e; ++r)
          if (X(r, c) > X(best, c)) best = r;
        out(row, c) = X(best, c);
        argmax[w * d + c] = best;
      }
    }
  }
  const int ix = x.id;
  return x.tape->push("pool_rows", std::move(out), detail::any_needs_grad({x}),
                      [ix, windows = std::move(windows), argmax = std::move(argmax), mode](Tape<T>& t, int self) {
                        const auto& g = t.out_grad(self);
                        const auto& X = t.value(ix);
                        Mat<T> dx = Mat<T>::Zero(X.rows(), X.cols());
                        for (std::size_t w = 0; w < windows.size(); ++w) {
                          const auto row = static_cast<Eigen::Index>(w);
                          if (mode == PoolMode::kAverage) {
                            const int n = windows[w].end - windows[w].begin;
                            for (int r = windows[w].begin; r < windows[w].end; ++r) dx.row(r) += g.row(row) / static_cast<T>(n);
                          } else {
                            for (Eigen::Index c = 0; c < X.cols(); ++c) dx(argmax[w * X.cols() + c], c) += g(row, c);
                          }
                        }
                        t.accumulate(ix, dx);
                      });
}

/// out.row(i) = [x.row(pairs[i].first), x.row(pairs[i].second)] (2D columns).
template <typename T>
Var<T> pair_rows(Var<T> x, std::vector<std::pair<int, int>> pairs) {
  const auto& X = x.value();
  const Eigen::Index d = X.cols();
  Mat<T> out(static_cast<Eigen::Index>(pairs.size()), 2 * d);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out.row(r).head(d) = X.row(pairs[i].first);
    out.row(r).tail(d) = X.row(pairs[i].second);
  }
  const int ix = x.id;
  return x.tape->push("pair_rows", std::move(out), detail::any_needs_grad({x}),
                      [ix, pairs = std::move(pairs)](Tape<T>& t, int self) {
                        const auto& g = t.out_grad(self);
                        const auto& X = t.value(ix);
                        const Eigen::Index d = X.cols();
                        Mat<T> dx = Mat<T>::Zero(X.rows(), d);
                        for (std::size_t i = 0; i < pairs.size(); ++i) {
                          const auto r = static_cast<Eigen::Index>(i);
                          dx.row(pairs[i].first) += g.row(r).head(d);
                          dx.row(pairs[i].second) += g.row(r).tail(d);
                        }
                        t.accumulate(ix, dx);
                      });
}

/// Mean token cross-entropy of row-wise softmax(logits) against targets.
/// Rows whose target equals ignore_id are skipped; all rows skipped is an error.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets, int ignore_id = -1) {
  const auto& Z = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != Z.rows())
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(Z));
  Mat<T> p(Z.rows(), Z.cols());
  T loss = 0;
  int counted = 0;
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    const T mx = Z.row(i).maxCoeff();
    p.row(i) = (Z.row(i).array() - mx).exp();
    const T sum = p.row(i).sum();
    p.row(i) /= sum;
    const int y = targets[static_cast<std::size_t>(i)];
    if (y == ignore_id) continue;
    if (y < 0 || y >= Z.cols()) throw ShapeError("cross_entropy target " + std::to_string(y) + " out of range");
    loss += std::log(sum) + mx - Z(i, y);
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy: no non-ignored targets");
  Mat<T> out(1, 1);
  out(0, 0) = loss / static_cast<T>(counted);
  const int iz = logits.id;
  return logits.tape->push("cross_entropy", std::move(out), detail::any_needs_grad({logits}),
                           [iz, targets, ignore_id, counted, p = std::move(p)](Tape<T>& t, int self) {
                             const T g = t.out_grad(self)(0, 0) / static_cast<T>(counted);
                             Mat<T> dz = p * g;
                             for (Eigen::Index i = 0; i < dz.rows(); ++i) {
                               const int y = targets[static_cast<std::size_t>(i)];
                               if (y == ignore_id) dz.row(i).setZero();
                               else dz(i, y) -= g;
                             }
                             t.accumulate(iz, dz);
                           });
}

/// Mean of 1x1 nodes.
template <typename T>
Var<T> mean_scalars(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_scalars of nothing");
  Mat<T> out = Mat<T>::Zero(1, 1);
  bool ng = false;
  std::vector<int> ids;
  for (const auto& x : xs) {
    if (x.value().size() != 1) throw ShapeError("mean_scalars expects 1x1 inputs");
    out(0, 0) += x.value()(0, 0);
    ng = ng || x.tape->needs_grad(x.id);
    ids.push_back(x.id);
  }
  const T inv = T(1) / static_cast<T>(xs.size());
  out *= inv;
  return xs[0].tape->push("mean_scalars", std::move(out), ng, [ids, inv](Tape<T>& t, int self) {
    const Mat<T> g = t.out_grad(self) * inv;
    for (int id : ids) t.accumulate(id, g);
  });
}

/// sum(x .* weights) as a 1x1 node; turns any output into a scalar for checks.
template <typename T>
Var<T> weighted_sum(Var<T> x, const Mat<T>& weights) {
  const auto& X = x.value();
  if (X.rows() != weights.rows() || X.cols() != weights.cols())
    throw ShapeError("weighted_sum " + shape_str(X) + " vs " + shape_str(weights));
  Mat<T> out(1, 1);
  out(0, 0) = (X.array() * weights.array()).sum();
  const int ix = x.id;
  return x.tape->push("weighted_sum", std::move(out), detail::any_needs_grad({x}),
                      [ix, weights](Tape<T>& t, int self) { t.accumulate(ix, weights * t.out_grad(self)(0, 0)); });
}

/// Row-wise softmax without recording (inference helper).
template <typename T>
Mat<T> softmax_rows(const Mat<T>& z) {
  Mat<T> p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    p.row(i) = (z.row(i).array() - z.row(i).maxCoeff()).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

/// Relative error with an absolute floor so entries near zero compare on
/// absolute terms.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of `f` against central differences
/// (f(x+eps) - f(x-eps)) / 2eps for every entry of every parameter in
/// `store`. `f` records a scalar on the tape it is given.
template <typename F>
GradCheckResult grad_check(F&& f, ParamStore<double>& store, double eps = 1e-5) {
  store.zero_grad();
  {
    Tape<double> tape;
    tape.backward(f(tape, store));
  }
  auto eval = [&]() {
    Tape<double> tape;
    return f(tape, store).value()(0, 0);
  };
  GradCheckResult res;
  for (auto& e : store.entries()) {
    for (Eigen::Index i = 0; i < e.value.size(); ++i) {
      const double orig = e.value.data()[i];
      e.value.data()[i] = orig + eps;
      const double up = eval();
      e.value.data()[i] = orig - eps;
      const double down = eval();
      e.value.data()[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double err = relative_error(e.grad.data()[i], numeric);
      if (!std::isfinite(err)) throw NumericError("grad_check: non-finite comparison for '" + e.name + "'");
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = e.name;
      }
      ++res.checked;
    }
  }
  return res;
}

}  // namespace cstr

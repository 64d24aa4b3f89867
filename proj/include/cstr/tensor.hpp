// Copyright (c) 2026, The cstr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace cstr {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matf = Mat<float>;
using Matd = Mat<double>;

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <typename T>
std::string shape_str(const Mat<T>& m) {
  return shape_str(m.rows(), m.cols());
}

/// Named parameters with one gradient slot each, iterated in insertion order.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
  };

  Mat<T>& add(const std::string& name, Mat<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    Mat<T> grad = Mat<T>::Zero(value.rows(), value.cols());
    entries_.push_back({name, std::move(value), std::move(grad)});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Entry& entry(const std::string& name) { return entries_.at(slot(name)); }
  const Entry& entry(const std::string& name) const { return entries_.at(slot(name)); }
  Mat<T>& value(const std::string& name) { return entry(name).value; }
  const Mat<T>& value(const std::string& name) const { return entry(name).value; }
  Mat<T>& grad(const std::string& name) { return entry(name).grad; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.setZero();
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

 private:
  std::size_t slot(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Normal(0, stddev) truncated to +-2 stddev by resampling.
template <typename T, typename Rng>
Mat<T> trunc_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    m.data()[i] = static_cast<T>(z * stddev);
  }
  return m;
}

}  // namespace cstr

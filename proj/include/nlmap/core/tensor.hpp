#pragma once

#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nlmap {

/// Dense row-major tensor. Shapes are kept as (rows, cols); vectors are
/// (n, 1) and scalars (1, 1). All training-facing math in this project is
/// two-dimensional at most.
template <typename S>
struct Tensor {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<S> data;

  Tensor() = default;
  Tensor(int64_t r, int64_t c) : rows(r), cols(c), data(static_cast<size_t>(r * c), S(0)) {
    if (r < 0 || c < 0) throw std::invalid_argument("tensor: negative shape");
  }

  static Tensor zeros(int64_t r, int64_t c = 1) { return Tensor(r, c); }

  static Tensor full(int64_t r, int64_t c, S v) {
    Tensor t(r, c);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor scalar(S v) {
    Tensor t(1, 1);
    t.data[0] = v;
    return t;
  }

  static Tensor from(std::initializer_list<S> vals) {
    Tensor t(static_cast<int64_t>(vals.size()), 1);
    std::copy(vals.begin(), vals.end(), t.data.begin());
    return t;
  }

  static Tensor uniform(int64_t r, int64_t c, S lo, S hi, std::mt19937_64& rng) {
    Tensor t(r, c);
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& x : t.data) x = static_cast<S>(dist(rng));
    return t;
  }

  static Tensor normal(int64_t r, int64_t c, S stddev, std::mt19937_64& rng) {
    Tensor t(r, c);
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& x : t.data) x = static_cast<S>(dist(rng));
    return t;
  }

  int64_t numel() const { return rows * cols; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  S& operator()(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols + c)]; }
  S operator()(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }
  S& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  void fill(S v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (S x : data)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(rows, cols);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<T>(data[static_cast<size_t>(i)]);
    return out;
  }
};

}  // namespace nlmap

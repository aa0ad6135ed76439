// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"

namespace spflow {

/// Dense row-major rank-2 array. Vectors are n x 1 or 1 x n, scalars 1 x 1.
template <class Real = double>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  /// Row-major literal, e.g. Tensor<>::from_rows({{1, 2}, {3, 4}}).
  static Tensor from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Tensor t(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      require(row.size() == c, "Tensor::from_rows: ragged rows");
      std::copy(row.begin(), row.end(), t.data_.begin() + i * c);
      ++i;
    }
    return t;
  }

  static Tensor scalar(Real v) { return Tensor(1, 1, v); }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::array<std::size_t, 2> shape() const noexcept { return {rows_, cols_}; }
  bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const Real& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }

  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<Real> values() noexcept { return data_; }
  std::span<const Real> values() const noexcept { return data_; }
  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }

  Real item() const {
    require(size() == 1, "Tensor::item on non-scalar");
    return data_[0];
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  std::string shape_string() const {
    return "[" + std::to_string(rows_) + " x " + std::to_string(cols_) + "]";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

namespace kernels {

namespace detail {

template <class Real>
Real dot(const Real* x, const Real* y, std::size_t len) {
  Real acc[4] = {0, 0, 0, 0};
  std::size_t j = 0;
  for (; j + 4 <= len; j += 4)
    for (std::size_t l = 0; l < 4; ++l) acc[l] += x[j + l] * y[j + l];
  for (; j < len; ++j) acc[0] += x[j] * y[j];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

}  // namespace detail

// C (n x m) += A (n x k) * B (k x m)
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t n, std::size_t k, std::size_t m) {
  if (m == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      const Real* ai = a + i * k;
      c[i] += detail::dot(ai, b, k);
    }
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    Real* ci = c + i * m;
    const Real* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = ai[p];
      const Real* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}


// C (n x k) += G (n x m) * B^T, B is k x m
template <class Real>
void gemm_nt(const Real* g, const Real* b, Real* c, std::size_t n, std::size_t m, std::size_t k) {
  if (m < 16) {
    std::vector<Real> bt(m * k);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = b[p * m + j];
    gemm_nn(g, bt.data(), c, n, m, k);
    return;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Real* gi = g + i * m;
    Real* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) ci[p] += detail::dot(gi, b + p * m, m);
  }
}

// C (k x m) += A^T * G, A is n x k, G is n x m
template <class Real>
void gemm_tn(const Real* a, const Real* g, Real* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const Real* ai = a + i * k;
    const Real* gi = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = ai[p];
      Real* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += av * gi[j];
    }
  }
}

}  // namespace kernels

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require(a.cols() == b.rows(), "matmul: inner extents differ " + a.shape_string() + " * " + b.shape_string());
  Tensor<Real> c(a.rows(), b.cols());
  kernels::gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  Tensor<Real> t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace spflow

/* Copyright 2026 The smola Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <utility>
#include <vector>

#include "smola/error.hpp"

namespace smola {

// Dense row-major matrix of doubles. A value type: copies are deep.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                       " does not match " + shape().str());
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) {
        throw ShapeError("Matrix::from_rows: ragged row " + std::to_string(i));
      }
      std::copy(row.begin(), row.end(), m.row(i).begin());
      ++i;
    }
    return m;
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  Shape shape() const noexcept { return {rows_, cols_}; }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Multiply-add instrumentation. Kernels below report m*k*n for every product
// they evaluate into the active counter (if any), split into caller-chosen
// buckets. Counting is per thread.
namespace madd {

inline constexpr std::size_t kMaxBuckets = 8;

struct Counter {
  std::array<std::uint64_t, kMaxBuckets> buckets{};

  std::uint64_t total() const noexcept {
    std::uint64_t t = 0;
    for (auto b : buckets) t += b;
    return t;
  }
};

namespace detail {
inline thread_local Counter* active = nullptr;
inline thread_local std::size_t bucket = 0;
}  // namespace detail

inline void record(std::uint64_t n) noexcept {
  if (detail::active != nullptr) detail::active->buckets[detail::bucket] += n;
}

/// Activates a counter for the current thread for the lifetime of the scope.
class CountingScope {
 public:
  explicit CountingScope(Counter& counter) noexcept
      : previous_(detail::active), previous_bucket_(detail::bucket) {
    detail::active = &counter;
    detail::bucket = 0;
  }
  ~CountingScope() {
    detail::active = previous_;
    detail::bucket = previous_bucket_;
  }
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  Counter* previous_;
  std::size_t previous_bucket_;
};

/// Routes counts recorded inside the scope to `bucket`.
class BucketScope {
 public:
  explicit BucketScope(std::size_t bucket) noexcept : previous_(detail::bucket) {
    detail::bucket = bucket < kMaxBuckets ? bucket : kMaxBuckets - 1;
  }
  ~BucketScope() { detail::bucket = previous_; }
  BucketScope(const BucketScope&) = delete;
  BucketScope& operator=(const BucketScope&) = delete;

 private:
  std::size_t previous_;
};

}  // namespace madd

// ---------------------------------------------------------------------------
// Kernels. Accumulation order is fixed (ascending inner index) so results are
// reproducible bit for bit.

/// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.row(i).data();
    const double* ai = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b.row(p).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  madd::record(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

/// a * b^T. b is transposed once so the inner loop runs along contiguous
/// columns; each entry still accumulates over ascending p.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt", a.shape(), b.shape());
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b.row(j).data();
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = bj[p];
  }
  Matrix c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.row(i).data();
    const double* ai = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = bt.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  madd::record(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

/// a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_tn", a.shape(), b.shape());
  const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
  Matrix c(m, n);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a.row(p).data();
    const double* bp = b.row(p).data();
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
  madd::record(static_cast<std::uint64_t>(m) * k * n);
  return c;
}

/// a * x for a vector x of length a.cols().
inline std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw ShapeError("matvec", a.shape(), Shape{x.size(), 1});
  std::vector<double> y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.row(i).data();
    double s = 0.0;
    for (std::size_t p = 0; p < x.size(); ++p) s += ai[p] * x[p];
    y[i] = s;
  }
  madd::record(static_cast<std::uint64_t>(a.rows()) * a.cols());
  return y;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix& add_inplace(Matrix& a, const Matrix& b) {
  if (a.shape() != b.shape()) throw ShapeError("add", a.shape(), b.shape());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
  return a;
}

inline Matrix operator+(Matrix a, const Matrix& b) { return add_inplace(a, b); }

inline Matrix operator-(Matrix a, const Matrix& b) {
  if (a.shape() != b.shape()) throw ShapeError("subtract", a.shape(), b.shape());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] -= bv[i];
  return a;
}

inline Matrix operator*(double s, Matrix a) {
  for (double& v : a.values()) v *= s;
  return a;
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff", a.shape(), b.shape());
  double m = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

inline bool all_finite(const Matrix& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](double v) { return std::isfinite(v); });
}

/// Rows of `a` selected by `indices`, in order.
inline Matrix gather_rows(const Matrix& a, std::span<const std::size_t> indices) {
  Matrix g(indices.size(), a.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = a.row(indices[i]);
    std::copy(src.begin(), src.end(), g.row(i).begin());
  }
  return g;
}

/// dst.row(indices[i]) += src.row(i)
inline void scatter_add_rows(Matrix& dst, const Matrix& src, std::span<const std::size_t> indices) {
  if (src.rows() != indices.size() || src.cols() != dst.cols()) {
    throw ShapeError("scatter_add_rows", dst.shape(), src.shape());
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto d = dst.row(indices[i]);
    auto s = src.row(i);
    for (std::size_t j = 0; j < d.size(); ++j) d[j] += s[j];
  }
}

}  // namespace smola

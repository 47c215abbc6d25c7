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

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "smola/numkit/matrix.hpp"

namespace smola {

inline constexpr double kNormEpsilon = 1e-12;

enum class Axis {
  over_cols,  // each row is a distribution
  over_rows,  // each column is a distribution
};

/// Max-shifted softmax along `axis`.
inline Matrix softmax_axis(const Matrix& m, Axis axis) {
  Matrix out(m.rows(), m.cols());
  if (axis == Axis::over_cols) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      auto in = m.row(i);
      auto o = out.row(i);
      double mx = -INFINITY;
      for (double v : in) mx = std::max(mx, v);
      double sum = 0.0;
      for (std::size_t j = 0; j < in.size(); ++j) {
        o[j] = std::exp(in[j] - mx);
        sum += o[j];
      }
      for (double& v : o) v /= sum;
    }
  } else {
    std::vector<double> mx(m.cols(), -INFINITY);
    std::vector<double> sum(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) mx[j] = std::max(mx[j], m(i, j));
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) {
        out(i, j) = std::exp(m(i, j) - mx[j]);
        sum[j] += out(i, j);
      }
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) /= sum[j];
  }
  return out;
}

/// Vector-Jacobian product of softmax_axis. `probs` is the forward output,
/// `grad` the upstream gradient with respect to it.
inline Matrix softmax_axis_backward(const Matrix& probs, const Matrix& grad, Axis axis) {
  if (probs.shape() != grad.shape()) {
    throw ShapeError("softmax_axis_backward", probs.shape(), grad.shape());
  }
  Matrix out(probs.rows(), probs.cols());
  if (axis == Axis::over_cols) {
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < probs.cols(); ++j) dot += probs(i, j) * grad(i, j);
      for (std::size_t j = 0; j < probs.cols(); ++j)
        out(i, j) = probs(i, j) * (grad(i, j) - dot);
    }
  } else {
    std::vector<double> dot(probs.cols(), 0.0);
    for (std::size_t i = 0; i < probs.rows(); ++i)
      for (std::size_t j = 0; j < probs.cols(); ++j) dot[j] += probs(i, j) * grad(i, j);
    for (std::size_t i = 0; i < probs.rows(); ++i)
      for (std::size_t j = 0; j < probs.cols(); ++j)
        out(i, j) = probs(i, j) * (grad(i, j) - dot[j]);
  }
  return out;
}

inline std::vector<double> row_norms(const Matrix& m) {
  std::vector<double> n(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (double v : m.row(i)) s += v * v;
    n[i] = std::sqrt(s);
  }
  return n;
}

/// Divides each row by max(norm, epsilon).
inline Matrix l2_normalize_rows(const Matrix& m, double epsilon = kNormEpsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("l2_normalize_rows: epsilon must be positive");
  Matrix out = m;
  const auto norms = row_norms(m);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double d = std::max(norms[i], epsilon);
    for (double& v : out.row(i)) v /= d;
  }
  return out;
}

/// Backward of l2_normalize_rows given the forward input's row norms and
/// normalized output.
inline Matrix l2_normalize_rows_backward(const Matrix& normalized, std::span<const double> norms,
                                         const Matrix& grad, double epsilon = kNormEpsilon) {
  if (normalized.shape() != grad.shape()) {
    throw ShapeError("l2_normalize_rows_backward", normalized.shape(), grad.shape());
  }
  Matrix out(grad.rows(), grad.cols());
  for (std::size_t i = 0; i < grad.rows(); ++i) {
    auto y = normalized.row(i);
    auto g = grad.row(i);
    auto o = out.row(i);
    if (norms[i] > epsilon) {
      double dot = 0.0;
      for (std::size_t j = 0; j < g.size(); ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < g.size(); ++j) o[j] = (g[j] - y[j] * dot) / norms[i];
    } else {
      for (std::size_t j = 0; j < g.size(); ++j) o[j] = g[j] / epsilon;
    }
  }
  return out;
}

// tanh approximation of GeLU.
namespace detail {
inline constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluCubic = 0.044715;
}  // namespace detail

inline double gelu(double x) {
  const double inner = detail::kGeluScale * (x + detail::kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(inner));
}

inline double gelu_derivative(double x) {
  const double inner = detail::kGeluScale * (x + detail::kGeluCubic * x * x * x);
  const double t = std::tanh(inner);
  const double d_inner = detail::kGeluScale * (1.0 + 3.0 * detail::kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
}

inline Matrix gelu(Matrix m) {
  for (double& v : m.values()) v = gelu(v);
  return m;
}

}  // namespace smola

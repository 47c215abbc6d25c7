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
#include <cmath>
#include <numeric>
#include <vector>

#include "smola/numkit/matrix.hpp"

namespace smola {

struct SvdResult {
  std::vector<double> singular_values;  // descending
  Matrix u;                             // rows x k, orthonormal columns
  Matrix v;                             // cols x k, orthonormal columns
};

struct JacobiOptions {
  double tolerance = 1e-12;
  int max_sweeps = 60;
};

namespace detail {

// Column-major scratch for the one-sided sweeps; columns are the hot axis.
struct Columns {
  std::size_t n_rows;
  std::vector<std::vector<double>> col;

  static Columns of(const Matrix& m) {
    Columns c{m.rows(), std::vector<std::vector<double>>(m.cols(), std::vector<double>(m.rows()))};
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) c.col[j][i] = m(i, j);
    return c;
  }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Fills columns of `basis` whose flag is false with unit vectors orthogonal to
// every accepted column (modified Gram-Schmidt against the standard basis).
inline void complete_orthonormal(std::vector<std::vector<double>>& basis, std::vector<bool>& ok) {
  const std::size_t dim = basis.empty() ? 0 : basis.front().size();
  std::size_t probe = 0;
  for (std::size_t k = 0; k < basis.size(); ++k) {
    if (ok[k]) continue;
    while (probe < dim) {
      std::vector<double> e(dim, 0.0);
      e[probe++] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < basis.size(); ++j) {
          if (!ok[j]) continue;
          const double p = dot(basis[j], e);
          for (std::size_t i = 0; i < dim; ++i) e[i] -= p * basis[j][i];
        }
      }
      const double n = std::sqrt(dot(e, e));
      if (n > 1e-8) {
        for (double& x : e) x /= n;
        basis[k] = std::move(e);
        ok[k] = true;
        break;
      }
    }
  }
}

inline SvdResult jacobi_svd_tall(const Matrix& m, const JacobiOptions& opts) {
  const std::size_t n = m.cols();
  Columns a = Columns::of(m);
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;

  double total = 0.0;
  for (const auto& c : a.col) total += dot(c, c);

  double off = 0.0;
  bool converged = false;
  for (int sweep = 0; sweep <= opts.max_sweeps; ++sweep) {
    off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double g = dot(a.col[p], a.col[q]);
        off += 2.0 * g * g;
      }
    off = std::sqrt(off);
    if (off <= opts.tolerance * total) {
      converged = true;
      break;
    }
    if (sweep == opts.max_sweeps) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = dot(a.col[p], a.col[p]);
        const double beta = dot(a.col[q], a.col[q]);
        const double gamma = dot(a.col[p], a.col[q]);
        if (gamma == 0.0) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        auto& ap = a.col[p];
        auto& aq = a.col[q];
        for (std::size_t i = 0; i < a.n_rows; ++i) {
          const double x = ap[i], y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        auto& vp = v[p];
        auto& vq = v[q];
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
  }
  if (!converged) {
    throw ConvergenceError("jacobi_svd: no convergence after " + std::to_string(opts.max_sweeps) +
                               " sweeps, off-diagonal residual " + std::to_string(off),
                           off);
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(dot(a.col[j], a.col[j]));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  // Left vectors of negligible singular values are rebuilt by completion.
  const double floor = sigma.empty() ? 0.0 : 1e-10 * sigma[order[0]];
  std::vector<std::vector<double>> ucols(n);
  std::vector<bool> ok(n, false);
  SvdResult r;
  r.singular_values.resize(n);
  r.v = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    r.singular_values[k] = sigma[j];
    for (std::size_t i = 0; i < n; ++i) r.v(i, k) = v[j][i];
    ucols[k] = a.col[j];
    if (sigma[j] > floor && sigma[j] > 0.0) {
      for (double& x : ucols[k]) x /= sigma[j];
      ok[k] = true;
    } else {
      r.singular_values[k] = sigma[j] > 0.0 ? sigma[j] : 0.0;
    }
  }
  complete_orthonormal(ucols, ok);
  r.u = Matrix(a.n_rows, n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < a.n_rows; ++i) r.u(i, k) = ucols[k][i];
  return r;
}

}  // namespace detail

/// One-sided (Hestenes) Jacobi SVD: m = u * diag(singular_values) * v^T.
/// Wide inputs are transposed internally; u and v keep their meaning.
inline SvdResult jacobi_svd(const Matrix& m, const JacobiOptions& opts = {}) {
  if (m.rows() >= m.cols()) return detail::jacobi_svd_tall(m, opts);
  SvdResult t = detail::jacobi_svd_tall(transpose(m), opts);
  std::swap(t.u, t.v);
  return t;
}

}  // namespace smola

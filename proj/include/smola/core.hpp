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
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "smola/error.hpp"
#include "smola/numkit/matrix.hpp"
#include "smola/numkit/ops.hpp"
#include "smola/numkit/rng.hpp"

// A SMoLA block: a frozen linear layer W* (d_in x d_out) plus E zero-initialized
// low-rank experts mixed with soft routing.
//
//   logits = alpha * norm(Phi) norm(X)^T            (E x N)
//   D = softmax over tokens,  C = softmax over experts
//   y_i = W_out_i W_in_i (D X)_i^T                  (d_out)
//   Y = X W* + C^T [y_0 ... y_{E-1}]

namespace smola {

struct SmolaConfig {
  std::size_t num_experts = 1;
  std::size_t rank = 4;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  double alpha_init = 1.0;
  double init_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_experts < 1) throw ConfigError("SmolaConfig: num_experts must be >= 1");
    if (rank < 1) throw ConfigError("SmolaConfig: rank must be >= 1");
    if (d_in < 1 || d_out < 1) throw ConfigError("SmolaConfig: d_in and d_out must be >= 1");
    if (rank > std::min(d_in, d_out)) {
      throw ConfigError("SmolaConfig: rank " + std::to_string(rank) + " exceeds min(d_in, d_out) = " +
                        std::to_string(std::min(d_in, d_out)));
    }
    if (!std::isfinite(alpha_init) || !std::isfinite(init_scale)) {
      throw ConfigError("SmolaConfig: alpha_init and init_scale must be finite");
    }
  }

  /// E*d_in routing entries + alpha + E*r*(d_in + d_out) expert entries.
  std::size_t trainable_parameter_count() const {
    return num_experts * d_in + 1 + num_experts * rank * (d_in + d_out);
  }

  bool operator==(const SmolaConfig&) const = default;
};

struct LowRankExpert {
  Matrix w_in;   // r x d_in
  Matrix w_out;  // d_out x r
};

struct SmolaBlock {
  SmolaConfig config;
  Matrix phi;  // E x d_in
  double alpha = 1.0;
  std::vector<LowRankExpert> experts;
  std::shared_ptr<const Matrix> base;  // d_in x d_out, frozen

  std::size_t num_experts() const noexcept { return experts.size(); }
  std::size_t rank() const noexcept { return config.rank; }
  std::size_t d_in() const noexcept { return phi.cols(); }
  std::size_t d_out() const noexcept { return base->cols(); }
  const Matrix& base_weight() const noexcept { return *base; }

  std::size_t trainable_parameter_count() const {
    std::size_t n = phi.size() + 1;
    for (const auto& e : experts) n += e.w_in.size() + e.w_out.size();
    return n;
  }

  /// Views over every trainable scalar: phi, alpha, then (w_in, w_out) per expert.
  std::vector<std::span<double>> parameters() {
    std::vector<std::span<double>> p{phi.values(), std::span<double>(&alpha, 1)};
    for (auto& e : experts) {
      p.push_back(e.w_in.values());
      p.push_back(e.w_out.values());
    }
    return p;
  }
};

struct RoutingWeights {
  Matrix dispatch;  // E x N, rows sum to 1
  Matrix combine;   // E x N, columns sum to 1
};

struct BlockCache {
  Matrix x;                       // N x d_in
  Matrix x_norm;                  // normalized tokens
  std::vector<double> x_norms;    // token l2 norms
  Matrix phi_norm;                // normalized routing rows
  std::vector<double> phi_norms;  // routing row l2 norms
  Matrix similarity;              // norm(Phi) norm(X)^T, before alpha
  RoutingWeights routing;
  Matrix dispatched;  // D X, E x d_in
  Matrix hidden;      // row i = W_in_i (D X)_i, E x r
  Matrix expert_out;  // row i = y_i^T, E x d_out
};

struct ExpertGradient {
  Matrix d_w_in;
  Matrix d_w_out;
};

struct SmolaGradients {
  Matrix d_phi;
  double d_alpha = 0.0;
  std::vector<ExpertGradient> d_experts;
  Matrix d_input;

  /// Parameter gradients in SmolaBlock::parameters() order.
  void append_flat(std::vector<double>& out) const {
    out.insert(out.end(), d_phi.values().begin(), d_phi.values().end());
    out.push_back(d_alpha);
    for (const auto& e : d_experts) {
      out.insert(out.end(), e.d_w_in.values().begin(), e.d_w_in.values().end());
      out.insert(out.end(), e.d_w_out.values().begin(), e.d_w_out.values().end());
    }
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    append_flat(out);
    return out;
  }
};

/// Buckets used when a madd::Counter is active during forward().
enum CostTerm : std::size_t {
  kCostBase = 0,
  kCostRouting = 1,
  kCostDispatch = 2,
  kCostExpert = 3,
  kCostCombine = 4,
};

// ---------------------------------------------------------------------------

inline SmolaBlock init_block(const SmolaConfig& cfg, std::shared_ptr<const Matrix> base) {
  cfg.validate();
  if (!base) throw ConfigError("init_block: missing base weight");
  if (base->rows() != cfg.d_in || base->cols() != cfg.d_out) {
    throw ShapeError("init_block: config expects base", Shape{cfg.d_in, cfg.d_out}, base->shape());
  }
  Rng rng(cfg.seed);
  SmolaBlock b;
  b.config = cfg;
  b.base = std::move(base);
  b.alpha = cfg.alpha_init;
  const double fan_in = 1.0 / std::sqrt(static_cast<double>(cfg.d_in));
  b.phi = rng.normal_matrix(cfg.num_experts, cfg.d_in, fan_in);
  b.experts.reserve(cfg.num_experts);
  for (std::size_t i = 0; i < cfg.num_experts; ++i) {
    LowRankExpert e;
    e.w_in = rng.normal_matrix(cfg.rank, cfg.d_in, cfg.init_scale * fan_in);
    e.w_out = Matrix(cfg.d_out, cfg.rank);
    b.experts.push_back(std::move(e));
  }
  return b;
}

inline SmolaBlock init_block(const SmolaConfig& cfg, const Matrix& base) {
  return init_block(cfg, std::make_shared<const Matrix>(base));
}

namespace detail {

inline void check_tokens(const SmolaBlock& block, const Matrix& x, const char* op) {
  if (x.rows() == 0) throw ShapeError(std::string(op) + ": empty token batch (N = 0)");
  if (x.cols() != block.d_in()) throw ShapeError(op, x.shape(), block.phi.shape());
}

inline void fill_routing(const SmolaBlock& block, BlockCache& c) {
  c.x_norms = row_norms(c.x);
  c.x_norm = l2_normalize_rows(c.x);
  c.phi_norms = row_norms(block.phi);
  c.phi_norm = l2_normalize_rows(block.phi);
  {
    madd::BucketScope scope(kCostRouting);
    c.similarity = matmul_nt(c.phi_norm, c.x_norm);
  }
  const Matrix logits = block.alpha * c.similarity;
  c.routing.dispatch = softmax_axis(logits, Axis::over_cols);
  c.routing.combine = softmax_axis(logits, Axis::over_rows);
}

}  // namespace detail

inline RoutingWeights compute_routing(const SmolaBlock& block, const Matrix& x) {
  detail::check_tokens(block, x, "compute_routing");
  BlockCache c;
  c.x = x;
  detail::fill_routing(block, c);
  return std::move(c.routing);
}

/// Output of expert `i` on its dispatched slice, as a d_out x 1 column.
inline Matrix expert_apply(const SmolaBlock& block, std::size_t i, const RoutingWeights& routing,
                           const Matrix& x) {
  if (i >= block.num_experts()) {
    throw ShapeError("expert_apply: expert index " + std::to_string(i) + " out of range for " +
                     std::to_string(block.num_experts()) + " experts");
  }
  detail::check_tokens(block, x, "expert_apply");
  if (routing.dispatch.rows() != block.num_experts() || routing.dispatch.cols() != x.rows()) {
    throw ShapeError("expert_apply", routing.dispatch.shape(), x.shape());
  }
  std::vector<double> slice(x.cols(), 0.0);
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const double w = routing.dispatch(i, n);
    auto xr = x.row(n);
    for (std::size_t j = 0; j < slice.size(); ++j) slice[j] += w * xr[j];
  }
  const auto& e = block.experts[i];
  const auto h = matvec(e.w_in, slice);
  return Matrix(block.d_out(), 1, matvec(e.w_out, h));
}

struct BlockForward {
  Matrix y;
  BlockCache cache;
};

/// Expert correction C^T [y_i] only, without the backbone term.
inline BlockForward forward_correction(const SmolaBlock& block, const Matrix& x) {
  detail::check_tokens(block, x, "forward");
  BlockForward f;
  BlockCache& c = f.cache;
  c.x = x;
  detail::fill_routing(block, c);
  {
    madd::BucketScope scope(kCostDispatch);
    c.dispatched = matmul(c.routing.dispatch, x);
  }
  const std::size_t experts = block.num_experts();
  c.hidden = Matrix(experts, block.rank());
  c.expert_out = Matrix(experts, block.d_out());
  {
    madd::BucketScope scope(kCostExpert);
    for (std::size_t i = 0; i < experts; ++i) {
      const auto& e = block.experts[i];
      const auto h = matvec(e.w_in, c.dispatched.row(i));
      std::copy(h.begin(), h.end(), c.hidden.row(i).begin());
      const auto y = matvec(e.w_out, h);
      std::copy(y.begin(), y.end(), c.expert_out.row(i).begin());
    }
  }
  {
    madd::BucketScope scope(kCostCombine);
    f.y = matmul_tn(c.routing.combine, c.expert_out);
  }
  return f;
}

/// Y = X W* + C^T [y_0 ... y_{E-1}]
inline BlockForward forward(const SmolaBlock& block, const Matrix& x) {
  detail::check_tokens(block, x, "forward");
  Matrix y;
  {
    madd::BucketScope scope(kCostBase);
    y = matmul(x, block.base_weight());
  }
  BlockForward f = forward_correction(block, x);
  add_inplace(y, f.y);
  f.y = std::move(y);
  return f;
}

/// Gradients of sum(upstream * correction). d_input excludes the backbone term.
inline SmolaGradients backward_correction(const SmolaBlock& block, const BlockCache& c,
                                          const Matrix& upstream) {
  const std::size_t n = c.x.rows();
  if (upstream.rows() != n || upstream.cols() != block.d_out()) {
    throw ShapeError("backward", upstream.shape(), Shape{n, block.d_out()});
  }
  if (c.routing.dispatch.rows() != block.num_experts()) {
    throw ShapeError("backward: cache does not belong to this block", c.routing.dispatch.shape(),
                     block.phi.shape());
  }
  const std::size_t experts = block.num_experts();
  SmolaGradients g;

  // correction = C^T Ytilde
  const Matrix d_combine = matmul_nt(c.expert_out, upstream);  // E x N
  const Matrix d_expert_out = matmul(c.routing.combine, upstream);  // E x d_out

  Matrix d_dispatched(experts, block.d_in());
  g.d_experts.resize(experts);
  for (std::size_t i = 0; i < experts; ++i) {
    const auto& e = block.experts[i];
    auto dy = d_expert_out.row(i);
    auto h = c.hidden.row(i);
    auto& ge = g.d_experts[i];
    ge.d_w_out = Matrix(e.w_out.rows(), e.w_out.cols());
    for (std::size_t a = 0; a < dy.size(); ++a)
      for (std::size_t b = 0; b < h.size(); ++b) ge.d_w_out(a, b) = dy[a] * h[b];
    // dh = W_out^T dy
    std::vector<double> dh(block.rank(), 0.0);
    for (std::size_t a = 0; a < dy.size(); ++a)
      for (std::size_t b = 0; b < dh.size(); ++b) dh[b] += e.w_out(a, b) * dy[a];
    auto xt = c.dispatched.row(i);
    ge.d_w_in = Matrix(e.w_in.rows(), e.w_in.cols());
    for (std::size_t a = 0; a < dh.size(); ++a)
      for (std::size_t b = 0; b < xt.size(); ++b) ge.d_w_in(a, b) = dh[a] * xt[b];
    auto dxt = d_dispatched.row(i);
    for (std::size_t a = 0; a < dh.size(); ++a)
      for (std::size_t b = 0; b < dxt.size(); ++b) dxt[b] += e.w_in(a, b) * dh[a];
  }

  // dispatched = D X
  const Matrix d_dispatch = matmul_nt(d_dispatched, c.x);  // E x N
  g.d_input = matmul_tn(c.routing.dispatch, d_dispatched);  // N x d_in

  Matrix d_logits = softmax_axis_backward(c.routing.dispatch, d_dispatch, Axis::over_cols);
  add_inplace(d_logits, softmax_axis_backward(c.routing.combine, d_combine, Axis::over_rows));

  double d_alpha = 0.0;
  for (std::size_t k = 0; k < d_logits.size(); ++k)
    d_alpha += d_logits.values()[k] * c.similarity.values()[k];
  g.d_alpha = d_alpha;

  const Matrix d_similarity = block.alpha * d_logits;
  const Matrix d_phi_norm = matmul(d_similarity, c.x_norm);     // E x d_in
  const Matrix d_x_norm = matmul_tn(d_similarity, c.phi_norm);  // N x d_in
  g.d_phi = l2_normalize_rows_backward(c.phi_norm, c.phi_norms, d_phi_norm);
  add_inplace(g.d_input, l2_normalize_rows_backward(c.x_norm, c.x_norms, d_x_norm));
  return g;
}

/// Exact gradients of sum(upstream * Y). The frozen base receives none.
inline SmolaGradients backward(const SmolaBlock& block, const BlockCache& cache,
                               const Matrix& upstream) {
  SmolaGradients g = backward_correction(block, cache, upstream);
  add_inplace(g.d_input, matmul_nt(upstream, block.base_weight()));
  return g;
}

}  // namespace smola

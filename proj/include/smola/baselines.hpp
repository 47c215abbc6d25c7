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
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "smola/core.hpp"
#include "smola/numkit/ops.hpp"
#include "smola/numkit/rng.hpp"

// Reference adapters: plain LoRA, a gated GeLU mixture-of-experts FFN, and a
// weighted mixture of LoRA experts.

namespace smola {

// ---------------------------------------------------------------------------
// Plain LoRA: Y = X W + (X W_in^T) W_out^T

struct PlainLora {
  Matrix w_in;   // r x d_in
  Matrix w_out;  // d_out x r
  std::shared_ptr<const Matrix> base;

  std::size_t rank() const noexcept { return w_in.rows(); }
  const Matrix& base_weight() const noexcept { return *base; }
  std::size_t trainable_parameter_count() const { return w_in.size() + w_out.size(); }

  std::vector<std::span<double>> parameters() { return {w_in.values(), w_out.values()}; }

  void validate() const {
    if (!base) throw ConfigError("PlainLora: missing base weight");
    if (w_in.cols() != base->rows() || w_out.rows() != base->cols() || w_in.rows() != w_out.cols()) {
      throw ShapeError("PlainLora: factor shapes " + w_in.shape().str() + ", " + w_out.shape().str() +
                       " do not fit base " + base->shape().str());
    }
  }
};

inline PlainLora make_plain_lora(std::size_t rank, std::shared_ptr<const Matrix> base,
                                 std::uint64_t seed, double init_scale = 1.0) {
  if (!base) throw ConfigError("make_plain_lora: missing base weight");
  if (rank < 1 || rank > std::min(base->rows(), base->cols())) {
    throw ConfigError("make_plain_lora: rank " + std::to_string(rank) + " outside [1, min(d_in, d_out)]");
  }
  Rng rng(seed);
  PlainLora l;
  l.w_in = rng.normal_matrix(rank, base->rows(), init_scale / std::sqrt(double(base->rows())));
  l.w_out = Matrix(base->cols(), rank);
  l.base = std::move(base);
  return l;
}

/// W + W_out W_in, materialized.
inline Matrix effective_weight(const PlainLora& l) {
  return l.base_weight() + transpose(matmul(l.w_out, l.w_in));
}

inline Matrix lora_apply(const PlainLora& l, const Matrix& x) {
  l.validate();
  if (x.cols() != l.w_in.cols()) throw ShapeError("lora_apply", x.shape(), l.base->shape());
  Matrix y = matmul(x, l.base_weight());
  return add_inplace(y, matmul_nt(matmul_nt(x, l.w_in), l.w_out));
}

struct PlainLoraGradients {
  Matrix d_w_in;
  Matrix d_w_out;
  Matrix d_input;

  std::vector<double> flatten() const {
    std::vector<double> out(d_w_in.values().begin(), d_w_in.values().end());
    out.insert(out.end(), d_w_out.values().begin(), d_w_out.values().end());
    return out;
  }
};

inline PlainLoraGradients lora_backward(const PlainLora& l, const Matrix& x, const Matrix& upstream) {
  if (upstream.rows() != x.rows() || upstream.cols() != l.w_out.rows()) {
    throw ShapeError("lora_backward", upstream.shape(), Shape{x.rows(), l.w_out.rows()});
  }
  const Matrix hidden = matmul_nt(x, l.w_in);    // N x r
  const Matrix d_hidden = matmul(upstream, l.w_out);  // N x r
  PlainLoraGradients g;
  g.d_w_out = matmul_tn(upstream, hidden);
  g.d_w_in = matmul_tn(d_hidden, x);
  g.d_input = matmul_nt(upstream, l.base_weight());
  add_inplace(g.d_input, matmul(d_hidden, l.w_in));
  return g;
}

// ---------------------------------------------------------------------------
// Gated MoE FFN: h(x) = sum_i G(x)_i w_out_i GeLU(w_in_i x),
// G(x) = softmax(gate norm(x)), or its one-hot argmax when top1.

struct FfnExpert {
  Matrix w_in;   // d_hidden x d_in
  Matrix w_out;  // d_out x d_hidden
};

struct GatedMoeFfn {
  std::vector<FfnExpert> experts;
  Matrix gate;  // N_e x d_in

  std::size_t num_experts() const noexcept { return experts.size(); }
  std::size_t d_in() const noexcept { return gate.cols(); }
  std::size_t d_out() const noexcept { return experts.front().w_out.rows(); }

  void validate() const {
    if (experts.empty()) throw ConfigError("GatedMoeFfn: needs at least one expert");
    if (gate.rows() != experts.size()) {
      throw ShapeError("GatedMoeFfn: gate rows " + std::to_string(gate.rows()) + " for " +
                       std::to_string(experts.size()) + " experts");
    }
    for (const auto& e : experts) {
      if (e.w_in.cols() != gate.cols() || e.w_out.cols() != e.w_in.rows() ||
          e.w_out.rows() != experts.front().w_out.rows()) {
        throw ShapeError("GatedMoeFfn: expert", e.w_in.shape(), e.w_out.shape());
      }
    }
  }
};

struct GatedMoeConfig {
  std::size_t num_experts = 4;
  std::size_t d_in = 0;
  std::size_t d_hidden = 0;
  std::size_t d_out = 0;  // d_in for a residual FFN
  bool zero_output = true;
  std::uint64_t seed = 0;
};

inline GatedMoeFfn init_gated_moe(const GatedMoeConfig& cfg) {
  if (cfg.num_experts < 1 || cfg.d_in < 1 || cfg.d_hidden < 1 || cfg.d_out < 1) {
    throw ConfigError("GatedMoeConfig: all sizes must be >= 1");
  }
  Rng rng(cfg.seed);
  const double fan_in = 1.0 / std::sqrt(double(cfg.d_in));
  GatedMoeFfn m;
  m.gate = rng.normal_matrix(cfg.num_experts, cfg.d_in, fan_in);
  for (std::size_t i = 0; i < cfg.num_experts; ++i) {
    FfnExpert e;
    e.w_in = rng.normal_matrix(cfg.d_hidden, cfg.d_in, fan_in);
    e.w_out = cfg.zero_output ? Matrix(cfg.d_out, cfg.d_hidden)
                              : rng.normal_matrix(cfg.d_out, cfg.d_hidden, 1.0 / std::sqrt(double(cfg.d_hidden)));
    m.experts.push_back(std::move(e));
  }
  return m;
}

/// Counts expert evaluations, per expert and per token.
struct ExpertAccessLog {
  std::vector<std::size_t> per_expert;
  std::vector<std::size_t> per_token;
};

namespace detail {

inline std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// Gate probabilities for every token, N x N_e.
inline Matrix gate_probabilities(const Matrix& gate, const Matrix& x_norm, bool top1) {
  Matrix probs = softmax_axis(matmul_nt(x_norm, gate), Axis::over_cols);
  if (top1) {
    for (std::size_t s = 0; s < probs.rows(); ++s) {
      auto row = probs.row(s);
      const std::size_t k = argmax_lowest(row);
      std::fill(row.begin(), row.end(), 0.0);
      row[k] = 1.0;
    }
  }
  return probs;
}

}  // namespace detail

struct GatedMoeCache {
  Matrix x;
  Matrix x_norm;
  std::vector<double> x_norms;
  Matrix gate;  // N x N_e probabilities (one-hot under top1)
  bool top1 = false;
  // pre_act[i] / act[i]: N x d_hidden for expert i; rows of skipped tokens stay zero.
  std::vector<Matrix> pre_act;
  std::vector<Matrix> act;
  std::vector<Matrix> out;  // N x d_out per expert
};

struct GatedMoeForward {
  Matrix y;
  GatedMoeCache cache;
};

inline GatedMoeForward gated_moe_forward_cached(const GatedMoeFfn& m, const Matrix& x, bool top1,
                                                ExpertAccessLog* log = nullptr) {
  m.validate();
  if (x.cols() != m.d_in()) throw ShapeError("gated_moe_forward", x.shape(), m.gate.shape());
  GatedMoeForward f;
  GatedMoeCache& c = f.cache;
  c.x = x;
  c.top1 = top1;
  c.x_norms = row_norms(x);
  c.x_norm = l2_normalize_rows(x);
  c.gate = detail::gate_probabilities(m.gate, c.x_norm, top1);
  if (log) {
    log->per_expert.assign(m.num_experts(), 0);
    log->per_token.assign(x.rows(), 0);
  }
  const std::size_t n = x.rows();
  f.y = Matrix(n, m.d_out());
  for (std::size_t i = 0; i < m.num_experts(); ++i) {
    c.pre_act.emplace_back(n, m.experts[i].w_in.rows());
    c.act.emplace_back(n, m.experts[i].w_in.rows());
    c.out.emplace_back(n, m.d_out());
  }
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < m.num_experts(); ++i) {
      const double g = c.gate(s, i);
      if (top1 && g == 0.0) continue;
      const auto& e = m.experts[i];
      const auto u = matvec(e.w_in, x.row(s));
      std::copy(u.begin(), u.end(), c.pre_act[i].row(s).begin());
      std::vector<double> a(u.size());
      for (std::size_t k = 0; k < u.size(); ++k) a[k] = gelu(u[k]);
      std::copy(a.begin(), a.end(), c.act[i].row(s).begin());
      const auto o = matvec(e.w_out, a);
      std::copy(o.begin(), o.end(), c.out[i].row(s).begin());
      auto ys = f.y.row(s);
      for (std::size_t k = 0; k < o.size(); ++k) ys[k] += g * o[k];
      if (log) {
        ++log->per_expert[i];
        ++log->per_token[s];
      }
    }
  }
  return f;
}

inline Matrix gated_moe_forward(const GatedMoeFfn& m, const Matrix& x, bool top1,
                                ExpertAccessLog* log = nullptr) {
  return gated_moe_forward_cached(m, x, top1, log).y;
}

struct GatedMoeGradients {
  Matrix d_gate;
  std::vector<FfnExpert> d_experts;
  Matrix d_input;

  std::vector<double> flatten() const {
    std::vector<double> out(d_gate.values().begin(), d_gate.values().end());
    for (const auto& e : d_experts) {
      out.insert(out.end(), e.w_in.values().begin(), e.w_in.values().end());
      out.insert(out.end(), e.w_out.values().begin(), e.w_out.values().end());
    }
    return out;
  }
};

/// Gradients of sum(upstream * h). Under top1 the gate receives no gradient
/// (the one-hot selection is piecewise constant).
inline GatedMoeGradients gated_moe_backward(const GatedMoeFfn& m, const GatedMoeCache& c,
                                            const Matrix& upstream) {
  const std::size_t n = c.x.rows();
  if (upstream.rows() != n || upstream.cols() != m.d_out()) {
    throw ShapeError("gated_moe_backward", upstream.shape(), Shape{n, m.d_out()});
  }
  GatedMoeGradients g;
  g.d_gate = Matrix(m.gate.rows(), m.gate.cols());
  g.d_input = Matrix(n, m.d_in());
  for (const auto& e : m.experts) {
    g.d_experts.push_back({Matrix(e.w_in.rows(), e.w_in.cols()), Matrix(e.w_out.rows(), e.w_out.cols())});
  }
  Matrix d_gate_probs(n, m.num_experts());
  for (std::size_t s = 0; s < n; ++s) {
    auto dy = upstream.row(s);
    for (std::size_t i = 0; i < m.num_experts(); ++i) {
      const double gi = c.gate(s, i);
      if (c.top1 && gi == 0.0) continue;
      const auto& e = m.experts[i];
      auto& ge = g.d_experts[i];
      auto o = c.out[i].row(s);
      double dg = 0.0;
      for (std::size_t k = 0; k < dy.size(); ++k) dg += dy[k] * o[k];
      d_gate_probs(s, i) = dg;
      auto a = c.act[i].row(s);
      auto u = c.pre_act[i].row(s);
      std::vector<double> du(a.size(), 0.0);
      for (std::size_t k = 0; k < dy.size(); ++k) {
        const double dok = gi * dy[k];
        for (std::size_t h = 0; h < a.size(); ++h) {
          ge.w_out(k, h) += dok * a[h];
          du[h] += e.w_out(k, h) * dok;
        }
      }
      for (std::size_t h = 0; h < du.size(); ++h) du[h] *= gelu_derivative(u[h]);
      auto xs = c.x.row(s);
      auto dx = g.d_input.row(s);
      for (std::size_t h = 0; h < du.size(); ++h) {
        for (std::size_t j = 0; j < xs.size(); ++j) {
          ge.w_in(h, j) += du[h] * xs[j];
          dx[j] += e.w_in(h, j) * du[h];
        }
      }
    }
  }
  if (!c.top1) {
    const Matrix d_logits = softmax_axis_backward(c.gate, d_gate_probs, Axis::over_cols);  // N x N_e
    add_inplace(g.d_gate, matmul_tn(d_logits, c.x_norm));
    const Matrix d_x_norm = matmul(d_logits, m.gate);
    add_inplace(g.d_input, l2_normalize_rows_backward(c.x_norm, c.x_norms, d_x_norm));
  }
  return g;
}

/// The gated FFN as a residual adapter on a frozen layer: Y = X W + h(X).
struct GatedMoeAdapter {
  GatedMoeFfn ffn;
  std::shared_ptr<const Matrix> base;
  bool top1 = false;

  const Matrix& base_weight() const noexcept { return *base; }

  std::size_t trainable_parameter_count() const {
    std::size_t n = ffn.gate.size();
    for (const auto& e : ffn.experts) n += e.w_in.size() + e.w_out.size();
    return n;
  }

  /// gate, then (w_in, w_out) per expert; matches GatedMoeGradients::flatten.
  std::vector<std::span<double>> parameters() {
    std::vector<std::span<double>> p{ffn.gate.values()};
    for (auto& e : ffn.experts) {
      p.push_back(e.w_in.values());
      p.push_back(e.w_out.values());
    }
    return p;
  }

  void validate() const {
    if (!base) throw ConfigError("GatedMoeAdapter: missing base weight");
    ffn.validate();
    if (ffn.d_in() != base->rows() || ffn.d_out() != base->cols()) {
      throw ShapeError("GatedMoeAdapter: ffn does not fit base", Shape{ffn.d_in(), ffn.d_out()}, base->shape());
    }
  }
};

inline GatedMoeAdapter init_gated_moe_adapter(std::size_t experts, std::size_t d_hidden,
                                              std::shared_ptr<const Matrix> base, std::uint64_t seed,
                                              bool top1 = false) {
  if (!base) throw ConfigError("init_gated_moe_adapter: missing base weight");
  GatedMoeAdapter a;
  a.ffn = init_gated_moe(GatedMoeConfig{experts, base->rows(), d_hidden, base->cols(), true, seed});
  a.base = std::move(base);
  a.top1 = top1;
  return a;
}

inline GatedMoeForward gated_moe_adapter_forward(const GatedMoeAdapter& a, const Matrix& x) {
  a.validate();
  GatedMoeForward f = gated_moe_forward_cached(a.ffn, x, a.top1);
  add_inplace(f.y, matmul(x, a.base_weight()));
  return f;
}

inline GatedMoeGradients gated_moe_adapter_backward(const GatedMoeAdapter& a, const GatedMoeCache& c,
                                                    const Matrix& upstream) {
  GatedMoeGradients g = gated_moe_backward(a.ffn, c, upstream);
  add_inplace(g.d_input, matmul_nt(upstream, a.base_weight()));
  return g;
}

// ---------------------------------------------------------------------------
// Weighted mixture of LoRA experts: Y = X W + sum_i w_i (X W_in_i^T) W_out_i^T,
// with a probability vector of weights per token.

struct LoraMixture {
  std::vector<LowRankExpert> experts;
  std::shared_ptr<const Matrix> base;

  std::size_t num_experts() const noexcept { return experts.size(); }
  const Matrix& base_weight() const noexcept { return *base; }
};

inline void check_mixture_weights(const Matrix& weights, std::size_t tokens, std::size_t experts) {
  if (weights.rows() != tokens || weights.cols() != experts) {
    throw ShapeError("lora_mixture_forward: weights", weights.shape(), Shape{tokens, experts});
  }
  for (std::size_t s = 0; s < tokens; ++s) {
    double sum = 0.0;
    for (double w : weights.row(s)) {
      if (w < 0.0 || !std::isfinite(w)) {
        throw ConfigError("lora_mixture_forward: weights of token " + std::to_string(s) +
                          " are not a probability vector");
      }
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ConfigError("lora_mixture_forward: weights of token " + std::to_string(s) + " sum to " +
                        std::to_string(sum));
    }
  }
}

inline Matrix lora_mixture_forward(const LoraMixture& m, const Matrix& x, const Matrix& weights) {
  if (!m.base) throw ConfigError("LoraMixture: missing base weight");
  if (x.cols() != m.base->rows()) throw ShapeError("lora_mixture_forward", x.shape(), m.base->shape());
  check_mixture_weights(weights, x.rows(), m.num_experts());
  Matrix y = matmul(x, m.base_weight());
  for (std::size_t i = 0; i < m.num_experts(); ++i) {
    const Matrix o = matmul_nt(matmul_nt(x, m.experts[i].w_in), m.experts[i].w_out);
    for (std::size_t s = 0; s < x.rows(); ++s) {
      auto ys = y.row(s);
      auto os = o.row(s);
      for (std::size_t k = 0; k < ys.size(); ++k) ys[k] += weights(s, i) * os[k];
    }
  }
  return y;
}

// Trainable variant whose weights come from a softmax gate over normalized tokens.
struct GatedLoraMixture {
  LoraMixture mixture;
  Matrix gate;  // E x d_in

  const Matrix& base_weight() const noexcept { return mixture.base_weight(); }

  std::size_t trainable_parameter_count() const {
    std::size_t n = gate.size();
    for (const auto& e : mixture.experts) n += e.w_in.size() + e.w_out.size();
    return n;
  }

  /// gate, then (w_in, w_out) per expert.
  std::vector<std::span<double>> parameters() {
    std::vector<std::span<double>> p{gate.values()};
    for (auto& e : mixture.experts) {
      p.push_back(e.w_in.values());
      p.push_back(e.w_out.values());
    }
    return p;
  }
};

inline GatedLoraMixture init_gated_lora_mixture(std::size_t experts, std::size_t rank,
                                                std::shared_ptr<const Matrix> base, std::uint64_t seed) {
  if (!base) throw ConfigError("init_gated_lora_mixture: missing base weight");
  if (experts < 1 || rank < 1 || rank > std::min(base->rows(), base->cols())) {
    throw ConfigError("init_gated_lora_mixture: invalid expert count or rank");
  }
  Rng rng(seed);
  const double fan_in = 1.0 / std::sqrt(double(base->rows()));
  GatedLoraMixture m;
  m.gate = rng.normal_matrix(experts, base->rows(), fan_in);
  for (std::size_t i = 0; i < experts; ++i) {
    m.mixture.experts.push_back({rng.normal_matrix(rank, base->rows(), fan_in), Matrix(base->cols(), rank)});
  }
  m.mixture.base = std::move(base);
  return m;
}

struct GatedLoraMixtureCache {
  Matrix x;
  Matrix x_norm;
  std::vector<double> x_norms;
  Matrix weights;              // N x E
  std::vector<Matrix> hidden;  // N x r per expert
  std::vector<Matrix> out;     // N x d_out per expert
};

struct GatedLoraMixtureForward {
  Matrix y;
  GatedLoraMixtureCache cache;
};

inline GatedLoraMixtureForward gated_lora_mixture_forward(const GatedLoraMixture& m, const Matrix& x) {
  if (x.cols() != m.gate.cols()) throw ShapeError("gated_lora_mixture_forward", x.shape(), m.gate.shape());
  GatedLoraMixtureForward f;
  auto& c = f.cache;
  c.x = x;
  c.x_norms = row_norms(x);
  c.x_norm = l2_normalize_rows(x);
  c.weights = detail::gate_probabilities(m.gate, c.x_norm, false);
  for (const auto& e : m.mixture.experts) {
    c.hidden.push_back(matmul_nt(x, e.w_in));
    c.out.push_back(matmul_nt(c.hidden.back(), e.w_out));
  }
  f.y = lora_mixture_forward(m.mixture, x, c.weights);
  return f;
}

struct GatedLoraMixtureGradients {
  Matrix d_gate;
  std::vector<ExpertGradient> d_experts;
  Matrix d_input;

  std::vector<double> flatten() const {
    std::vector<double> out(d_gate.values().begin(), d_gate.values().end());
    for (const auto& e : d_experts) {
      out.insert(out.end(), e.d_w_in.values().begin(), e.d_w_in.values().end());
      out.insert(out.end(), e.d_w_out.values().begin(), e.d_w_out.values().end());
    }
    return out;
  }
};

inline GatedLoraMixtureGradients gated_lora_mixture_backward(const GatedLoraMixture& m,
                                                             const GatedLoraMixtureCache& c,
                                                             const Matrix& upstream) {
  const std::size_t n = c.x.rows();
  if (upstream.rows() != n || upstream.cols() != m.base_weight().cols()) {
    throw ShapeError("gated_lora_mixture_backward", upstream.shape(), Shape{n, m.base_weight().cols()});
  }
  GatedLoraMixtureGradients g;
  g.d_input = matmul_nt(upstream, m.base_weight());
  Matrix d_weights(n, m.mixture.num_experts());
  for (std::size_t i = 0; i < m.mixture.num_experts(); ++i) {
    const auto& e = m.mixture.experts[i];
    for (std::size_t s = 0; s < n; ++s) {
      double d = 0.0;
      auto dy = upstream.row(s);
      auto o = c.out[i].row(s);
      for (std::size_t k = 0; k < dy.size(); ++k) d += dy[k] * o[k];
      d_weights(s, i) = d;
    }
    Matrix scaled = upstream;  // rows scaled by the token's weight for expert i
    for (std::size_t s = 0; s < n; ++s)
      for (double& v : scaled.row(s)) v *= c.weights(s, i);
    const Matrix d_hidden = matmul(scaled, e.w_out);  // N x r
    g.d_experts.push_back({matmul_tn(d_hidden, c.x), matmul_tn(scaled, c.hidden[i])});
    add_inplace(g.d_input, matmul(d_hidden, e.w_in));
  }
  const Matrix d_logits = softmax_axis_backward(c.weights, d_weights, Axis::over_cols);
  g.d_gate = matmul_tn(d_logits, c.x_norm);
  add_inplace(g.d_input, l2_normalize_rows_backward(c.x_norm, c.x_norms, matmul(d_logits, m.gate)));
  return g;
}

}  // namespace smola

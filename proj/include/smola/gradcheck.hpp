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
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smola/core.hpp"
#include "smola/omni.hpp"
#include "smola/serialize.hpp"

// Central finite differences against the analytic backward passes, on seeded
// small configurations. The scalar loss is sum(G * Y) for a random upstream G,
// so the analytic gradient is exactly the backward pass applied to G.

namespace smola {

struct GradcheckOptions {
  std::size_t cases = 100;
  std::size_t max_d = 8;
  std::size_t max_experts = 4;
  std::size_t max_rank = 2;
  std::size_t max_tokens = 5;
  // When set, every case uses this value instead of a random draw.
  std::optional<std::size_t> num_experts, rank, d_in, d_out, tokens;
  double step = 1e-5;
  double rel_tol = 1e-6;
  double abs_tol = 1e-9;
  std::uint64_t seed = 0;

  void validate() const {
    if (cases < 1) throw ConfigError("gradcheck: cases must be >= 1");
    if (max_d < 2 || max_experts < 1 || max_rank < 1 || max_tokens < 1) {
      throw ConfigError("gradcheck: max_d must be >= 2 and other max sizes >= 1");
    }
    if (!(step > 0.0) || !(rel_tol > 0.0) || !(abs_tol >= 0.0)) {
      throw ConfigError("gradcheck: step and rel_tol must be positive, abs_tol nonnegative");
    }
    for (const auto* v : {&num_experts, &rank, &d_in, &d_out, &tokens})
      if (v->has_value() && **v < 1) throw ConfigError("gradcheck: fixed sizes must be >= 1");
    if (rank && ((d_in && *rank > *d_in) || (d_out && *rank > *d_out))) {
      throw ConfigError("gradcheck: rank exceeds min(d_in, d_out)");
    }
  }
};

struct GradGroup {
  std::size_t scalars = 0;
  std::size_t failures = 0;
  double max_abs_error = 0.0;
  // Largest relative error among scalars whose absolute error exceeds abs_tol.
  double max_rel_error = 0.0;
};

struct GradcheckReport {
  std::size_t cases = 0;
  std::map<std::string, GradGroup> groups;

  bool passed() const {
    for (const auto& [_, g] : groups)
      if (g.failures) return false;
    return true;
  }
};

inline json to_json(const GradcheckReport& r) {
  json groups = json::object();
  for (const auto& [name, g] : r.groups) {
    groups[name] = {{"scalars", g.scalars},
                    {"failures", g.failures},
                    {"max_abs_error", g.max_abs_error},
                    {"max_rel_error", g.max_rel_error}};
  }
  return {{"cases", r.cases}, {"passed", r.passed()}, {"groups", groups}};
}

namespace detail {

inline double weighted_sum(const Matrix& g, const Matrix& y) {
  double s = 0.0;
  auto gv = g.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < gv.size(); ++i) s += gv[i] * yv[i];
  return s;
}

inline void compare_into(GradGroup& group, std::span<const double> analytic, std::span<double> values,
                         const std::function<double()>& loss, const GradcheckOptions& o) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + o.step;
    const double up = loss();
    values[i] = saved - o.step;
    const double down = loss();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * o.step);
    const double abs_err = std::abs(analytic[i] - numeric);
    const double scale = std::max(std::abs(analytic[i]), std::abs(numeric));
    const double rel_err = scale > 0.0 ? abs_err / scale : 0.0;
    ++group.scalars;
    group.max_abs_error = std::max(group.max_abs_error, abs_err);
    if (abs_err > o.abs_tol) group.max_rel_error = std::max(group.max_rel_error, rel_err);
    if (abs_err > o.abs_tol && rel_err > o.rel_tol) ++group.failures;
  }
}

inline std::size_t draw(Rng& rng, std::optional<std::size_t> fixed, std::size_t lo, std::size_t hi) {
  return fixed ? *fixed : lo + rng.next_u64() % (hi - lo + 1);
}

inline SmolaConfig draw_block(Rng& rng, const GradcheckOptions& o, std::size_t d_in, std::size_t d_out) {
  SmolaConfig c;
  c.d_in = d_in;
  c.d_out = d_out;
  c.num_experts = draw(rng, o.num_experts, 1, o.max_experts);
  c.rank = draw(rng, o.rank, 1, std::min({o.max_rank, d_in, d_out}));
  c.alpha_init = rng.uniform(0.5, 3.0);
  c.seed = rng.next_u64();
  c.validate();
  return c;
}

// Moves a zero-initialized block away from zero so every path carries gradient.
inline void perturb(SmolaBlock& b, Rng& rng) {
  for (auto& e : b.experts) e.w_out = rng.normal_matrix(e.w_out.rows(), e.w_out.cols(), 0.5);
}

inline void check_block_params(GradcheckReport& r, const std::string& prefix, SmolaBlock& b,
                               const SmolaGradients& g, const std::function<double()>& loss,
                               const GradcheckOptions& o) {
  compare_into(r.groups[prefix + "phi"], g.d_phi.values(), b.phi.values(), loss, o);
  compare_into(r.groups[prefix + "alpha"], std::span<const double>(&g.d_alpha, 1), std::span<double>(&b.alpha, 1),
               loss, o);
  for (std::size_t i = 0; i < b.experts.size(); ++i) {
    compare_into(r.groups[prefix + "w_in"], g.d_experts[i].d_w_in.values(), b.experts[i].w_in.values(), loss, o);
    compare_into(r.groups[prefix + "w_out"], g.d_experts[i].d_w_out.values(), b.experts[i].w_out.values(), loss, o);
  }
}

}  // namespace detail

/// Checks SmolaBlock and OmniAdapter gradients, grouped by parameter kind.
inline GradcheckReport run_gradcheck(const GradcheckOptions& o) {
  o.validate();
  GradcheckReport report;
  report.cases = o.cases;
  for (std::size_t t = 0; t < o.cases; ++t) {
    Rng rng(derive_seed(o.seed, {t}));
    const std::size_t d_in = detail::draw(rng, o.d_in, 2, std::max<std::size_t>(2, o.max_d));
    const std::size_t d_out = detail::draw(rng, o.d_out, 2, std::max<std::size_t>(2, o.max_d));
    const std::size_t n = detail::draw(rng, o.tokens, 1, o.max_tokens);
    auto base = std::make_shared<const Matrix>(rng.normal_matrix(d_in, d_out, 1.0 / std::sqrt(double(d_in))));

    // Single block.
    SmolaBlock b = init_block(detail::draw_block(rng, o, d_in, d_out), base);
    detail::perturb(b, rng);
    Matrix x = rng.normal_matrix(n, d_in);
    const Matrix g = rng.normal_matrix(n, d_out);
    const SmolaGradients bg = backward(b, forward(b, x).cache, g);
    auto block_loss = [&] { return detail::weighted_sum(g, forward(b, x).y); };
    detail::check_block_params(report, "block.", b, bg, block_loss, o);
    detail::compare_into(report.groups["block.input"], bg.d_input.values(), x.values(), block_loss, o);

    // Omni adapter over a random modality split.
    OmniAdapter a;
    a.base = base;
    a.visual = init_block(detail::draw_block(rng, o, d_in, d_out), base);
    a.text = init_block(detail::draw_block(rng, o, d_in, d_out), base);
    a.multimodal = init_block(detail::draw_block(rng, o, d_in, d_out), base);
    for (SmolaBlock* blk : {&a.visual, &a.text, &a.multimodal}) detail::perturb(*blk, rng);
    TokenBatch batch{rng.normal_matrix(n, d_in), {}};
    for (std::size_t s = 0; s < n; ++s) batch.modality.push_back(rng.next_u64() % 2 ? Modality::visual : Modality::text);
    const OmniGradients og = omni_backward(a, omni_forward(a, batch).cache, g);
    auto omni_loss = [&] { return detail::weighted_sum(g, omni_forward(a, batch).y); };
    detail::check_block_params(report, "omni.visual.", a.visual, og.visual, omni_loss, o);
    detail::check_block_params(report, "omni.text.", a.text, og.text, omni_loss, o);
    detail::check_block_params(report, "omni.multimodal.", a.multimodal, og.multimodal, omni_loss, o);
    detail::compare_into(report.groups["omni.input"], og.d_input.values(), batch.x.values(), omni_loss, o);
  }
  return report;
}

}  // namespace smola

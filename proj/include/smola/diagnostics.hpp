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
#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "smola/core.hpp"
#include "smola/numkit/svd.hpp"
#include "smola/serialize.hpp"

// Cost accounting, routing-matrix heat maps, spectrum counting and a
// single-threaded throughput benchmark.

namespace smola {

// ---------------------------------------------------------------------------
// Cost model. Units are multiply-adds.

struct CostReport {
  std::uint64_t base_madds = 0;      // N d_in d_out
  std::uint64_t routing_madds = 0;   // E d_in N
  std::uint64_t dispatch_madds = 0;  // E N d_in
  std::uint64_t expert_madds = 0;    // E r (d_in + d_out)
  std::uint64_t combine_madds = 0;   // E N d_out
  std::uint64_t extra_params = 0;    // E d_in + 1 + E r (d_in + d_out)
  std::uint64_t d_max = 0;
  // Exponentials and square roots of the two softmaxes and the l2 norms.
  // Informational; not part of the madd totals.
  std::uint64_t nonlinearity_ops = 0;

  std::uint64_t extra_madds() const noexcept {
    return routing_madds + dispatch_madds + expert_madds + combine_madds;
  }
  double extra_to_base_ratio() const noexcept { return double(extra_madds()) / double(base_madds); }
};

inline CostReport count_costs(const SmolaConfig& cfg, std::size_t n_tokens) {
  if (cfg.num_experts < 1 || cfg.rank < 1 || cfg.d_in < 1 || cfg.d_out < 1 || n_tokens < 1) {
    throw ConfigError("count_costs: every count must be >= 1");
  }
  const std::uint64_t e = cfg.num_experts, r = cfg.rank, d1 = cfg.d_in, d2 = cfg.d_out, n = n_tokens;
  CostReport c;
  c.base_madds = n * d1 * d2;
  c.routing_madds = e * d1 * n;
  c.dispatch_madds = e * n * d1;
  c.expert_madds = e * r * (d1 + d2);
  c.combine_madds = e * n * d2;
  c.extra_params = e * d1 + 1 + e * r * (d1 + d2);
  c.d_max = std::max(d1, d2);
  c.nonlinearity_ops = 2 * e * n + n + e;
  return c;
}

/// Runs one forward pass under the multiply-add counter and reports each term.
inline CostReport instrumented_costs(const SmolaBlock& block, const Matrix& x) {
  madd::Counter counter;
  {
    madd::CountingScope scope(counter);
    (void)forward(block, x);
  }
  CostReport c = count_costs(block.config, x.rows());  // parameter and nonlinearity fields
  c.base_madds = counter.buckets[kCostBase];
  c.routing_madds = counter.buckets[kCostRouting];
  c.dispatch_madds = counter.buckets[kCostDispatch];
  c.expert_madds = counter.buckets[kCostExpert];
  c.combine_madds = counter.buckets[kCostCombine];
  c.extra_params = block.trainable_parameter_count();
  return c;
}

inline json to_json(const CostReport& c) {
  return {{"base_madds", c.base_madds},
          {"routing_madds", c.routing_madds},
          {"dispatch_madds", c.dispatch_madds},
          {"expert_madds", c.expert_madds},
          {"combine_madds", c.combine_madds},
          {"extra_madds", c.extra_madds()},
          {"extra_to_base_ratio", c.extra_to_base_ratio()},
          {"extra_params", c.extra_params},
          {"d_max", c.d_max},
          {"nonlinearity_ops", c.nonlinearity_ops}};
}

// ---------------------------------------------------------------------------
// Routing heat map

struct HeatmapReport {
  Matrix gram;               // norm(Phi) norm(Phi)^T, E x E
  double identity_distance;  // mean |off-diagonal|, 0 when E = 1
};

inline HeatmapReport phi_gram(const Matrix& phi) {
  if (phi.rows() < 1) throw ConfigError("phi_gram: needs at least one routing row");
  const Matrix n = l2_normalize_rows(phi);
  HeatmapReport h{matmul_nt(n, n), 0.0};
  const std::size_t e = phi.rows();
  if (e > 1) {
    double sum = 0.0;
    for (std::size_t i = 0; i < e; ++i)
      for (std::size_t j = 0; j < e; ++j)
        if (i != j) sum += std::abs(h.gram(i, j));
    h.identity_distance = sum / double(e * (e - 1));
  }
  return h;
}

inline HeatmapReport phi_gram(const SmolaBlock& block) { return phi_gram(block.phi); }

inline json to_json(const HeatmapReport& h) {
  return {{"experts", h.gram.rows()}, {"identity_distance", h.identity_distance}, {"gram", to_csv(h.gram)}};
}

// ---------------------------------------------------------------------------
// Spectrum counting

inline constexpr std::array<double, 5> kSpectrumThresholds = {0.0001, 0.001, 0.01, 0.05, 0.10};

struct SpectrumReport {
  std::vector<double> singular_values;  // descending
  std::array<std::size_t, kSpectrumThresholds.size()> counts{};  // aligned with kSpectrumThresholds

  /// Number of singular values above `fraction` of the largest.
  std::size_t count_at(double fraction) const {
    for (std::size_t i = 0; i < kSpectrumThresholds.size(); ++i)
      if (kSpectrumThresholds[i] == fraction) return counts[i];
    throw ConfigError("SpectrumReport: no count for threshold " + format_double(fraction));
  }
};

/// Counts sigma_i > f sigma_1 for each threshold fraction. A zero matrix reports
/// all-zero counts rather than failing, so fresh checkpoints can be inspected.
inline SpectrumReport effective_rank(const Matrix& m, const JacobiOptions& opts = {}) {
  SpectrumReport r;
  if (m.size() == 0) return r;
  r.singular_values = jacobi_svd(m, opts).singular_values;
  const double top = r.singular_values.empty() ? 0.0 : r.singular_values.front();
  if (top == 0.0) return r;
  for (std::size_t i = 0; i < kSpectrumThresholds.size(); ++i) {
    r.counts[i] = static_cast<std::size_t>(std::count_if(r.singular_values.begin(), r.singular_values.end(),
                                                         [&](double s) { return s > kSpectrumThresholds[i] * top; }));
  }
  return r;
}

inline json to_json(const SpectrumReport& s) {
  json counts = json::object();
  for (std::size_t i = 0; i < kSpectrumThresholds.size(); ++i) counts[format_double(kSpectrumThresholds[i])] = s.counts[i];
  return {{"singular_values", s.singular_values}, {"counts_at", counts}};
}

/// index,singular_value,fraction_of_max
inline std::string spectrum_csv(const SpectrumReport& s) {
  std::string out = "index,singular_value,fraction_of_max\n";
  const double top = s.singular_values.empty() ? 0.0 : s.singular_values.front();
  for (std::size_t i = 0; i < s.singular_values.size(); ++i) {
    const double v = s.singular_values[i];
    out += std::to_string(i) + "," + format_double(v) + "," + format_double(top > 0.0 ? v / top : 0.0) + "\n";
  }
  return out;
}

/// W_out W_in of one expert (d_out x d_in).
inline Matrix expert_product(const LowRankExpert& e) { return matmul(e.w_out, e.w_in); }

/// sum_i W_out_i W_in_i over every expert of a block.
inline Matrix aggregate_product(const SmolaBlock& b) {
  Matrix sum(b.d_out(), b.d_in());
  for (const auto& e : b.experts) add_inplace(sum, expert_product(e));
  return sum;
}

// ---------------------------------------------------------------------------
// Throughput benchmark

struct ThroughputStats {
  double mean = 0.0;    // examples per second
  double stddev = 0.0;  // sample standard deviation
  double median = 0.0;
  std::vector<double> seconds;  // per repeat, warmups excluded
};

struct BenchResult {
  SmolaConfig config;  // num_experts = 0 means the dense-only variant
  std::size_t n_tokens = 0;
  std::size_t batch = 0;
  std::size_t repeats = 0;
  ThroughputStats dense;
  ThroughputStats smola;
  /// (median SMoLA time / median dense time - 1) * 100.
  double overhead_pct = 0.0;
  /// Throughput loss relative to dense, in percent of dense examples/sec.
  double slowdown_pct = 0.0;
};

struct BenchOptions {
  std::size_t warmup = 2;
  std::uint64_t seed = 0;
};

namespace detail {

inline ThroughputStats summarize(std::vector<double> seconds, std::size_t batch) {
  ThroughputStats s;
  s.seconds = seconds;
  std::vector<double> rate;
  for (double t : seconds) rate.push_back(double(batch) / t);
  double sum = 0.0;
  for (double r : rate) sum += r;
  s.mean = sum / double(rate.size());
  double sq = 0.0;
  for (double r : rate) sq += (r - s.mean) * (r - s.mean);
  s.stddev = rate.size() > 1 ? std::sqrt(sq / double(rate.size() - 1)) : 0.0;
  std::sort(rate.begin(), rate.end());
  const std::size_t k = rate.size();
  s.median = k % 2 ? rate[k / 2] : 0.5 * (rate[k / 2 - 1] + rate[k / 2]);
  return s;
}

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size();
  return k % 2 ? v[k / 2] : 0.5 * (v[k / 2 - 1] + v[k / 2]);
}

template <class F>
double time_seconds(F&& f) {
  const auto t0 = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Keeps results observable so the timed work is not elided.
inline volatile double bench_sink = 0.0;

}  // namespace detail

/// Dense X W* versus the full SMoLA forward on the same shapes, single-threaded.
/// Each repeat processes `batch` examples of `n_tokens` tokens; dense and SMoLA
/// repeats are interleaved, alternating which goes first.
inline BenchResult bench_throughput(const SmolaConfig& cfg, std::size_t n_tokens, std::size_t batch,
                                    std::size_t repeats, const BenchOptions& opts = {}) {
  if (repeats < 3) throw ConfigError("bench_throughput: repeats must be >= 3");
  if (n_tokens < 1 || batch < 1 || cfg.d_in < 1 || cfg.d_out < 1) {
    throw ConfigError("bench_throughput: sizes must be >= 1");
  }
  const bool dense_only = cfg.num_experts == 0;
  if (!dense_only) cfg.validate();

  Rng rng(derive_seed(opts.seed, {cfg.num_experts, cfg.rank, cfg.d_in, cfg.d_out, n_tokens}));
  auto base = std::make_shared<const Matrix>(rng.normal_matrix(cfg.d_in, cfg.d_out, 1.0 / std::sqrt(double(cfg.d_in))));
  std::vector<Matrix> inputs;
  for (std::size_t b = 0; b < batch; ++b) inputs.push_back(rng.normal_matrix(n_tokens, cfg.d_in));
  SmolaBlock block;
  if (!dense_only) {
    block = init_block(cfg, base);
    // Nonzero experts so the timed work matches a trained adapter.
    for (auto& e : block.experts) e.w_out = rng.normal_matrix(e.w_out.rows(), e.w_out.cols(), 0.01);
  }

  auto run_dense = [&] {
    for (const auto& x : inputs) detail::bench_sink = detail::bench_sink + matmul(x, *base)(0, 0);
  };
  auto run_smola = [&] {
    for (const auto& x : inputs) detail::bench_sink = detail::bench_sink + forward(block, x).y(0, 0);
  };

  std::vector<double> dense_s, smola_s;
  for (std::size_t r = 0; r < opts.warmup + repeats; ++r) {
    double td = 0.0, ts = 0.0;
    if (r % 2 == 0) {
      td = detail::time_seconds(run_dense);
      if (!dense_only) ts = detail::time_seconds(run_smola);
    } else {
      if (!dense_only) ts = detail::time_seconds(run_smola);
      td = detail::time_seconds(run_dense);
    }
    if (r < opts.warmup) continue;
    dense_s.push_back(td);
    smola_s.push_back(dense_only ? td : ts);
  }

  BenchResult out;
  out.config = cfg;
  out.n_tokens = n_tokens;
  out.batch = batch;
  out.repeats = repeats;
  out.dense = detail::summarize(dense_s, batch);
  out.smola = detail::summarize(smola_s, batch);
  out.overhead_pct = (detail::median_of(smola_s) / detail::median_of(dense_s) - 1.0) * 100.0;
  out.slowdown_pct = (1.0 - out.smola.median / out.dense.median) * 100.0;
  return out;
}

inline json to_json(const ThroughputStats& s) {
  return {{"mean", s.mean}, {"stddev", s.stddev}, {"median", s.median}, {"seconds", s.seconds}};
}

inline json to_json(const BenchResult& b) {
  return {{"num_experts", b.config.num_experts},
          {"rank", b.config.rank},
          {"d_in", b.config.d_in},
          {"d_out", b.config.d_out},
          {"n_tokens", b.n_tokens},
          {"batch", b.batch},
          {"repeats", b.repeats},
          {"dense_examples_per_sec", to_json(b.dense)},
          {"smola_examples_per_sec", to_json(b.smola)},
          {"overhead_pct", b.overhead_pct},
          {"slowdown_pct", b.slowdown_pct}};
}

struct AffineFit {
  double intercept = 0.0;
  double slope = 0.0;
  double r_squared = 0.0;
};

/// Least squares y = intercept + slope x with its coefficient of determination.
inline AffineFit fit_affine(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("fit_affine: needs >= 2 paired points");
  const double n = double(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw ConfigError("fit_affine: x values are all equal");
  AffineFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.intercept + f.slope * x[i]);
    ss_res += e * e;
  }
  f.r_squared = syy == 0.0 ? 1.0 : 1.0 - ss_res / syy;
  return f;
}

}  // namespace smola

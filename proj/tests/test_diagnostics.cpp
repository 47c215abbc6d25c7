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

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "smola/diagnostics.hpp"
#include "support/fixtures.hpp"

namespace {

using namespace smola;

SmolaConfig make_config(std::size_t e, std::size_t r, std::size_t d1, std::size_t d2) {
  SmolaConfig c;
  c.num_experts = e;
  c.rank = r;
  c.d_in = d1;
  c.d_out = d2;
  return c;
}

TEST(CountCosts, UnitDimensions) {
  const auto c = count_costs(make_config(1, 1, 1, 1), 1);
  EXPECT_EQ(c.base_madds, 1u);
  EXPECT_EQ(c.routing_madds, 1u);
  EXPECT_EQ(c.dispatch_madds, 1u);
  EXPECT_EQ(c.expert_madds, 2u);
  EXPECT_EQ(c.combine_madds, 1u);
  EXPECT_EQ(c.extra_params, 4u);
  EXPECT_EQ(c.d_max, 1u);
  EXPECT_THROW(count_costs(make_config(1, 1, 1, 1), 0), ConfigError);
  EXPECT_THROW(count_costs(make_config(0, 1, 1, 1), 3), ConfigError);
}

TEST(CountCosts, PaperScaleRatioMatchesCounter) {
  const auto cfg = make_config(48, 4, 512, 512);
  const auto c = count_costs(cfg, 256);
  const double expected = (48.0 * 256 * 512 * 2 + 48.0 * 4 * 1024 + 48.0 * 256 * 512) / (256.0 * 512 * 512);
  EXPECT_DOUBLE_EQ(c.extra_to_base_ratio(), expected);
  EXPECT_EQ(c.extra_params, 48u * 512 + 1 + 48u * 4 * 1024);

  Rng rng(1);
  const SmolaBlock b = init_block(cfg, fixture::random_base(rng, 512, 512));
  const auto counted = instrumented_costs(b, rng.normal_matrix(256, 512));
  EXPECT_EQ(counted.base_madds, c.base_madds);
  EXPECT_EQ(counted.extra_madds(), c.extra_madds());
  EXPECT_EQ(counted.extra_params, c.extra_params);
}

TEST(CountCosts, EqualsCounterOnRandomConfigs) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t d1 = 1 + rng.next_u64() % 40, d2 = 1 + rng.next_u64() % 40;
    const auto cfg = make_config(1 + rng.next_u64() % 12, 1 + rng.next_u64() % std::min(d1, d2), d1, d2);
    const std::size_t n = 1 + rng.next_u64() % 30;
    const SmolaBlock b = init_block(cfg, fixture::random_base(rng, d1, d2));
    const auto f = count_costs(cfg, n);
    const auto m = instrumented_costs(b, rng.normal_matrix(n, d1));
    EXPECT_EQ(m.base_madds, f.base_madds);
    EXPECT_EQ(m.routing_madds, f.routing_madds);
    EXPECT_EQ(m.dispatch_madds, f.dispatch_madds);
    EXPECT_EQ(m.expert_madds, f.expert_madds);
    EXPECT_EQ(m.combine_madds, f.combine_madds);
    EXPECT_EQ(m.extra_params, f.extra_params);
  }
}

TEST(CountCosts, RatioShrinksWithWidth) {
  double previous = 1e300;
  for (std::size_t d : {256, 512, 1024, 2048}) {
    const double r = count_costs(make_config(48, 4, d, d), 256).extra_to_base_ratio();
    EXPECT_LT(r, previous) << d;
    previous = r;
  }
}

TEST(PhiGram, OrthonormalAndEqualRows) {
  Matrix scaled_identity(4, 6);
  for (std::size_t i = 0; i < 4; ++i) scaled_identity(i, i + 1) = 3.0 + double(i);
  const auto h = phi_gram(scaled_identity);
  EXPECT_EQ(h.gram, Matrix::identity(4));
  EXPECT_EQ(h.identity_distance, 0.0);

  Rng rng(3);
  const Eigen::MatrixXd q = Eigen::MatrixXd::Random(7, 5).householderQr().householderQ() * Eigen::MatrixXd::Identity(7, 5);
  Matrix rows(5, 7);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 7; ++j) rows(i, j) = q(j, i);
  const auto hq = phi_gram(rows);
  EXPECT_LT(max_abs_diff(hq.gram, Matrix::identity(5)), 1e-12);
  EXPECT_LT(hq.identity_distance, 1e-12);

  Matrix same(3, 4);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) same(i, j) = 0.5 + double(j);
  const auto hs = phi_gram(same);
  for (double v : hs.gram.values()) EXPECT_NEAR(v, 1.0, 1e-12);
  EXPECT_NEAR(hs.identity_distance, 1.0, 1e-12);

  EXPECT_EQ(phi_gram(rng.normal_matrix(1, 5)).identity_distance, 0.0);
}

TEST(PhiGram, MatchesPairwiseDotsAndInvariants) {
  Rng rng(4);
  for (int t = 0; t < 30; ++t) {
    const auto d = fixture::small_dims(rng);
    const SmolaBlock b = fixture::trained_like_block(rng, fixture::random_base(rng, d.d_in, d.d_out), d.experts, d.rank);
    const auto h = phi_gram(b);
    const std::size_t e = b.phi.rows();
    for (std::size_t i = 0; i < e; ++i) {
      EXPECT_NEAR(h.gram(i, i), 1.0, 1e-12);
      for (std::size_t j = 0; j < e; ++j) {
        double dot = 0.0, ni = 0.0, nj = 0.0;
        for (std::size_t k = 0; k < b.phi.cols(); ++k) {
          dot += b.phi(i, k) * b.phi(j, k);
          ni += b.phi(i, k) * b.phi(i, k);
          nj += b.phi(j, k) * b.phi(j, k);
        }
        EXPECT_NEAR(h.gram(i, j), dot / std::sqrt(ni * nj), 1e-12);
        EXPECT_NEAR(h.gram(i, j), h.gram(j, i), 1e-12);
      }
    }
  }
}

TEST(EffectiveRank, DiagonalCounts) {
  const auto s = effective_rank(Matrix::from_rows({{1.0, 0.0, 0.0}, {0.0, 0.2, 0.0}, {0.0, 0.0, 0.04}}));
  EXPECT_EQ(s.count_at(0.10), 2u);
  EXPECT_EQ(s.count_at(0.05), 2u);
  EXPECT_EQ(s.count_at(0.01), 3u);
  EXPECT_EQ(s.count_at(0.001), 3u);
  EXPECT_EQ(s.count_at(0.0001), 3u);
  EXPECT_THROW(s.count_at(0.5), ConfigError);
}

TEST(EffectiveRank, RankOneAndZero) {
  Rng rng(5);
  const Matrix u = rng.normal_matrix(6, 1), v = rng.normal_matrix(1, 4);
  const auto s = effective_rank(matmul(u, v));
  for (auto c : s.counts) EXPECT_EQ(c, 1u);
  const auto z = effective_rank(Matrix(5, 3));
  for (auto c : z.counts) EXPECT_EQ(c, 0u);
  for (double v2 : z.singular_values) EXPECT_EQ(v2, 0.0);
}

TEST(EffectiveRank, ExpertProductsAgainstGramEigenvalues) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const std::size_t r = 1 + t % 4, d1 = 8 + t % 9, d2 = 6 + t % 7;
    const LowRankExpert e{rng.normal_matrix(r, d1), rng.normal_matrix(d2, r)};
    const Matrix p = expert_product(e);
    const auto s = effective_rank(p);
    EXPECT_LE(s.count_at(0.0001), r);
    EXPECT_EQ(s.count_at(0.0001), r);  // generic factors have full rank r

    Eigen::MatrixXd m(p.rows(), p.cols());
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) m(i, j) = p(i, j);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m.transpose() * m);
    Eigen::VectorXd ev = eig.eigenvalues().reverse();
    for (std::size_t k = 0; k < r; ++k) {
      EXPECT_NEAR(s.singular_values[k], std::sqrt(ev(k)), 1e-9 * s.singular_values[0]);
    }
  }
}

TEST(EffectiveRank, CountsNonincreasingInThreshold) {
  Rng rng(7);
  for (int t = 0; t < 40; ++t) {
    Matrix m = rng.normal_matrix(2 + t % 7, 2 + t % 5);
    for (std::size_t j = 0; j < m.cols(); ++j)
      for (std::size_t i = 0; i < m.rows(); ++i) m(i, j) *= std::pow(10.0, -double(j));
    const auto s = effective_rank(m);
    for (std::size_t i = 1; i < s.counts.size(); ++i) EXPECT_LE(s.counts[i], s.counts[i - 1]);
  }
}

TEST(Spectrum, CsvAndJson) {
  const auto s = effective_rank(Matrix::from_rows({{2.0, 0.0}, {0.0, 1.0}}));
  EXPECT_EQ(spectrum_csv(s), "index,singular_value,fraction_of_max\n0,2,1\n1,1,0.5\n");
  const json j = to_json(s);
  EXPECT_EQ(j.at("counts_at").at("0.10000000000000001"), 2);
  EXPECT_EQ(j.at("counts_at").size(), 5u);
}

TEST(Bench, DenseOnlyHasZeroOverhead) {
  const auto b = bench_throughput(make_config(0, 4, 32, 32), 16, 2, 3);
  EXPECT_EQ(b.overhead_pct, 0.0);
  EXPECT_EQ(b.slowdown_pct, 0.0);
  EXPECT_EQ(b.dense.seconds.size(), 3u);
  EXPECT_GT(b.dense.mean, 0.0);
  EXPECT_THROW(bench_throughput(make_config(2, 2, 8, 8), 4, 1, 2), ConfigError);
  EXPECT_THROW(bench_throughput(make_config(2, 9, 8, 8), 4, 1, 3), ConfigError);
}

TEST(Bench, ReportsBothVariants) {
  const auto b = bench_throughput(make_config(8, 2, 32, 32), 32, 2, 4);
  EXPECT_EQ(b.smola.seconds.size(), 4u);
  EXPECT_GT(b.smola.mean, 0.0);
  EXPECT_GE(b.smola.stddev, 0.0);
  const json j = to_json(b);
  EXPECT_TRUE(j.contains("overhead_pct"));
  EXPECT_EQ(j.at("smola_examples_per_sec").at("seconds").size(), 4u);
}

TEST(FitAffine, ExactAndNoisyLines) {
  const auto f = fit_affine({8, 24, 48}, {5, 13, 25});
  EXPECT_NEAR(f.slope, 0.5, 1e-12);
  EXPECT_NEAR(f.intercept, 1.0, 1e-12);
  EXPECT_NEAR(f.r_squared, 1.0, 1e-12);
  EXPECT_LT(fit_affine({1, 2, 3, 4}, {1, 3, 1, 3}).r_squared, 0.5);
  EXPECT_THROW(fit_affine({1, 1}, {2, 3}), ConfigError);
}

}  // namespace

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

#include <algorithm>
#include <numeric>

#include "smola/omni.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

namespace {

using namespace smola;

OmniAdapter zero_omni(Rng& rng, std::shared_ptr<const Matrix> base, std::size_t e, std::size_t r) {
  SmolaConfig c;
  c.num_experts = e;
  c.rank = r;
  c.d_in = base->rows();
  c.d_out = base->cols();
  c.seed = rng.next_u64();
  return init_omni(OmniConfig::uniform(c), base);
}

TEST(TokenBatch, ValidatesLabels) {
  TokenBatch b{Matrix(3, 2), {Modality::visual}};
  EXPECT_THROW(b.validate(), ShapeError);
  b.modality = {Modality::visual, Modality::text, Modality::visual};
  EXPECT_EQ(b.rows_of(Modality::visual), (std::vector<std::size_t>{0, 2}));
}

TEST(OmniForward, ZeroInitPreservesBackbone) {
  Rng rng(1);
  for (int t = 0; t < 25; ++t) {
    auto base = fixture::random_base(rng, 5, 4);
    const auto a = zero_omni(rng, base, 1 + t % 4, 1 + t % 2);
    const auto batch = fixture::random_batch(rng, 1 + t % 6, 5, 2.0);
    EXPECT_EQ(omni_forward(a, batch).y, matmul(batch.x, *base));
  }
}

TEST(OmniForward, EmptyTextPartitionIsSkipped) {
  Rng rng(2);
  auto base = fixture::random_base(rng, 4, 3);
  const auto a = fixture::trained_like_omni(rng, base);
  const auto batch = TokenBatch::uniform(rng.normal_matrix(3, 4), Modality::visual);
  const auto f = omni_forward(a, batch);
  EXPECT_FALSE(f.cache.text.has_value());
  Matrix expect = matmul(batch.x, *base);
  add_inplace(expect, forward_correction(a.multimodal, batch.x).y);
  add_inplace(expect, forward_correction(a.visual, batch.x).y);
  EXPECT_EQ(f.y, expect);
}

TEST(OmniForward, MatchesIndependentBlocksAndScatter) {
  Rng rng(3);
  auto base = fixture::random_base(rng, 3, 2);
  const auto a = fixture::trained_like_omni(rng, base);
  TokenBatch batch{rng.normal_matrix(4, 3), {Modality::visual, Modality::text, Modality::visual, Modality::text}};
  EXPECT_LT(max_abs_diff(omni_forward(a, batch).y, oracle::omni_output(a, batch)), 1e-12);

  for (int t = 0; t < 30; ++t) {
    const auto d = fixture::small_dims(rng);
    auto b2 = fixture::random_base(rng, d.d_in, d.d_out);
    const auto a2 = fixture::trained_like_omni(rng, b2);
    const auto batch2 = fixture::random_batch(rng, d.tokens, d.d_in);
    EXPECT_LT(max_abs_diff(omni_forward(a2, batch2).y, oracle::omni_output(a2, batch2)), 1e-12);
  }
}

TEST(OmniForward, ModalityLocality) {
  Rng rng(4);
  auto base = fixture::random_base(rng, 4, 3);
  const auto a = fixture::trained_like_omni(rng, base);
  TokenBatch batch{rng.normal_matrix(5, 4),
                   {Modality::visual, Modality::text, Modality::visual, Modality::text, Modality::visual}};
  const auto before = omni_forward(a, batch);
  TokenBatch moved = batch;
  for (double& v : moved.x.row(1)) v += 0.7;
  const auto after = omni_forward(a, moved);

  // Visual block sees identical inputs, so its routing is bit-identical.
  EXPECT_EQ(before.cache.visual->routing.dispatch, after.cache.visual->routing.dispatch);
  EXPECT_EQ(before.cache.visual->expert_out, after.cache.visual->expert_out);
  EXPECT_GT(max_abs_diff(before.cache.multimodal.expert_out, after.cache.multimodal.expert_out), 0.0);
  EXPECT_GT(max_abs_diff(before.y, after.y), 0.0);
}

TEST(OmniForward, PermutationEquivariance) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    const auto d = fixture::small_dims(rng);
    auto base = fixture::random_base(rng, d.d_in, d.d_out);
    const auto a = fixture::trained_like_omni(rng, base);
    const auto batch = fixture::random_batch(rng, d.tokens, d.d_in);
    std::vector<std::size_t> perm(d.tokens);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.next_u64() % i]);
    TokenBatch shuffled{gather_rows(batch.x, perm), {}};
    for (auto p : perm) shuffled.modality.push_back(batch.modality[p]);
    const Matrix y = omni_forward(a, batch).y;
    const Matrix ys = omni_forward(a, shuffled).y;
    EXPECT_LT(max_abs_diff(ys, gather_rows(y, perm)), 1e-12);
  }
}

TEST(OmniForward, ZeroPartitionBlocksReduceToMultimodalBlock) {
  Rng rng(6);
  auto base = fixture::random_base(rng, 6, 4);
  auto a = zero_omni(rng, base, 3, 2);
  a.multimodal = fixture::trained_like_block(rng, base, 4, 2);
  const auto batch = fixture::random_batch(rng, 5, 6);
  EXPECT_EQ(omni_forward(a, batch).y, forward(a.multimodal, batch.x).y);
}

TEST(OmniForward, RejectsBadShapes) {
  Rng rng(7);
  auto base = fixture::random_base(rng, 4, 3);
  const auto a = zero_omni(rng, base, 2, 1);
  EXPECT_THROW(omni_forward(a, TokenBatch{Matrix(3, 4), {Modality::text}}), ShapeError);
  EXPECT_THROW(omni_forward(a, TokenBatch::uniform(Matrix(3, 5), Modality::text)), ShapeError);
}

TEST(OmniBackward, ZeroUpstreamAndUnusedBlock) {
  Rng rng(8);
  auto base = fixture::random_base(rng, 4, 3);
  const auto a = fixture::trained_like_omni(rng, base);
  const auto batch = TokenBatch::uniform(rng.normal_matrix(3, 4), Modality::visual);
  const auto f = omni_forward(a, batch);
  const auto zero = omni_backward(a, f.cache, Matrix(3, 3));
  for (double v : zero.flatten()) EXPECT_EQ(v, 0.0);

  const auto g = omni_backward(a, f.cache, rng.normal_matrix(3, 3));
  std::vector<double> text;
  g.text.append_flat(text);
  for (double v : text) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(text.size(), a.text.trainable_parameter_count());
  EXPECT_EQ(g.flatten().size(), a.trainable_parameter_count());
}

TEST(OmniBackward, AgreesWithCentralDifferences) {
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    const auto d = fixture::small_dims(rng);
    auto base = fixture::random_base(rng, d.d_in, d.d_out);
    auto a = fixture::trained_like_omni(rng, base);
    auto batch = fixture::random_batch(rng, d.tokens, d.d_in);
    const Matrix up = rng.normal_matrix(d.tokens, d.d_out);
    const auto g = omni_backward(a, omni_forward(a, batch).cache, up);
    auto loss = [&] { return oracle::weighted_sum(up, omni_forward(a, batch).y); };
    const auto params = oracle::compare_gradients(g.flatten(), oracle::central_differences(a.parameters(), loss));
    EXPECT_EQ(params.failures, 0u) << "case " << t << " worst rel " << params.worst_rel;
    const auto inputs =
        oracle::compare_gradients(g.d_input.values(), oracle::central_differences({batch.x.values()}, loss));
    EXPECT_EQ(inputs.failures, 0u) << "case " << t;
  }
}

}  // namespace

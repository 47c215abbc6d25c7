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

#include <filesystem>
#include <fstream>

#include "smola/serialize.hpp"
#include "support/fixtures.hpp"

namespace {

using namespace smola;
namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("smola_serialize_" + name);
  fs::remove_all(p);
  return p;
}

void expect_same_block(const SmolaBlock& a, const SmolaBlock& b) {
  EXPECT_EQ(a.config, b.config);
  EXPECT_EQ(a.phi, b.phi);
  EXPECT_EQ(a.alpha, b.alpha);
  ASSERT_EQ(a.experts.size(), b.experts.size());
  for (std::size_t i = 0; i < a.experts.size(); ++i) {
    EXPECT_EQ(a.experts[i].w_in, b.experts[i].w_in);
    EXPECT_EQ(a.experts[i].w_out, b.experts[i].w_out);
  }
  EXPECT_EQ(a.base_weight(), b.base_weight());
}

TEST(BlockJson, InMemoryRoundTripIsExact) {
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto d = fixture::small_dims(rng);
    auto base = fixture::random_base(rng, d.d_in, d.d_out);
    SmolaBlock b = fixture::trained_like_block(rng, base, d.experts, d.rank);
    b.alpha = rng.normal() * 1e-7 + 1.0 / 3.0;
    const json j = json::parse(block_to_json(b).dump());
    EXPECT_FALSE(j.contains("w_star"));
    EXPECT_EQ(j.at("base"), "base.csv");
    expect_same_block(block_from_json(j, base), b);
  }
}

TEST(BlockJson, DirectoryRoundTripReproducesForward) {
  Rng rng(2);
  auto base = fixture::random_base(rng, 6, 5);
  const SmolaBlock b = fixture::trained_like_block(rng, base, 3, 2);
  const auto dir = scratch_dir("block");
  save_checkpoint(dir, b);
  EXPECT_TRUE(fs::exists(dir / "base.csv"));
  EXPECT_TRUE(fs::exists(dir / "block.json"));
  const auto loaded = load_checkpoint_as<SmolaBlock>(dir);
  expect_same_block(loaded, b);
  const Matrix x = rng.normal_matrix(4, 6);
  EXPECT_EQ(forward(loaded, x).y, forward(b, x).y);
}

TEST(OmniJson, ManifestRoundTrip) {
  Rng rng(3);
  auto base = fixture::random_base(rng, 5, 4);
  const OmniAdapter a = fixture::trained_like_omni(rng, base);
  const auto dir = scratch_dir("omni");
  save_checkpoint(dir, a);
  for (const char* f : {"omni.json", "base.csv", "block_visual.json", "block_text.json", "block_multimodal.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto loaded = load_checkpoint_as<OmniAdapter>(dir / "omni.json");
  expect_same_block(loaded.visual, a.visual);
  expect_same_block(loaded.text, a.text);
  expect_same_block(loaded.multimodal, a.multimodal);
  EXPECT_EQ(loaded.visual.base, loaded.base);  // one shared backbone after loading
  const auto batch = fixture::random_batch(rng, 5, 5);
  EXPECT_EQ(omni_forward(loaded, batch).y, omni_forward(a, batch).y);
}

TEST(BaselineJson, RoundTrips) {
  Rng rng(4);
  auto base = fixture::random_base(rng, 6, 6);

  PlainLora l = make_plain_lora(3, base, 5);
  l.w_out = rng.normal_matrix(6, 3);
  const auto ldir = scratch_dir("lora");
  save_checkpoint(ldir, l);
  const auto l2 = load_checkpoint_as<PlainLora>(ldir / "adapter.json");
  EXPECT_EQ(l2.w_in, l.w_in);
  EXPECT_EQ(l2.w_out, l.w_out);

  GatedMoeAdapter g = init_gated_moe_adapter(3, 4, base, 6, true);
  g.ffn.experts[1].w_out = rng.normal_matrix(6, 4);
  const auto gdir = scratch_dir("moe");
  save_checkpoint(gdir, g);
  const auto g2 = load_checkpoint_as<GatedMoeAdapter>(gdir);
  EXPECT_TRUE(g2.top1);
  EXPECT_EQ(g2.ffn.gate, g.ffn.gate);
  const Matrix x = rng.normal_matrix(3, 6);
  EXPECT_EQ(gated_moe_adapter_forward(g2, x).y, gated_moe_adapter_forward(g, x).y);

  GatedLoraMixture m = init_gated_lora_mixture(2, 2, base, 7);
  m.mixture.experts[0].w_out = rng.normal_matrix(6, 2);
  const auto mdir = scratch_dir("mixture");
  save_checkpoint(mdir, m);
  const auto m2 = load_checkpoint_as<GatedLoraMixture>(mdir);
  EXPECT_EQ(gated_lora_mixture_forward(m2, x).y, gated_lora_mixture_forward(m, x).y);
}

TEST(Checkpoint, CorruptInputsRaiseFormatError) {
  Rng rng(5);
  auto base = fixture::random_base(rng, 4, 3);
  const SmolaBlock b = fixture::trained_like_block(rng, base, 2, 1);
  const auto dir = scratch_dir("corrupt");

  EXPECT_THROW(load_checkpoint(dir), FormatError);  // missing directory

  save_checkpoint(dir, b);
  fs::remove(dir / "base.csv");
  EXPECT_THROW(load_checkpoint(dir), FormatError);

  save_checkpoint(dir, b);
  { std::ofstream(dir / "block.json") << "{ not json"; }
  EXPECT_THROW(load_checkpoint(dir), FormatError);

  json j = block_to_json(b);
  j["phi"] = "1,1\n0.5\n";
  { std::ofstream(dir / "block.json") << j.dump(); }
  EXPECT_THROW(load_checkpoint(dir), FormatError);

  j = block_to_json(b);
  j["format"] = "something-else";
  { std::ofstream(dir / "block.json") << j.dump(); }
  EXPECT_THROW(load_checkpoint(dir), FormatError);

  j = block_to_json(b);
  j["config"].erase("rank");
  EXPECT_THROW(block_from_json(j, base), FormatError);

  save_checkpoint(dir, b);
  EXPECT_THROW(load_checkpoint_as<PlainLora>(dir), FormatError);
}

}  // namespace

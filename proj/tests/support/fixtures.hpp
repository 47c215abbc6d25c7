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

#include <cstdint>
#include <memory>

#include "smola/core.hpp"
#include "smola/omni.hpp"

namespace smola::fixture {

struct SmallDims {
  std::size_t d_in, d_out, experts, rank, tokens;
};

/// Random small sizes within d <= 8, E <= 4, r <= 2, N <= 5.
inline SmallDims small_dims(Rng& rng) {
  SmallDims d{};
  d.d_in = 2 + rng.next_u64() % 7;
  d.d_out = 2 + rng.next_u64() % 7;
  d.experts = 1 + rng.next_u64() % 4;
  d.rank = 1 + rng.next_u64() % 2;
  d.tokens = 1 + rng.next_u64() % 5;
  return d;
}

inline std::shared_ptr<const Matrix> random_base(Rng& rng, std::size_t d_in, std::size_t d_out) {
  return std::make_shared<const Matrix>(rng.normal_matrix(d_in, d_out, 1.0 / std::sqrt(double(d_in))));
}

/// A block moved away from zero-init so every gradient path is active.
inline SmolaBlock trained_like_block(Rng& rng, std::shared_ptr<const Matrix> base, std::size_t experts,
                                     std::size_t rank) {
  SmolaConfig cfg;
  cfg.num_experts = experts;
  cfg.rank = rank;
  cfg.d_in = base->rows();
  cfg.d_out = base->cols();
  cfg.seed = rng.next_u64();
  cfg.alpha_init = rng.uniform(0.5, 3.0);
  SmolaBlock b = init_block(cfg, std::move(base));
  for (auto& e : b.experts) e.w_out = rng.normal_matrix(e.w_out.rows(), e.w_out.cols(), 0.5);
  return b;
}

inline TokenBatch random_batch(Rng& rng, std::size_t tokens, std::size_t d_in, double scale = 1.0) {
  TokenBatch b{rng.normal_matrix(tokens, d_in, scale), {}};
  for (std::size_t i = 0; i < tokens; ++i)
    b.modality.push_back(rng.next_u64() % 2 ? Modality::visual : Modality::text);
  return b;
}

inline OmniAdapter trained_like_omni(Rng& rng, std::shared_ptr<const Matrix> base) {
  OmniAdapter a;
  a.base = base;
  a.visual = trained_like_block(rng, base, 1 + rng.next_u64() % 4, 1 + rng.next_u64() % 2);
  a.text = trained_like_block(rng, base, 1 + rng.next_u64() % 4, 1 + rng.next_u64() % 2);
  a.multimodal = trained_like_block(rng, base, 1 + rng.next_u64() % 4, 1 + rng.next_u64() % 2);
  return a;
}

}  // namespace smola::fixture

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
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smola/core.hpp"

// Omni composition: a visual-token block, a text-token block and an all-token
// block over one shared frozen layer.
//
//   Y = X W* + corr_MM(X) + scatter_V(corr_V(X_V)) + scatter_T(corr_T(X_T))
//
// The backbone term appears once. Partition blocks only see their own rows;
// an empty partition skips its block.

namespace smola {

enum class Modality : std::uint8_t { visual, text };

inline std::string_view to_string(Modality m) { return m == Modality::visual ? "visual" : "text"; }

struct TokenBatch {
  Matrix x;                         // N x d_in
  std::vector<Modality> modality;  // length N

  std::size_t size() const noexcept { return x.rows(); }

  void validate() const {
    if (modality.size() != x.rows()) {
      throw ShapeError("TokenBatch: " + std::to_string(modality.size()) + " modality labels for " +
                       std::to_string(x.rows()) + " tokens");
    }
  }

  std::vector<std::size_t> rows_of(Modality m) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < modality.size(); ++i)
      if (modality[i] == m) idx.push_back(i);
    return idx;
  }

  /// A batch whose tokens are all of one modality.
  static TokenBatch uniform(Matrix x, Modality m) {
    TokenBatch b{std::move(x), {}};
    b.modality.assign(b.x.rows(), m);
    return b;
  }
};

struct OmniAdapter {
  SmolaBlock visual;
  SmolaBlock text;
  SmolaBlock multimodal;
  std::shared_ptr<const Matrix> base;

  const Matrix& base_weight() const noexcept { return *base; }
  std::size_t d_in() const noexcept { return base->rows(); }
  std::size_t d_out() const noexcept { return base->cols(); }

  std::size_t trainable_parameter_count() const {
    return visual.trainable_parameter_count() + text.trainable_parameter_count() +
           multimodal.trainable_parameter_count();
  }

  /// visual, text, multimodal; each in SmolaBlock::parameters() order.
  std::vector<std::span<double>> parameters() {
    std::vector<std::span<double>> p;
    for (SmolaBlock* b : {&visual, &text, &multimodal}) {
      auto bp = b->parameters();
      p.insert(p.end(), bp.begin(), bp.end());
    }
    return p;
  }

  void validate() const {
    if (!base) throw ConfigError("OmniAdapter: missing base weight");
    for (const SmolaBlock* b : {&visual, &text, &multimodal}) {
      if (b->base != base) throw ConfigError("OmniAdapter: blocks must share the adapter's base");
      if (b->d_in() != d_in() || b->experts.empty() || b->experts.front().w_out.rows() != d_out()) {
        throw ShapeError("OmniAdapter: block dims", b->phi.shape(), base->shape());
      }
    }
  }
};

struct OmniConfig {
  SmolaConfig visual;
  SmolaConfig text;
  SmolaConfig multimodal;

  /// Same expert count and rank for all three blocks, with distinct seeds.
  static OmniConfig uniform(const SmolaConfig& cfg) {
    OmniConfig o{cfg, cfg, cfg};
    o.visual.seed = derive_seed(cfg.seed, {1});
    o.text.seed = derive_seed(cfg.seed, {2});
    o.multimodal.seed = derive_seed(cfg.seed, {3});
    return o;
  }
};

inline OmniAdapter init_omni(const OmniConfig& cfg, std::shared_ptr<const Matrix> base) {
  OmniAdapter a;
  a.base = base;
  a.visual = init_block(cfg.visual, base);
  a.text = init_block(cfg.text, base);
  a.multimodal = init_block(cfg.multimodal, base);
  return a;
}

struct OmniCache {
  std::vector<std::size_t> visual_rows;
  std::vector<std::size_t> text_rows;
  std::optional<BlockCache> visual;  // empty when the partition is empty
  std::optional<BlockCache> text;
  BlockCache multimodal;
};

struct OmniForward {
  Matrix y;
  OmniCache cache;
};

struct OmniGradients {
  SmolaGradients visual;
  SmolaGradients text;
  SmolaGradients multimodal;
  Matrix d_input;

  /// Parameter gradients in OmniAdapter::parameters() order.
  std::vector<double> flatten() const {
    std::vector<double> out;
    visual.append_flat(out);
    text.append_flat(out);
    multimodal.append_flat(out);
    return out;
  }
};

inline OmniForward omni_forward(const OmniAdapter& adapter, const TokenBatch& batch) {
  batch.validate();
  if (batch.x.cols() != adapter.d_in()) {
    throw ShapeError("omni_forward", batch.x.shape(), adapter.base->shape());
  }
  OmniForward f;
  {
    madd::BucketScope scope(kCostBase);
    f.y = matmul(batch.x, adapter.base_weight());
  }
  auto mm = forward_correction(adapter.multimodal, batch.x);
  f.cache.multimodal = std::move(mm.cache);

  f.cache.visual_rows = batch.rows_of(Modality::visual);
  f.cache.text_rows = batch.rows_of(Modality::text);
  std::optional<Matrix> corr_v, corr_t;
  if (!f.cache.visual_rows.empty()) {
    auto v = forward_correction(adapter.visual, gather_rows(batch.x, f.cache.visual_rows));
    corr_v = std::move(v.y);
    f.cache.visual = std::move(v.cache);
  }
  if (!f.cache.text_rows.empty()) {
    auto t = forward_correction(adapter.text, gather_rows(batch.x, f.cache.text_rows));
    corr_t = std::move(t.y);
    f.cache.text = std::move(t.cache);
  }

  // Fixed summation order: MM, V, T.
  add_inplace(f.y, mm.y);
  if (corr_v) scatter_add_rows(f.y, *corr_v, f.cache.visual_rows);
  if (corr_t) scatter_add_rows(f.y, *corr_t, f.cache.text_rows);
  return f;
}

namespace detail {

inline SmolaGradients zero_gradients(const SmolaBlock& b) {
  SmolaGradients g;
  g.d_phi = Matrix(b.phi.rows(), b.phi.cols());
  for (const auto& e : b.experts) {
    g.d_experts.push_back({Matrix(e.w_in.rows(), e.w_in.cols()), Matrix(e.w_out.rows(), e.w_out.cols())});
  }
  return g;
}

}  // namespace detail

inline OmniGradients omni_backward(const OmniAdapter& adapter, const OmniCache& cache,
                                   const Matrix& upstream) {
  const std::size_t n = cache.multimodal.x.rows();
  if (upstream.rows() != n || upstream.cols() != adapter.d_out()) {
    throw ShapeError("omni_backward", upstream.shape(), Shape{n, adapter.d_out()});
  }
  OmniGradients g;
  g.d_input = matmul_nt(upstream, adapter.base_weight());
  g.multimodal = backward_correction(adapter.multimodal, cache.multimodal, upstream);
  add_inplace(g.d_input, g.multimodal.d_input);

  auto partition = [&](const SmolaBlock& block, const std::optional<BlockCache>& c,
                       const std::vector<std::size_t>& rows) {
    if (!c) {
      SmolaGradients z = detail::zero_gradients(block);
      z.d_input = Matrix(0, adapter.d_in());
      return z;
    }
    SmolaGradients pg = backward_correction(block, *c, gather_rows(upstream, rows));
    scatter_add_rows(g.d_input, pg.d_input, rows);
    return pg;
  };
  g.visual = partition(adapter.visual, cache.visual, cache.visual_rows);
  g.text = partition(adapter.text, cache.text, cache.text_rows);
  return g;
}

}  // namespace smola

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
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "smola/baselines.hpp"
#include "smola/core.hpp"
#include "smola/omni.hpp"
#include "smola/serialize.hpp"

// Multitask fine-tuning on synthetic regression tasks.
//
// Every task t shares the frozen backbone W* and adds a hidden low-rank
// perturbation dW_t = s U V_t^T. U is shared; V_t = cos(theta_t) R + sin(theta_t) S
// with theta_t = 2 pi t / T, so the perturbations sum to zero and any single
// linear update fitted to all tasks at once stays at zero. Tokens carry a
// task signature orthogonal to U, which input-dependent routing can exploit.

namespace smola {

// ---------------------------------------------------------------------------
// Synthetic mixture

struct MixtureConfig {
  std::size_t num_tasks = 3;
  std::size_t d_in = 64;
  std::size_t d_out = 64;
  std::size_t task_rank = 4;
  std::size_t seq_len = 4;
  std::size_t examples_per_batch = 8;
  std::size_t validation_batches = 2;
  double noise_std = 0.01;
  double delta_scale = 8.0;
  double signature_scale = 1.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_tasks < 1) throw ConfigError("MixtureConfig: num_tasks must be >= 1");
    if (d_in < 1 || d_out < 1 || seq_len < 1 || examples_per_batch < 1 || validation_batches < 1) {
      throw ConfigError("MixtureConfig: sizes must be >= 1");
    }
    if (task_rank < 1 || d_in < task_rank + num_tasks || d_out < 2 * task_rank) {
      throw ConfigError("MixtureConfig: need d_in >= task_rank + num_tasks and d_out >= 2 * task_rank");
    }
    if (!(noise_std >= 0.0) || !std::isfinite(delta_scale) || !std::isfinite(signature_scale)) {
      throw ConfigError("MixtureConfig: noise_std must be >= 0 and scales finite");
    }
  }
};

struct SyntheticTask {
  std::size_t task_id = 0;
  Matrix target_map;        // dW_t, d_in x d_out
  Matrix signature;         // 1 x d_in, added to every token of the task
  double modality_profile;  // fraction of visual tokens per example
  double noise_std = 0.0;
};

struct Mixture {
  MixtureConfig config;
  std::shared_ptr<const Matrix> base;
  std::vector<SyntheticTask> tasks;
};

struct Example {
  TokenBatch input;  // seq_len tokens
  Matrix target;     // seq_len x d_out
};

using TaskBatch = std::vector<Example>;

enum class Stream : std::uint64_t { train = 0, validation = 1 };

namespace detail {

// Gram-Schmidt on Gaussian columns; returns d x k with orthonormal columns.
inline Matrix orthonormal_columns(Rng& rng, std::size_t d, std::size_t k) {
  Matrix q(d, k);
  for (std::size_t c = 0; c < k; ++c) {
    for (;;) {
      std::vector<double> v(d);
      for (double& x : v) x = rng.normal();
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t p = 0; p < c; ++p) {
          double dot = 0.0;
          for (std::size_t i = 0; i < d; ++i) dot += q(i, p) * v[i];
          for (std::size_t i = 0; i < d; ++i) v[i] -= dot * q(i, p);
        }
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-8) continue;
      for (std::size_t i = 0; i < d; ++i) q(i, c) = v[i] / norm;
      break;
    }
  }
  return q;
}

inline constexpr double kProfiles[] = {0.5, 0.75, 0.25};

}  // namespace detail

inline Mixture make_mixture(const MixtureConfig& cfg) {
  cfg.validate();
  Mixture m;
  m.config = cfg;
  Rng base_rng(derive_seed(cfg.seed, {0}));
  m.base = std::make_shared<const Matrix>(base_rng.normal_matrix(cfg.d_in, cfg.d_out, 1.0 / std::sqrt(double(cfg.d_in))));

  Rng rng(derive_seed(cfg.seed, {1}));
  const std::size_t k = cfg.task_rank;
  const Matrix in_basis = detail::orthonormal_columns(rng, cfg.d_in, k + cfg.num_tasks);  // U | signatures
  const Matrix out_basis = detail::orthonormal_columns(rng, cfg.d_out, 2 * k);            // R | S
  for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
    const double theta = 2.0 * std::numbers::pi * double(t) / double(cfg.num_tasks);
    const double c = std::cos(theta), s = std::sin(theta);
    SyntheticTask task;
    task.task_id = t;
    task.target_map = Matrix(cfg.d_in, cfg.d_out);
    for (std::size_t i = 0; i < cfg.d_in; ++i)
      for (std::size_t o = 0; o < cfg.d_out; ++o) {
        double v = 0.0;
        for (std::size_t j = 0; j < k; ++j) v += in_basis(i, j) * (c * out_basis(o, j) + s * out_basis(o, k + j));
        task.target_map(i, o) = cfg.delta_scale * v;
      }
    task.signature = Matrix(1, cfg.d_in);
    for (std::size_t i = 0; i < cfg.d_in; ++i) task.signature(0, i) = cfg.signature_scale * in_basis(i, k + t);
    task.modality_profile = detail::kProfiles[t % std::size(detail::kProfiles)];
    task.noise_std = cfg.noise_std;
    m.tasks.push_back(std::move(task));
  }
  return m;
}

/// A batch of examples for one task, regenerated from (seed, task, stream, index).
inline TaskBatch sample_batch(const Mixture& m, std::size_t task, Stream stream, std::uint64_t index) {
  const auto& cfg = m.config;
  const SyntheticTask& t = m.tasks.at(task);
  Rng rng(derive_seed(cfg.seed, {2, task, static_cast<std::uint64_t>(stream), index}));
  const std::size_t visual = static_cast<std::size_t>(std::lround(t.modality_profile * double(cfg.seq_len)));
  Matrix w = *m.base;
  add_inplace(w, t.target_map);
  TaskBatch batch;
  for (std::size_t e = 0; e < cfg.examples_per_batch; ++e) {
    Example ex;
    ex.input.x = rng.normal_matrix(cfg.seq_len, cfg.d_in, 1.0 / std::sqrt(double(cfg.d_in)));
    for (std::size_t s = 0; s < cfg.seq_len; ++s) {
      auto row = ex.input.x.row(s);
      for (std::size_t i = 0; i < cfg.d_in; ++i) row[i] += t.signature(0, i);
      ex.input.modality.push_back(s < visual ? Modality::visual : Modality::text);
    }
    ex.target = matmul(ex.input.x, w);
    if (t.noise_std > 0.0)
      for (double& v : ex.target.values()) v += t.noise_std * rng.normal();
    batch.push_back(std::move(ex));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Adapter access for the trainer. Each specialization provides a cached forward
// pass over one example and the flat parameter gradient in parameters() order.

template <class A>
struct adapter_traits;

template <>
struct adapter_traits<SmolaBlock> {
  static constexpr const char* kind = "smola-block";
  static BlockForward forward_cached(const SmolaBlock& a, const TokenBatch& b) { return forward(a, b.x); }
  static std::vector<double> gradient(const SmolaBlock& a, const BlockForward& f, const Matrix& upstream) {
    return backward_correction(a, f.cache, upstream).flatten();
  }
};

template <>
struct adapter_traits<OmniAdapter> {
  static constexpr const char* kind = "omni-smola";
  static OmniForward forward_cached(const OmniAdapter& a, const TokenBatch& b) { return omni_forward(a, b); }
  static std::vector<double> gradient(const OmniAdapter& a, const OmniForward& f, const Matrix& upstream) {
    return omni_backward(a, f.cache, upstream).flatten();
  }
};

template <>
struct adapter_traits<PlainLora> {
  static constexpr const char* kind = "plain-lora";
  struct Forward {
    Matrix y;
    Matrix x;
  };
  static Forward forward_cached(const PlainLora& a, const TokenBatch& b) { return {lora_apply(a, b.x), b.x}; }
  static std::vector<double> gradient(const PlainLora& a, const Forward& f, const Matrix& upstream) {
    return lora_backward(a, f.x, upstream).flatten();
  }
};

template <>
struct adapter_traits<GatedMoeAdapter> {
  static constexpr const char* kind = "gated-moe";
  static GatedMoeForward forward_cached(const GatedMoeAdapter& a, const TokenBatch& b) {
    return gated_moe_adapter_forward(a, b.x);
  }
  static std::vector<double> gradient(const GatedMoeAdapter& a, const GatedMoeForward& f, const Matrix& upstream) {
    return gated_moe_adapter_backward(a, f.cache, upstream).flatten();
  }
};

template <>
struct adapter_traits<GatedLoraMixture> {
  static constexpr const char* kind = "lora-mixture";
  static GatedLoraMixtureForward forward_cached(const GatedLoraMixture& a, const TokenBatch& b) {
    return gated_lora_mixture_forward(a, b.x);
  }
  static std::vector<double> gradient(const GatedLoraMixture& a, const GatedLoraMixtureForward& f,
                                      const Matrix& upstream) {
    return gated_lora_mixture_backward(a, f.cache, upstream).flatten();
  }
};

template <class A>
std::vector<double> flat_parameters(A& model) {
  std::vector<double> out;
  for (auto p : model.parameters()) out.insert(out.end(), p.begin(), p.end());
  return out;
}

template <class A>
void set_parameters(A& model, const std::vector<double>& flat) {
  std::size_t at = 0;
  for (auto p : model.parameters()) {
    if (at + p.size() > flat.size()) throw ShapeError("set_parameters: too few values");
    std::copy(flat.begin() + at, flat.begin() + at + p.size(), p.begin());
    at += p.size();
  }
  if (at != flat.size()) throw ShapeError("set_parameters: too many values");
}

// ---------------------------------------------------------------------------
// Loss

struct MultitaskLoss {
  double total = 0.0;
  std::vector<double> per_task;
  double average() const { return total / double(per_task.size()); }
};

namespace detail {

inline std::size_t batch_entries(const TaskBatch& batch) {
  std::size_t n = 0;
  for (const auto& ex : batch) n += ex.target.size();
  return n;
}

// Mean squared error of one task; adds d(MSE)/d(params) into grad when given.
template <class A>
double task_loss(const A& model, const TaskBatch& batch, std::vector<double>* grad) {
  using T = adapter_traits<A>;
  const std::size_t entries = batch_entries(batch);
  if (entries == 0) throw ConfigError("multitask_loss: empty task batch");
  const double scale = 2.0 / double(entries);
  double sse = 0.0;
  for (const auto& ex : batch) {
    const auto f = T::forward_cached(model, ex.input);
    if (f.y.shape() != ex.target.shape()) throw ShapeError("multitask_loss", f.y.shape(), ex.target.shape());
    Matrix residual = f.y - ex.target;
    for (double r : residual.values()) sse += r * r;
    if (grad) {
      for (double& r : residual.values()) r *= scale;
      const auto g = T::gradient(model, f, residual);
      if (grad->empty()) grad->assign(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] += g[i];
    }
  }
  return sse / double(entries);
}

}  // namespace detail

/// Linear scalarization with unit weights: total = sum of per-task MSE.
template <class A>
MultitaskLoss multitask_loss(const A& model, const std::vector<TaskBatch>& batches) {
  if (batches.empty()) throw ConfigError("multitask_loss: no task batches");
  MultitaskLoss out;
  for (const auto& b : batches) {
    out.per_task.push_back(detail::task_loss(model, b, nullptr));
    out.total += out.per_task.back();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::size_t steps = 2000;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t eval_every = 100;
  std::string label;  // written as "arm" in log records when set

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("TrainOptions: lr must be finite and >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("TrainOptions: momentum must be in [0, 1)");
    if (eval_every < 1) throw ConfigError("TrainOptions: eval_every must be >= 1");
  }
};

struct EvalRecord {
  std::size_t step = 0;
  std::vector<double> per_task;
  double avg = 0.0;
};

struct TrainState {
  std::string kind;
  std::size_t step = 0;
  std::vector<double> params;
  std::vector<double> velocity;
  double best_validation = -std::numeric_limits<double>::infinity();  // negative average loss
  std::size_t best_step = 0;
  std::vector<double> best_params;
  std::vector<EvalRecord> history;
  std::uint64_t base_hash = 0;
  // Set when the last evaluation was off the eval_every schedule (a final
  // step that is not a multiple of it). Holds the best checkpoint from before
  // that evaluation so resume can drop it and match an uninterrupted run.
  bool off_schedule_tail = false;
  double scheduled_best_validation = -std::numeric_limits<double>::infinity();
  std::size_t scheduled_best_step = 0;
  std::vector<double> scheduled_best_params;

  /// Average validation loss at the last evaluation.
  double final_loss() const { return history.empty() ? std::numeric_limits<double>::quiet_NaN() : history.back().avg; }
};

/// FNV-1a over the bytes of a matrix, used to check that the backbone is frozen.
inline std::uint64_t matrix_hash(const Matrix& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  };
  const std::size_t dims[] = {m.rows(), m.cols()};
  mix(dims, sizeof(dims));
  mix(m.values().data(), m.values().size_bytes());
  return h;
}

inline json eval_record_json(const EvalRecord& r, const std::string& label) {
  json j;
  if (!label.empty()) j["arm"] = label;
  j["step"] = r.step;
  j["per_task_loss"] = r.per_task;
  j["avg"] = r.avg;
  return j;
}

namespace detail {

template <class A>
EvalRecord evaluate(const A& model, const Mixture& mix, std::size_t step) {
  std::vector<TaskBatch> batches;
  EvalRecord r;
  r.step = step;
  double sum = 0.0;
  for (std::size_t t = 0; t < mix.tasks.size(); ++t) {
    double task_sum = 0.0;
    for (std::size_t v = 0; v < mix.config.validation_batches; ++v) {
      task_sum += task_loss(model, sample_batch(mix, t, Stream::validation, v), nullptr);
    }
    r.per_task.push_back(task_sum / double(mix.config.validation_batches));
    sum += r.per_task.back();
  }
  r.avg = sum / double(mix.tasks.size());
  if (!std::isfinite(r.avg)) {
    throw DivergenceError("validation loss is not finite at step " + std::to_string(step), step);
  }
  return r;
}

template <class A>
void record_evaluation(const A& model, const Mixture& mix, TrainState& state, const TrainOptions& opts,
                       std::ostream* log) {
  if (matrix_hash(model.base_weight()) != state.base_hash) {
    throw Error("backbone weight changed during training at step " + std::to_string(state.step));
  }
  EvalRecord r = evaluate(model, mix, state.step);
  // Ties keep the earlier checkpoint.
  if (-r.avg > state.best_validation) {
    state.best_validation = -r.avg;
    state.best_step = state.step;
    state.best_params = state.params;
  }
  if (log) *log << eval_record_json(r, opts.label).dump() << '\n';
  state.history.push_back(std::move(r));
}

template <class A>
void run(A& model, const Mixture& mix, const TrainOptions& opts, TrainState& state, std::ostream* log) {
  if (state.step > opts.steps) throw ConfigError("train: state is already past the requested step count");
  if (state.history.empty()) record_evaluation(model, mix, state, opts, log);
  while (state.step < opts.steps) {
    std::vector<double> grad;
    double total = 0.0;
    for (std::size_t t = 0; t < mix.tasks.size(); ++t) {
      total += task_loss(model, sample_batch(mix, t, Stream::train, state.step), &grad);
    }
    const std::size_t step = state.step + 1;
    if (!std::isfinite(total)) {
      throw DivergenceError("training loss is not finite at step " + std::to_string(step), step);
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
      state.velocity[i] = opts.momentum * state.velocity[i] + grad[i];
      state.params[i] -= opts.lr * state.velocity[i];
    }
    set_parameters(model, state.params);
    state.step = step;
    if (step % opts.eval_every == 0) {
      record_evaluation(model, mix, state, opts, log);
    } else if (step == opts.steps) {
      state.off_schedule_tail = true;
      state.scheduled_best_validation = state.best_validation;
      state.scheduled_best_step = state.best_step;
      state.scheduled_best_params = state.best_params;
      record_evaluation(model, mix, state, opts, log);
    }
  }
}

// Undoes an off-schedule final evaluation before training continues.
inline void drop_off_schedule_tail(TrainState& state) {
  if (!state.off_schedule_tail) return;
  if (state.history.empty() || state.history.back().step != state.step) {
    throw FormatError("resume: off-schedule evaluation does not match the state step");
  }
  state.history.pop_back();
  state.best_validation = state.scheduled_best_validation;
  state.best_step = state.scheduled_best_step;
  state.best_params = std::move(state.scheduled_best_params);
  state.off_schedule_tail = false;
  state.scheduled_best_validation = -std::numeric_limits<double>::infinity();
  state.scheduled_best_step = 0;
  state.scheduled_best_params.clear();
}

}  // namespace detail

/// Trains adapter parameters only; the shared backbone is never written.
/// Evaluates at step 0, every eval_every steps, and at the last step.
template <class A>
TrainState train(A& model, const Mixture& mix, const TrainOptions& opts, std::ostream* log = nullptr) {
  opts.validate();
  TrainState state;
  state.kind = adapter_traits<A>::kind;
  state.params = flat_parameters(model);
  state.velocity.assign(state.params.size(), 0.0);
  state.base_hash = matrix_hash(model.base_weight());
  detail::run(model, mix, opts, state, log);
  return state;
}

/// Continues a saved state up to opts.steps total steps.
template <class A>
TrainState resume(A& model, const Mixture& mix, const TrainOptions& opts, TrainState state,
                  std::ostream* log = nullptr) {
  opts.validate();
  if (state.kind != adapter_traits<A>::kind) {
    throw ConfigError("resume: state was saved for '" + state.kind + "', not '" + adapter_traits<A>::kind + "'");
  }
  if (state.base_hash != matrix_hash(model.base_weight())) throw ConfigError("resume: backbone does not match");
  if (state.velocity.size() != state.params.size()) throw FormatError("resume: velocity size mismatch");
  set_parameters(model, state.params);
  if (state.step < opts.steps) detail::drop_off_schedule_tail(state);
  detail::run(model, mix, opts, state, log);
  return state;
}

/// A copy of `model` holding the given flat parameters (for best checkpoints).
template <class A>
A with_parameters(A model, const std::vector<double>& flat) {
  set_parameters(model, flat);
  return model;
}

// ---------------------------------------------------------------------------
// TrainState serialization. Doubles are written as JSON numbers, which
// round-trip exactly.

inline json to_json(const TrainState& s) {
  json history = json::array();
  for (const auto& r : s.history) history.push_back(eval_record_json(r, ""));
  json j = {{"format", "train-state"},
           {"kind", s.kind},
           {"step", s.step},
           {"params", s.params},
           {"velocity", s.velocity},
           {"best_validation", s.best_validation},
           {"best_step", s.best_step},
           {"best_params", s.best_params},
           {"history", history},
             {"base_hash", s.base_hash}};
  if (s.off_schedule_tail) {
    j["scheduled_best"] = {{"validation", s.scheduled_best_validation},
                           {"step", s.scheduled_best_step},
                           {"params", s.scheduled_best_params}};
  }
  return j;
}

inline TrainState train_state_from_json(const json& j) {
  detail::expect_format(j, "train-state");
  return detail::guarded("train-state", [&] {
    TrainState s;
    s.kind = j.at("kind").get<std::string>();
    s.step = j.at("step").get<std::size_t>();
    s.params = j.at("params").get<std::vector<double>>();
    s.velocity = j.at("velocity").get<std::vector<double>>();
    s.best_validation = j.at("best_validation").get<double>();
    s.best_step = j.at("best_step").get<std::size_t>();
    s.best_params = j.at("best_params").get<std::vector<double>>();
    for (const auto& r : j.at("history")) {
      s.history.push_back({r.at("step").get<std::size_t>(), r.at("per_task_loss").get<std::vector<double>>(),
                           r.at("avg").get<double>()});
    }
    s.base_hash = j.at("base_hash").get<std::uint64_t>();
    if (j.contains("scheduled_best")) {
      const json& b = j.at("scheduled_best");
      s.off_schedule_tail = true;
      s.scheduled_best_validation = b.at("validation").get<double>();
      s.scheduled_best_step = b.at("step").get<std::size_t>();
      s.scheduled_best_params = b.at("params").get<std::vector<double>>();
    }
    return s;
  });
}

inline void save_train_state(const std::filesystem::path& path, const TrainState& s) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::write_json(path, to_json(s));
}

inline TrainState load_train_state(const std::filesystem::path& path) {
  return train_state_from_json(detail::read_json(path));
}

}  // namespace smola

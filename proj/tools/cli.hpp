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

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "smola/diagnostics.hpp"
#include "smola/gradcheck.hpp"
#include "smola/serialize.hpp"
#include "smola/trainer.hpp"

// Command logic for the `smola` binary. Everything is driven by a RunConfig;
// command-line flags only override a few top-level fields.

namespace smola::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // check failure or divergence
inline constexpr int kExitConfig = 2;   // usage, config or checkpoint error

// Arms in their fixed order. The index seeds each arm's initialization.
inline const std::vector<std::string> kArms = {"omni-smola", "plain-lora", "gated-moe", "lora-mixture"};

struct TrainSettings {
  std::size_t steps = 2000;
  double lr = 4.0;
  double momentum = 0.9;
  std::size_t eval_every = 100;
  std::vector<std::string> arms = kArms;
  std::size_t plain_lora_rank = 0;  // 0: match the Omni parameter count
  std::size_t moe_experts = 4;
  std::size_t moe_hidden = 0;  // 0: match the Omni parameter count
  bool moe_top1 = false;
  std::size_t mixture_experts = 8;
  std::size_t mixture_rank = 0;  // 0: match the Omni parameter count
  std::map<std::string, double> lr_overrides;

  double lr_for(const std::string& arm) const {
    auto it = lr_overrides.find(arm);
    return it == lr_overrides.end() ? lr : it->second;
  }
};

struct BenchSettings {
  std::vector<std::size_t> widths = {256, 1024};
  std::vector<std::size_t> experts = {8, 24, 48};
  std::size_t rank = 4;
  std::size_t n_tokens = 256;
  std::size_t batch = 1;
  std::size_t repeats = 5;
  std::size_t warmup = 2;
};

struct RunConfig {
  std::uint64_t seed = 7;
  std::string output_dir = "smola_out";
  SmolaConfig smola = [] {
    SmolaConfig c;
    c.num_experts = 8;
    c.rank = 2;
    c.d_in = 64;
    c.d_out = 64;
    return c;
  }();
  GradcheckOptions gradcheck;
  MixtureConfig mixture;  // d_in, d_out and seed come from the fields above
  TrainSettings train;
  BenchSettings bench;

  MixtureConfig mixture_config() const {
    MixtureConfig m = mixture;
    m.d_in = smola.d_in;
    m.d_out = smola.d_out;
    m.seed = seed;
    return m;
  }

  GradcheckOptions gradcheck_options() const {
    GradcheckOptions g = gradcheck;
    g.seed = seed;
    return g;
  }

  void validate() const {
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    smola.validate();
    gradcheck.validate();
    mixture_config().validate();
    TrainOptions{train.steps, train.lr, train.momentum, train.eval_every, ""}.validate();
    if (train.arms.empty()) throw ConfigError("train.arms must not be empty");
    std::set<std::string> seen;
    for (const auto& a : train.arms) {
      if (std::find(kArms.begin(), kArms.end(), a) == kArms.end()) throw ConfigError("train.arms: unknown arm '" + a + "'");
      if (!seen.insert(a).second) throw ConfigError("train.arms: duplicate arm '" + a + "'");
    }
    for (const auto& [arm, lr] : train.lr_overrides) {
      if (std::find(kArms.begin(), kArms.end(), arm) == kArms.end()) {
        throw ConfigError("train.lr_overrides: unknown arm '" + arm + "'");
      }
      TrainOptions{1, lr, train.momentum, 1, ""}.validate();
    }
    if (train.moe_experts < 1 || train.mixture_experts < 1) {
      throw ConfigError("train.moe_experts and train.mixture_experts must be >= 1");
    }
    if (bench.widths.empty() || bench.experts.empty()) throw ConfigError("bench: sweep grid must not be empty");
    for (std::size_t d : bench.widths)
      if (d < bench.rank) throw ConfigError("bench: width " + std::to_string(d) + " is below rank");
    for (std::size_t e : bench.experts)
      if (e < 1) throw ConfigError("bench.experts entries must be >= 1");
    if (bench.rank < 1 || bench.n_tokens < 1 || bench.batch < 1) throw ConfigError("bench: sizes must be >= 1");
    if (bench.repeats < 3) throw ConfigError("bench.repeats must be >= 3");
  }
};

// ---------------------------------------------------------------------------
// Config JSON

namespace detail {

// Reads fields of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(where() + "must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    out = convert<T>(j_.at(key), where() + key);
  }

  const json* sub(const char* key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!used_.count(k)) throw ConfigError("unknown config key '" + where() + k + "'");
  }

 private:
  std::string where() const { return name_.empty() ? "" : name_ + "."; }

  template <class T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError(path + ": expected a nonnegative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number");
      return v.get<T>();
    } else if constexpr (requires { typename T::value_type; T{}.has_value(); }) {
      if (v.is_null()) return T{};
      return convert<typename T::value_type>(v, path);
    } else if constexpr (requires { typename T::mapped_type; }) {
      if (!v.is_object()) throw ConfigError(path + ": expected an object");
      T out;
      for (const auto& [k, x] : v.items()) out[k] = convert<typename T::mapped_type>(x, path + "." + k);
      return out;
    } else {
      if (!v.is_array()) throw ConfigError(path + ": expected an array");
      T out;
      for (const auto& x : v) out.push_back(convert<typename T::value_type>(x, path + "[]"));
      return out;
    }
  }

  const json& j_;
  std::string name_;
  std::set<std::string> used_;
};

template <class T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  const auto& g = c.gradcheck;
  const auto& m = c.mixture;
  const auto& t = c.train;
  const auto& b = c.bench;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"smola",
       {{"num_experts", c.smola.num_experts},
        {"rank", c.smola.rank},
        {"d_in", c.smola.d_in},
        {"d_out", c.smola.d_out},
        {"alpha_init", c.smola.alpha_init},
        {"init_scale", c.smola.init_scale}}},
      {"gradcheck",
       {{"cases", g.cases},
        {"max_d", g.max_d},
        {"max_experts", g.max_experts},
        {"max_rank", g.max_rank},
        {"max_tokens", g.max_tokens},
        {"num_experts", detail::optional_json(g.num_experts)},
        {"rank", detail::optional_json(g.rank)},
        {"d_in", detail::optional_json(g.d_in)},
        {"d_out", detail::optional_json(g.d_out)},
        {"tokens", detail::optional_json(g.tokens)},
        {"step", g.step},
        {"rel_tol", g.rel_tol},
        {"abs_tol", g.abs_tol}}},
      {"mixture",
       {{"num_tasks", m.num_tasks},
        {"task_rank", m.task_rank},
        {"seq_len", m.seq_len},
        {"examples_per_batch", m.examples_per_batch},
        {"validation_batches", m.validation_batches},
        {"noise_std", m.noise_std},
        {"delta_scale", m.delta_scale},
        {"signature_scale", m.signature_scale}}},
      {"train",
       {{"steps", t.steps},
        {"lr", t.lr},
        {"momentum", t.momentum},
        {"eval_every", t.eval_every},
        {"arms", t.arms},
        {"plain_lora_rank", t.plain_lora_rank},
        {"moe_experts", t.moe_experts},
        {"moe_hidden", t.moe_hidden},
        {"moe_top1", t.moe_top1},
        {"mixture_experts", t.mixture_experts},
        {"mixture_rank", t.mixture_rank},
        {"lr_overrides", t.lr_overrides}}},
      {"bench",
       {{"widths", b.widths},
        {"experts", b.experts},
        {"rank", b.rank},
        {"n_tokens", b.n_tokens},
        {"batch", b.batch},
        {"repeats", b.repeats},
        {"warmup", b.warmup}}},
  };
}

/// Missing keys keep their defaults; unknown keys and wrong types are errors.
inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  detail::Section top(j, "");
  top.get("seed", c.seed);
  top.get("output_dir", c.output_dir);
  if (const json* s = top.sub("smola")) {
    detail::Section sec(*s, "smola");
    sec.get("num_experts", c.smola.num_experts);
    sec.get("rank", c.smola.rank);
    sec.get("d_in", c.smola.d_in);
    sec.get("d_out", c.smola.d_out);
    sec.get("alpha_init", c.smola.alpha_init);
    sec.get("init_scale", c.smola.init_scale);
    sec.finish();
  }
  if (const json* s = top.sub("gradcheck")) {
    detail::Section sec(*s, "gradcheck");
    auto& g = c.gradcheck;
    sec.get("cases", g.cases);
    sec.get("max_d", g.max_d);
    sec.get("max_experts", g.max_experts);
    sec.get("max_rank", g.max_rank);
    sec.get("max_tokens", g.max_tokens);
    sec.get("num_experts", g.num_experts);
    sec.get("rank", g.rank);
    sec.get("d_in", g.d_in);
    sec.get("d_out", g.d_out);
    sec.get("tokens", g.tokens);
    sec.get("step", g.step);
    sec.get("rel_tol", g.rel_tol);
    sec.get("abs_tol", g.abs_tol);
    sec.finish();
  }
  if (const json* s = top.sub("mixture")) {
    detail::Section sec(*s, "mixture");
    auto& m = c.mixture;
    sec.get("num_tasks", m.num_tasks);
    sec.get("task_rank", m.task_rank);
    sec.get("seq_len", m.seq_len);
    sec.get("examples_per_batch", m.examples_per_batch);
    sec.get("validation_batches", m.validation_batches);
    sec.get("noise_std", m.noise_std);
    sec.get("delta_scale", m.delta_scale);
    sec.get("signature_scale", m.signature_scale);
    sec.finish();
  }
  if (const json* s = top.sub("train")) {
    detail::Section sec(*s, "train");
    auto& t = c.train;
    sec.get("steps", t.steps);
    sec.get("lr", t.lr);
    sec.get("momentum", t.momentum);
    sec.get("eval_every", t.eval_every);
    sec.get("arms", t.arms);
    sec.get("plain_lora_rank", t.plain_lora_rank);
    sec.get("moe_experts", t.moe_experts);
    sec.get("moe_hidden", t.moe_hidden);
    sec.get("moe_top1", t.moe_top1);
    sec.get("mixture_experts", t.mixture_experts);
    sec.get("mixture_rank", t.mixture_rank);
    sec.get("lr_overrides", t.lr_overrides);
    sec.finish();
  }
  if (const json* s = top.sub("bench")) {
    detail::Section sec(*s, "bench");
    auto& b = c.bench;
    sec.get("widths", b.widths);
    sec.get("experts", b.experts);
    sec.get("rank", b.rank);
    sec.get("n_tokens", b.n_tokens);
    sec.get("batch", b.batch);
    sec.get("repeats", b.repeats);
    sec.get("warmup", b.warmup);
    sec.finish();
  }
  top.finish();
  return c;
}

inline RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Shared helpers

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

inline void write_config(const RunConfig& c) {
  write_text(fs::path(c.output_dir) / "config.json", to_json(c).dump(2) + "\n");
}

inline std::string fixed(double v, int precision) {
  std::ostringstream s;
  s << std::setprecision(precision) << std::fixed << v;
  return s.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gradcheck

inline int cmd_gradcheck(const RunConfig& c, std::ostream& out) {
  c.validate();
  const GradcheckReport r = run_gradcheck(c.gradcheck_options());
  const json j = to_json(r);
  detail::write_config(c);
  detail::write_text(fs::path(c.output_dir) / "gradcheck.json", j.dump(2) + "\n");
  out << j.dump(2) << '\n';
  return r.passed() ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------------------
// train

struct ArmSizes {
  std::size_t target_params = 0;  // trainable parameters of the Omni arm
  std::size_t plain_lora_rank = 0;
  std::size_t moe_hidden = 0;
  std::size_t mixture_rank = 0;
};

/// Fills the automatic sizes so each baseline has at most the Omni parameter count.
inline ArmSizes arm_sizes(const RunConfig& c) {
  ArmSizes s;
  const std::size_t d1 = c.smola.d_in, d2 = c.smola.d_out;
  s.target_params = 3 * c.smola.trainable_parameter_count();
  const auto& t = c.train;
  auto gated = [&](std::size_t experts) -> std::size_t {
    const std::size_t gate = experts * d1;
    return s.target_params > gate ? (s.target_params - gate) / (experts * (d1 + d2)) : 0;
  };
  s.plain_lora_rank = t.plain_lora_rank ? t.plain_lora_rank : s.target_params / (d1 + d2);
  s.moe_hidden = t.moe_hidden ? t.moe_hidden : gated(t.moe_experts);
  s.mixture_rank = t.mixture_rank ? t.mixture_rank : gated(t.mixture_experts);
  s.plain_lora_rank = std::min(s.plain_lora_rank, std::min(d1, d2));
  s.mixture_rank = std::min(s.mixture_rank, std::min(d1, d2));
  if (s.moe_hidden < 1 || s.mixture_rank < 1 || s.plain_lora_rank < 1) {
    throw ConfigError("train: baseline sizes cannot match the Omni parameter count; set them explicitly");
  }
  return s;
}

struct ArmResult {
  std::string arm;
  std::size_t params = 0;
  double lr = 0.0;
  TrainState state;
};

inline json to_json(const ArmResult& r) {
  return {{"arm", r.arm},
          {"trainable_params", r.params},
          {"lr", r.lr},
          {"steps", r.state.step},
          {"initial_avg_loss", r.state.history.front().avg},
          {"final_avg_loss", r.state.final_loss()},
          {"best_avg_loss", -r.state.best_validation},
          {"best_step", r.state.best_step}};
}

/// Raised when one arm diverges; carries the arm name.
class ArmDivergence : public DivergenceError {
 public:
  ArmDivergence(std::string arm, const DivergenceError& e)
      : DivergenceError(arm + ": " + e.what(), e.step()), arm_(std::move(arm)) {}
  const std::string& arm() const noexcept { return arm_; }

 private:
  std::string arm_;
};

namespace detail {

template <class A>
ArmResult train_arm(const std::string& arm, A model, const Mixture& mix, const RunConfig& c, bool resume_run,
                    std::ostream& log) {
  const fs::path root(c.output_dir);
  const fs::path state_path = root / "state" / (arm + ".json");
  TrainOptions opts{c.train.steps, c.train.lr_for(arm), c.train.momentum, c.train.eval_every, arm};
  ArmResult r{arm, model.trainable_parameter_count(), opts.lr, {}};
  try {
    if (resume_run) {
      if (!fs::exists(state_path)) throw ConfigError("--resume: no saved state for arm '" + arm + "'");
      TrainState saved = load_train_state(state_path);
      if (saved.step < opts.steps) smola::detail::drop_off_schedule_tail(saved);
      // The log is rewritten in full so a resumed run matches an uninterrupted one.
      for (const auto& rec : saved.history) log << eval_record_json(rec, arm).dump() << '\n';
      r.state = resume(model, mix, opts, std::move(saved), &log);
    } else {
      r.state = train(model, mix, opts, &log);
    }
  } catch (const DivergenceError& e) {
    throw ArmDivergence(arm, e);
  }
  save_train_state(state_path, r.state);
  save_checkpoint(root / "checkpoints" / arm, model);
  save_checkpoint(root / "checkpoints" / (arm + "-best"), with_parameters(model, r.state.best_params));
  return r;
}

inline std::string comparison_table(const std::vector<ArmResult>& rows) {
  std::ostringstream s;
  s << std::left << std::setw(14) << "arm" << std::right << std::setw(8) << "params" << std::setw(8) << "lr"
    << std::setw(14) << "initial_avg" << std::setw(14) << "final_avg" << std::setw(14) << "best_avg"
    << std::setw(10) << "best_step" << '\n';
  for (const auto& r : rows) {
    s << std::left << std::setw(14) << r.arm << std::right << std::setw(8) << r.params << std::setw(8)
      << detail::fixed(r.lr, 3) << std::setw(14) << detail::fixed(r.state.history.front().avg, 8) << std::setw(14)
      << detail::fixed(r.state.final_loss(), 8) << std::setw(14) << detail::fixed(-r.state.best_validation, 8)
      << std::setw(10) << r.state.best_step << '\n';
  }
  return s.str();
}

}  // namespace detail

/// Trains every requested arm on the same mixture and returns the per-arm results.
inline std::vector<ArmResult> train_arms(const RunConfig& c, bool resume_run, std::ostream& log) {
  c.validate();
  const Mixture mix = make_mixture(c.mixture_config());
  const ArmSizes sizes = arm_sizes(c);
  std::vector<ArmResult> results;
  for (std::size_t i = 0; i < kArms.size(); ++i) {
    const std::string& arm = kArms[i];
    if (std::find(c.train.arms.begin(), c.train.arms.end(), arm) == c.train.arms.end()) continue;
    const std::uint64_t seed = derive_seed(c.seed, {100 + i});
    if (arm == "omni-smola") {
      SmolaConfig sc = c.smola;
      sc.seed = seed;
      results.push_back(detail::train_arm(arm, init_omni(OmniConfig::uniform(sc), mix.base), mix, c, resume_run, log));
    } else if (arm == "plain-lora") {
      results.push_back(detail::train_arm(arm, make_plain_lora(sizes.plain_lora_rank, mix.base, seed), mix, c,
                                          resume_run, log));
    } else if (arm == "gated-moe") {
      auto a = init_gated_moe_adapter(c.train.moe_experts, sizes.moe_hidden, mix.base, seed, c.train.moe_top1);
      results.push_back(detail::train_arm(arm, std::move(a), mix, c, resume_run, log));
    } else {
      auto a = init_gated_lora_mixture(c.train.mixture_experts, sizes.mixture_rank, mix.base, seed);
      results.push_back(detail::train_arm(arm, std::move(a), mix, c, resume_run, log));
    }
  }
  return results;
}

inline int cmd_train(const RunConfig& c, bool resume_run, std::ostream& out) {
  c.validate();
  const fs::path root(c.output_dir);
  detail::write_config(c);
  std::ostringstream log;
  std::vector<ArmResult> results;
  try {
    results = train_arms(c, resume_run, log);
  } catch (const ArmDivergence&) {
    detail::write_text(root / "train_log.jsonl", log.str());
    throw;
  }
  detail::write_text(root / "train_log.jsonl", log.str());
  json rows = json::array();
  for (const auto& r : results) rows.push_back(to_json(r));
  detail::write_text(root / "comparison.json", json{{"seed", c.seed}, {"arms", rows}}.dump(2) + "\n");
  out << detail::comparison_table(results);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

inline int cmd_bench(const RunConfig& c, std::ostream& out) {
  c.validate();
  const auto& b = c.bench;
  json rows = json::array();
  json fits = json::array();
  out << std::right << std::setw(6) << "d" << std::setw(6) << "E" << std::setw(14) << "overhead_pct" << std::setw(14)
      << "slowdown_pct" << '\n';
  for (std::size_t d : b.widths) {
    std::vector<double> es, overhead;
    for (std::size_t e : b.experts) {
      SmolaConfig sc;
      sc.num_experts = e;
      sc.rank = b.rank;
      sc.d_in = d;
      sc.d_out = d;
      sc.seed = c.seed;
      const BenchResult r = bench_throughput(sc, b.n_tokens, b.batch, b.repeats, {b.warmup, c.seed});
      rows.push_back(to_json(r));
      es.push_back(double(e));
      overhead.push_back(r.overhead_pct);
      out << std::setw(6) << d << std::setw(6) << e << std::setw(14) << detail::fixed(r.overhead_pct, 2)
          << std::setw(14) << detail::fixed(r.slowdown_pct, 2) << '\n';
    }
    std::set<double> distinct(es.begin(), es.end());
    if (distinct.size() >= 2) {
      const AffineFit f = fit_affine(es, overhead);
      fits.push_back({{"d", d}, {"intercept", f.intercept}, {"slope", f.slope}, {"r_squared", f.r_squared}});
    }
  }
  detail::write_config(c);
  detail::write_text(fs::path(c.output_dir) / "bench.json",
                     json{{"rows", rows}, {"overhead_vs_experts", fits}}.dump(2) + "\n");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// inspect

namespace detail {

inline json inspect_experts(const fs::path& dir, const std::string& name, const std::vector<LowRankExpert>& experts) {
  json spectra = json::array();
  Matrix aggregate(experts.front().w_out.rows(), experts.front().w_in.cols());
  for (std::size_t i = 0; i < experts.size(); ++i) {
    const Matrix p = expert_product(experts[i]);
    add_inplace(aggregate, p);
    const SpectrumReport s = effective_rank(p);
    write_text(dir / ("spectrum_" + name + "_expert" + std::to_string(i) + ".csv"), spectrum_csv(s));
    spectra.push_back(to_json(s));
  }
  const SpectrumReport agg = effective_rank(aggregate);
  write_text(dir / ("spectrum_" + name + "_aggregate.csv"), spectrum_csv(agg));
  return {{"experts", spectra}, {"aggregate", to_json(agg)}};
}

inline json inspect_routing(const fs::path& dir, const std::string& name, const Matrix& rows) {
  const HeatmapReport h = phi_gram(rows);
  write_text(dir / ("heatmap_" + name + ".csv"), to_csv(h.gram));
  return to_json(h);
}

inline json inspect_block(const fs::path& dir, const std::string& name, const SmolaBlock& b) {
  json j = inspect_experts(dir, name, b.experts);
  j["heatmap"] = inspect_routing(dir, name, b.phi);
  j["alpha"] = b.alpha;
  return j;
}

}  // namespace detail

/// Writes heat maps and spectra for every block of a saved checkpoint.
inline int cmd_inspect(const fs::path& checkpoint, const fs::path& output_dir, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const fs::path dir = output_dir / "inspect";
  json blocks = json::object();
  std::string kind;
  if (const auto* b = std::get_if<SmolaBlock>(&ck)) {
    kind = "smola-block";
    blocks["block"] = detail::inspect_block(dir, "block", *b);
  } else if (const auto* a = std::get_if<OmniAdapter>(&ck)) {
    kind = "omni-smola";
    blocks["visual"] = detail::inspect_block(dir, "visual", a->visual);
    blocks["text"] = detail::inspect_block(dir, "text", a->text);
    blocks["multimodal"] = detail::inspect_block(dir, "multimodal", a->multimodal);
  } else if (const auto* l = std::get_if<PlainLora>(&ck)) {
    kind = "plain-lora";
    blocks["lora"] = detail::inspect_experts(dir, "lora", {LowRankExpert{l->w_in, l->w_out}});
  } else if (const auto* m = std::get_if<GatedLoraMixture>(&ck)) {
    kind = "gated-lora-mixture";
    json j = detail::inspect_experts(dir, "mixture", m->mixture.experts);
    j["heatmap"] = detail::inspect_routing(dir, "mixture", m->gate);
    blocks["mixture"] = j;
  } else {
    // Gated MoE experts are nonlinear, so only the gate rows are reported.
    kind = "gated-moe";
    blocks["gate"] = {{"heatmap", detail::inspect_routing(dir, "gate", std::get<GatedMoeAdapter>(ck).ffn.gate)}};
  }
  const json report{{"checkpoint", checkpoint.string()}, {"kind", kind}, {"blocks", blocks}};
  detail::write_text(dir / "inspect.json", report.dump(2) + "\n");
  out << report.dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// rng

/// Dumps the integer and Gaussian streams for a seed, for cross-process checks.
inline int cmd_rng(std::uint64_t seed, std::size_t count, std::ostream& out) {
  Rng ints(seed), gauss(seed);
  for (std::size_t i = 0; i < count; ++i) out << i << ',' << ints.next_u64() << ',' << format_double(gauss.normal()) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline json error_json(const char* kind, const std::string& message) {
  return {{"error", kind}, {"message", message}};
}

/// Parses argv, runs one subcommand, and maps errors to the exit-code contract.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"smola: soft mixtures of low-rank experts"};
  app.require_subcommand(1);
  std::string config_path, output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  bool resume_run = false;
  std::string checkpoint;
  std::size_t count = 16;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the top-level seed");
    sub->add_option("--output-dir", output_dir, "override output_dir");
  };
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gradcheck);
  auto* train_cmd = app.add_subcommand("train", "train the configured arms on the synthetic mixture");
  add_common(train_cmd);
  train_cmd->add_option("--steps", steps, "override train.steps");
  train_cmd->add_flag("--resume", resume_run, "continue each arm from output_dir/state/<arm>.json");
  auto* bench = app.add_subcommand("bench", "dense versus SMoLA throughput sweep");
  add_common(bench);
  auto* inspect = app.add_subcommand("inspect", "heat maps and spectra of a checkpoint");
  add_common(inspect);
  inspect->add_option("checkpoint", checkpoint, "checkpoint directory or document")->required();
  auto* rng = app.add_subcommand("rng", "dump the seeded random stream");
  rng->add_option("--seed", seed, "seed (default 42)");
  rng->add_option("--count", count, "number of draws");
  auto* print_config = app.add_subcommand("print-config", "print the effective config");
  add_common(print_config);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << error_json("usage", e.what()).dump() << '\n';
    return kExitConfig;
  }

  try {
    if (rng->parsed()) return cmd_rng(seed.value_or(42), count, out);
    RunConfig c = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (seed) c.seed = *seed;
    if (!output_dir.empty()) c.output_dir = output_dir;
    if (steps) c.train.steps = *steps;
    if (print_config->parsed()) {
      c.validate();
      out << to_json(c).dump(2) << '\n';
      return kExitOk;
    }
    if (gradcheck->parsed()) return cmd_gradcheck(c, out);
    if (train_cmd->parsed()) return cmd_train(c, resume_run, out);
    if (bench->parsed()) return cmd_bench(c, out);
    return cmd_inspect(checkpoint, c.output_dir, out);
  } catch (const ArmDivergence& e) {
    json j = error_json("divergence", e.what());
    j["arm"] = e.arm();
    j["step"] = e.step();
    err << j.dump() << '\n';
    return kExitFailure;
  } catch (const DivergenceError& e) {
    json j = error_json("divergence", e.what());
    j["step"] = e.step();
    err << j.dump() << '\n';
    return kExitFailure;
  } catch (const ConfigError& e) {
    err << error_json("config", e.what()).dump() << '\n';
    return kExitConfig;
  } catch (const FormatError& e) {
    err << error_json("checkpoint", e.what()).dump() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << error_json("runtime", e.what()).dump() << '\n';
    return kExitFailure;
  }
}

}  // namespace smola::cli

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

#include <cstdio>
#include <fstream>
#include <sstream>

#include "cli.hpp"

namespace {

using namespace smola;
namespace fs = std::filesystem;

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "smola");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Runs the installed binary in a separate process and captures stdout.
Outcome run_process(const std::string& args) {
  const std::string cmd = std::string(SMOLA_BINARY) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  Outcome o;
  if (!pipe) return {-1, "", ""};
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) o.out.append(buf, n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("smola_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "run.json";
  std::ofstream(p) << j.dump(2);
  return p.string();
}

// Spectrum files carry a header row: index,singular_value,fraction_of_max.
std::vector<std::vector<double>> read_spectrum(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "index,singular_value,fraction_of_max");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::istringstream fields(line);
    std::string f;
    while (std::getline(fields, f, ',')) row.push_back(std::stod(f));
    EXPECT_EQ(row.size(), 3u) << line;
    rows.push_back(row);
  }
  return rows;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json small_run(const fs::path& out) {
  return {{"output_dir", out.string()},
          {"smola", {{"num_experts", 2}, {"rank", 1}, {"d_in", 12}, {"d_out", 12}}},
          {"mixture", {{"task_rank", 2}, {"examples_per_batch", 4}, {"validation_batches", 1}}},
          {"train", {{"steps", 30}, {"lr", 0.1}, {"eval_every", 10}, {"moe_experts", 2}, {"mixture_experts", 2}}}};
}

TEST(CliConfig, DefaultsRoundTrip) {
  const cli::RunConfig c;
  c.validate();
  EXPECT_EQ(cli::to_json(cli::config_from_json(cli::to_json(c))), cli::to_json(c));
  EXPECT_EQ(c.train.arms.size(), 4u);
}

TEST(CliConfig, RejectsUnknownKeysAndBadTypes) {
  EXPECT_THROW(cli::config_from_json({{"sed", 1}}), ConfigError);
  EXPECT_THROW(cli::config_from_json({{"train", {{"stpes", 1}}}}), ConfigError);
  EXPECT_THROW(cli::config_from_json({{"seed", -1}}), ConfigError);
  EXPECT_THROW(cli::config_from_json({{"smola", {{"rank", "two"}}}}), ConfigError);
  EXPECT_THROW(cli::config_from_json({{"train", {{"arms", {"omni-smola", "bogus"}}}}}).validate(), ConfigError);
  EXPECT_THROW(cli::config_from_json({{"train", {{"arms", json::array()}}}}).validate(), ConfigError);
}

TEST(CliGradcheck, DefaultConfigPasses) {
  const auto dir = scratch("gradcheck");
  const auto r = run_cli({"gradcheck", "--output-dir", dir.string()});
  EXPECT_EQ(r.code, cli::kExitOk) << r.err;
  const json report = json::parse(slurp(dir / "gradcheck.json"));
  EXPECT_TRUE(report.at("passed").get<bool>());
  for (const auto& [name, g] : report.at("groups").items()) {
    EXPECT_EQ(g.at("failures"), 0) << name;
    EXPECT_LT(g.at("max_rel_error").get<double>(), 1e-6) << name;
  }
  EXPECT_TRUE(fs::exists(dir / "config.json"));
}

TEST(CliGradcheck, RankAboveWidthIsConfigError) {
  const auto dir = scratch("gradcheck_rank");
  const auto cfg = write_config(dir, {{"smola", {{"rank", 65}}}, {"output_dir", dir.string()}});
  const auto r = run_cli({"gradcheck", "--config", cfg});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_EQ(json::parse(r.err).at("error"), "config");

  const auto cfg2 = write_config(dir, {{"gradcheck", {{"rank", 3}, {"d_in", 2}}}, {"output_dir", dir.string()}});
  EXPECT_EQ(run_cli({"gradcheck", "--config", cfg2}).code, cli::kExitConfig);
}

TEST(CliGradcheck, SingleExpertPasses) {
  const auto dir = scratch("gradcheck_e1");
  const auto cfg = write_config(dir, {{"gradcheck", {{"num_experts", 1}, {"cases", 30}}}, {"output_dir", dir.string()}});
  const auto r = run_cli({"gradcheck", "--config", cfg});
  EXPECT_EQ(r.code, cli::kExitOk) << r.out;
}

TEST(CliTrain, ZeroStepsLogsOnlyInitialEvaluation) {
  const auto dir = scratch("train_zero");
  const auto cfg = write_config(dir, small_run(dir));
  const auto r = run_cli({"train", "--config", cfg, "--steps", "0"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;

  std::istringstream log(slurp(dir / "train_log.jsonl"));
  std::string line;
  std::vector<std::string> arms;
  while (std::getline(log, line)) {
    const json rec = json::parse(line);
    EXPECT_EQ(rec.at("step"), 0);
    arms.push_back(rec.at("arm"));
  }
  EXPECT_EQ(arms, cli::kArms);

  // The saved Omni adapter is the initialization itself.
  const auto c = cli::config_from_json(small_run(dir));
  const Mixture mix = make_mixture(c.mixture_config());
  SmolaConfig sc = c.smola;
  sc.seed = derive_seed(c.seed, {100});
  const OmniAdapter init = init_omni(OmniConfig::uniform(sc), mix.base);
  const auto saved = load_checkpoint_as<OmniAdapter>(dir / "checkpoints" / "omni-smola");
  for (auto [a, b] : {std::pair{&saved.visual, &init.visual}, {&saved.text, &init.text},
                      {&saved.multimodal, &init.multimodal}}) {
    EXPECT_EQ(a->phi, b->phi);
    EXPECT_EQ(a->alpha, b->alpha);
    for (std::size_t i = 0; i < a->experts.size(); ++i) {
      EXPECT_EQ(a->experts[i].w_in, b->experts[i].w_in);
      EXPECT_EQ(a->experts[i].w_out, b->experts[i].w_out);
    }
  }
  EXPECT_EQ(saved.base_weight(), *mix.base);
}

TEST(CliTrain, RepeatedRunsAreByteIdentical) {
  const auto a = scratch("train_a"), b = scratch("train_b");
  const auto ra = run_cli({"train", "--config", write_config(a, small_run(a))});
  const auto rb = run_cli({"train", "--config", write_config(b, small_run(b))});
  ASSERT_EQ(ra.code, cli::kExitOk) << ra.err;
  ASSERT_EQ(rb.code, cli::kExitOk) << rb.err;
  EXPECT_EQ(slurp(a / "train_log.jsonl"), slurp(b / "train_log.jsonl"));
  EXPECT_EQ(slurp(a / "comparison.json"), slurp(b / "comparison.json"));
  EXPECT_EQ(ra.out, rb.out);
  for (const auto& arm : cli::kArms) {
    EXPECT_EQ(slurp(a / "state" / (arm + ".json")), slurp(b / "state" / (arm + ".json"))) << arm;
  }
}

TEST(CliTrain, ComparisonHasOneRowPerArm) {
  const auto dir = scratch("train_table");
  json cfg = small_run(dir);
  cfg["train"]["arms"] = {"plain-lora", "omni-smola"};
  const auto r = run_cli({"train", "--config", write_config(dir, cfg)});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const json cmp = json::parse(slurp(dir / "comparison.json"));
  ASSERT_EQ(cmp.at("arms").size(), 2u);
  // Rows follow the fixed arm order, not the config order.
  EXPECT_EQ(cmp.at("arms")[0].at("arm"), "omni-smola");
  EXPECT_EQ(cmp.at("arms")[1].at("arm"), "plain-lora");
  for (const auto& row : cmp.at("arms")) {
    EXPECT_LE(row.at("best_avg_loss").get<double>(), row.at("initial_avg_loss").get<double>());
    EXPECT_TRUE(fs::exists(dir / "checkpoints" / (row.at("arm").get<std::string>() + "-best")));
  }
  EXPECT_NE(r.out.find("omni-smola"), std::string::npos);
  EXPECT_NE(r.out.find("plain-lora"), std::string::npos);
}

TEST(CliTrain, DivergenceNamesTheArm) {
  const auto dir = scratch("train_diverge");
  json cfg = small_run(dir);
  cfg["train"]["lr_overrides"] = {{"gated-moe", 1e8}};
  const auto r = run_cli({"train", "--config", write_config(dir, cfg)});
  EXPECT_EQ(r.code, cli::kExitFailure);
  const json err = json::parse(r.err);
  EXPECT_EQ(err.at("error"), "divergence");
  EXPECT_EQ(err.at("arm"), "gated-moe");
  EXPECT_GE(err.at("step").get<std::size_t>(), 1u);
}

TEST(CliTrain, ResumeMatchesUninterruptedRun) {
  const auto full = scratch("resume_full"), part = scratch("resume_part");
  ASSERT_EQ(run_cli({"train", "--config", write_config(full, small_run(full))}).code, 0);
  const auto cfg = write_config(part, small_run(part));
  ASSERT_EQ(run_cli({"train", "--config", cfg, "--steps", "15"}).code, 0);
  ASSERT_EQ(run_cli({"train", "--config", cfg, "--resume"}).code, 0);
  EXPECT_EQ(slurp(full / "train_log.jsonl"), slurp(part / "train_log.jsonl"));
  EXPECT_EQ(slurp(full / "comparison.json"), slurp(part / "comparison.json"));
  for (const auto& arm : cli::kArms) {
    EXPECT_EQ(slurp(full / "state" / (arm + ".json")), slurp(part / "state" / (arm + ".json"))) << arm;
    EXPECT_EQ(slurp(full / "checkpoints" / (arm + "-best") / kAdapterFile),
              slurp(part / "checkpoints" / (arm + "-best") / kAdapterFile));
  }

  const auto missing = scratch("resume_missing");
  EXPECT_EQ(run_cli({"train", "--config", write_config(missing, small_run(missing)), "--resume"}).code,
            cli::kExitConfig);
}

TEST(CliInspect, FreshCheckpointHasZeroSpectra) {
  const auto dir = scratch("inspect_fresh");
  ASSERT_EQ(run_cli({"train", "--config", write_config(dir, small_run(dir)), "--steps", "0"}).code, 0);
  const auto r = run_cli({"inspect", (dir / "checkpoints" / "omni-smola").string(), "--output-dir", dir.string()});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const json rep = json::parse(slurp(dir / "inspect" / "inspect.json"));
  EXPECT_EQ(rep.at("kind"), "omni-smola");
  for (const char* block : {"visual", "text", "multimodal"}) {
    const json& b = rep.at("blocks").at(block);
    for (const auto& s : b.at("experts")) {
      for (double v : s.at("singular_values")) EXPECT_EQ(v, 0.0);
      for (const auto& [_, c] : s.at("counts_at").items()) EXPECT_EQ(c, 0);
    }
    for (std::size_t i = 0; i < 2; ++i) {
      const auto rows = read_spectrum(dir / "inspect" /
                                      ("spectrum_" + std::string(block) + "_expert" + std::to_string(i) + ".csv"));
      EXPECT_FALSE(rows.empty());
      for (const auto& row : rows) EXPECT_EQ(row[1], 0.0);
    }
  }
}

TEST(CliInspect, OrthonormalRoutingGivesIdentityHeatmap) {
  const auto dir = scratch("inspect_ortho");
  SmolaConfig cfg;
  cfg.num_experts = 3;
  cfg.rank = 1;
  cfg.d_in = 5;
  cfg.d_out = 4;
  Rng rng(11);
  SmolaBlock b = init_block(cfg, rng.normal_matrix(5, 4));
  b.phi = Matrix(3, 5);
  for (std::size_t i = 0; i < 3; ++i) b.phi(i, 4 - i) = 0.5 + double(i);
  save_checkpoint(dir / "ckpt", b);
  ASSERT_EQ(run_cli({"inspect", (dir / "ckpt").string(), "--output-dir", dir.string()}).code, 0);
  EXPECT_EQ(read_csv(dir / "inspect" / "heatmap_block.csv"), Matrix::identity(3));
  const json rep = json::parse(slurp(dir / "inspect" / "inspect.json"));
  EXPECT_EQ(rep.at("blocks").at("block").at("heatmap").at("identity_distance"), 0.0);
}

TEST(CliInspect, TrainedSpectraParseAndCountsAreMonotone) {
  const auto dir = scratch("inspect_trained");
  ASSERT_EQ(run_cli({"train", "--config", write_config(dir, small_run(dir))}).code, 0);
  for (const auto& arm : cli::kArms) {
    const auto out = dir / ("inspect_" + arm);
    const auto r = run_cli({"inspect", (dir / "checkpoints" / arm).string(), "--output-dir", out.string()});
    ASSERT_EQ(r.code, cli::kExitOk) << arm << r.err;
    const json rep = json::parse(slurp(out / "inspect" / "inspect.json"));
    for (const auto& [name, block] : rep.at("blocks").items()) {
      std::vector<json> spectra;
      if (block.contains("experts")) spectra = block.at("experts").get<std::vector<json>>();
      if (block.contains("aggregate")) spectra.push_back(block.at("aggregate"));
      for (const auto& s : spectra) {
        std::vector<std::size_t> counts;
        for (double f : kSpectrumThresholds) counts.push_back(s.at("counts_at").at(format_double(f)));
        for (std::size_t i = 1; i < counts.size(); ++i) EXPECT_LE(counts[i], counts[i - 1]) << arm << name;
      }
    }
    for (const auto& entry : fs::directory_iterator(out / "inspect")) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("spectrum_", 0) == 0) {
        const auto rows = read_spectrum(entry.path());
        for (std::size_t k = 1; k < rows.size(); ++k) EXPECT_LE(rows[k][1], rows[k - 1][1]) << name;
      } else if (name.rfind("heatmap_", 0) == 0) {
        EXPECT_NO_THROW(read_csv(entry.path())) << name;
      }
    }
  }
}

TEST(CliInspect, CorruptCheckpointIsStructuredError) {
  const auto dir = scratch("inspect_corrupt");
  SmolaConfig cfg;
  cfg.d_in = 4;
  cfg.d_out = 4;
  cfg.rank = 2;
  Rng rng(3);
  save_checkpoint(dir / "ckpt", init_block(cfg, rng.normal_matrix(4, 4)));
  std::ofstream(dir / "ckpt" / kBlockFile) << "{\"format\": \"smola-block\", \"config\": 7";
  const auto r = run_cli({"inspect", (dir / "ckpt").string(), "--output-dir", dir.string()});
  EXPECT_EQ(r.code, cli::kExitConfig);
  EXPECT_EQ(json::parse(r.err).at("error"), "checkpoint");
  EXPECT_EQ(run_cli({"inspect", (dir / "absent").string()}).code, cli::kExitConfig);
}

TEST(CliBench, EmptyGridIsConfigErrorAndSmallGridRuns) {
  const auto dir = scratch("bench");
  const auto empty = write_config(dir, {{"bench", {{"experts", json::array()}}}, {"output_dir", dir.string()}});
  EXPECT_EQ(run_cli({"bench", "--config", empty}).code, cli::kExitConfig);

  const auto small = write_config(dir, {{"bench",
                                         {{"widths", {16, 32}},
                                          {"experts", {1, 2}},
                                          {"rank", 2},
                                          {"n_tokens", 8},
                                          {"repeats", 3},
                                          {"warmup", 0}}},
                                        {"output_dir", dir.string()}});
  const auto r = run_cli({"bench", "--config", small});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  const json rep = json::parse(slurp(dir / "bench.json"));
  EXPECT_EQ(rep.at("rows").size(), 4u);
  EXPECT_EQ(rep.at("overhead_vs_experts").size(), 2u);
}

TEST(CliProcess, RngStreamIsIdenticalAcrossProcesses) {
  const auto a = run_process("rng --count 64");
  const auto b = run_process("rng --count 64");
  EXPECT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  std::istringstream lines(a.out);
  std::string first;
  std::getline(lines, first);
  Rng rng(42);
  EXPECT_EQ(first.substr(0, first.rfind(',')), "0," + std::to_string(rng.next_u64()));
}

TEST(CliProcess, ExitCodes) {
  EXPECT_EQ(run_process("--help").code, 0);
  EXPECT_EQ(run_process("").code, 2);
  EXPECT_EQ(run_process("train --no-such-flag").code, 2);
  EXPECT_EQ(run_process("train --config /nonexistent.json").code, 2);
  EXPECT_EQ(run_process("print-config --seed 3").code, 0);
}

}  // namespace

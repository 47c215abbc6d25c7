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

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <variant>

#include "smola/baselines.hpp"
#include "smola/core.hpp"
#include "smola/numkit/csv.hpp"
#include "smola/omni.hpp"

// Checkpoints are a directory holding base.csv plus one JSON document per
// adapter. Matrices inside JSON are embedded in the CSV text format; scalars
// that must survive exactly (alpha) are stored as 17-digit strings.
//
//   block.json     {"format": "smola-block", ...}
//   omni.json      {"format": "omni-smola", "blocks": {visual, text, multimodal}}
//   adapter.json   {"format": "plain-lora" | "gated-moe" | "gated-lora-mixture", ...}

namespace smola {

using json = nlohmann::json;

inline constexpr const char* kBaseFile = "base.csv";
inline constexpr const char* kBlockFile = "block.json";
inline constexpr const char* kOmniFile = "omni.json";
inline constexpr const char* kAdapterFile = "adapter.json";

namespace detail {

inline Matrix matrix_field(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw FormatError(std::string("checkpoint: missing matrix field '") + key + "'");
  }
  return from_csv(j.at(key).get<std::string>());
}

inline double exact_number(const json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("checkpoint: missing field '") + key + "'");
  const json& v = j.at(key);
  if (v.is_number()) return v.get<double>();
  if (!v.is_string()) throw FormatError(std::string("checkpoint: field '") + key + "' is not a number");
  const std::string s = v.get<std::string>();
  double out = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError(std::string("checkpoint: bad number in '") + key + "'");
  }
  return out;
}

inline void expect_format(const json& j, const char* format) {
  if (!j.is_object() || j.value("format", "") != format) {
    throw FormatError(std::string("checkpoint: expected format '") + format + "'");
  }
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

inline json experts_json(const std::vector<LowRankExpert>& experts) {
  json arr = json::array();
  for (const auto& e : experts) arr.push_back({{"w_in", to_csv(e.w_in)}, {"w_out", to_csv(e.w_out)}});
  return arr;
}

inline std::vector<LowRankExpert> experts_from_json(const json& arr) {
  if (!arr.is_array()) throw FormatError("checkpoint: 'experts' must be an array");
  std::vector<LowRankExpert> out;
  for (const auto& e : arr) out.push_back({matrix_field(e, "w_in"), matrix_field(e, "w_out")});
  return out;
}

// Wraps nlohmann errors (missing keys, wrong types) as FormatError.
template <class F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

inline std::shared_ptr<const Matrix> load_base(const std::filesystem::path& dir, const json& j) {
  const std::string ref = j.value("base", kBaseFile);
  return std::make_shared<const Matrix>(read_csv(dir / ref));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SmolaBlock

inline json config_to_json(const SmolaConfig& c) {
  return {{"num_experts", c.num_experts}, {"rank", c.rank},
          {"d_in", c.d_in},               {"d_out", c.d_out},
          {"alpha_init", format_double(c.alpha_init)},
          {"init_scale", format_double(c.init_scale)},
          {"seed", c.seed}};
}

inline SmolaConfig config_from_json(const json& j) {
  return detail::guarded("SmolaConfig", [&] {
    SmolaConfig c;
    c.num_experts = j.at("num_experts").get<std::size_t>();
    c.rank = j.at("rank").get<std::size_t>();
    c.d_in = j.at("d_in").get<std::size_t>();
    c.d_out = j.at("d_out").get<std::size_t>();
    if (j.contains("alpha_init")) c.alpha_init = detail::exact_number(j, "alpha_init");
    if (j.contains("init_scale")) c.init_scale = detail::exact_number(j, "init_scale");
    c.seed = j.value("seed", std::uint64_t{0});
    return c;
  });
}

/// The base weight is not embedded; `base_ref` names its CSV file.
inline json block_to_json(const SmolaBlock& b, const std::string& base_ref = kBaseFile) {
  return {{"format", "smola-block"},
          {"config", config_to_json(b.config)},
          {"alpha", format_double(b.alpha)},
          {"phi", to_csv(b.phi)},
          {"experts", detail::experts_json(b.experts)},
          {"base", base_ref}};
}

inline SmolaBlock block_from_json(const json& j, std::shared_ptr<const Matrix> base) {
  detail::expect_format(j, "smola-block");
  return detail::guarded("smola-block", [&] {
    SmolaBlock b;
    b.config = config_from_json(j.at("config"));
    try {
      b.config.validate();
    } catch (const ConfigError& e) {
      throw FormatError(std::string("smola-block: ") + e.what());
    }
    b.alpha = detail::exact_number(j, "alpha");
    b.phi = detail::matrix_field(j, "phi");
    b.experts = detail::experts_from_json(j.at("experts"));
    b.base = std::move(base);
    if (!b.base || b.phi.rows() != b.config.num_experts || b.experts.size() != b.config.num_experts ||
        b.phi.cols() != b.config.d_in || b.base->rows() != b.config.d_in || b.base->cols() != b.config.d_out) {
      throw FormatError("smola-block: matrix shapes disagree with config");
    }
    for (const auto& e : b.experts) {
      if (e.w_in.shape() != Shape{b.config.rank, b.config.d_in} ||
          e.w_out.shape() != Shape{b.config.d_out, b.config.rank}) {
        throw FormatError("smola-block: expert shapes disagree with config");
      }
    }
    return b;
  });
}

// ---------------------------------------------------------------------------
// Baselines

inline json to_json(const PlainLora& l, const std::string& base_ref = kBaseFile) {
  return {{"format", "plain-lora"}, {"w_in", to_csv(l.w_in)}, {"w_out", to_csv(l.w_out)}, {"base", base_ref}};
}

inline PlainLora plain_lora_from_json(const json& j, std::shared_ptr<const Matrix> base) {
  detail::expect_format(j, "plain-lora");
  PlainLora l{detail::matrix_field(j, "w_in"), detail::matrix_field(j, "w_out"), std::move(base)};
  try {
    l.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("plain-lora: ") + e.what());
  }
  return l;
}

inline json to_json(const GatedMoeAdapter& a, const std::string& base_ref = kBaseFile) {
  json experts = json::array();
  for (const auto& e : a.ffn.experts) experts.push_back({{"w_in", to_csv(e.w_in)}, {"w_out", to_csv(e.w_out)}});
  return {{"format", "gated-moe"}, {"top1", a.top1},     {"gate", to_csv(a.ffn.gate)},
          {"experts", experts},    {"base", base_ref}};
}

inline GatedMoeAdapter gated_moe_from_json(const json& j, std::shared_ptr<const Matrix> base) {
  detail::expect_format(j, "gated-moe");
  return detail::guarded("gated-moe", [&] {
    GatedMoeAdapter a;
    a.top1 = j.value("top1", false);
    a.ffn.gate = detail::matrix_field(j, "gate");
    for (const auto& e : j.at("experts")) {
      a.ffn.experts.push_back({detail::matrix_field(e, "w_in"), detail::matrix_field(e, "w_out")});
    }
    a.base = std::move(base);
    try {
      a.validate();
    } catch (const Error& e) {
      throw FormatError(std::string("gated-moe: ") + e.what());
    }
    return a;
  });
}

inline json to_json(const GatedLoraMixture& m, const std::string& base_ref = kBaseFile) {
  return {{"format", "gated-lora-mixture"},
          {"gate", to_csv(m.gate)},
          {"experts", detail::experts_json(m.mixture.experts)},
          {"base", base_ref}};
}

inline GatedLoraMixture gated_lora_mixture_from_json(const json& j, std::shared_ptr<const Matrix> base) {
  detail::expect_format(j, "gated-lora-mixture");
  return detail::guarded("gated-lora-mixture", [&] {
    GatedLoraMixture m;
    m.gate = detail::matrix_field(j, "gate");
    m.mixture.experts = detail::experts_from_json(j.at("experts"));
    m.mixture.base = std::move(base);
    if (!m.mixture.base || m.gate.rows() != m.mixture.experts.size() || m.gate.cols() != m.mixture.base->rows()) {
      throw FormatError("gated-lora-mixture: gate shape disagrees with experts or base");
    }
    for (const auto& e : m.mixture.experts) {
      if (e.w_in.cols() != m.mixture.base->rows() || e.w_out.rows() != m.mixture.base->cols() ||
          e.w_in.rows() != e.w_out.cols()) {
        throw FormatError("gated-lora-mixture: expert shapes disagree with base");
      }
    }
    return m;
  });
}

// ---------------------------------------------------------------------------
// Checkpoint directories

inline void save_checkpoint(const std::filesystem::path& dir, const SmolaBlock& b) {
  std::filesystem::create_directories(dir);
  write_csv(dir / kBaseFile, b.base_weight());
  detail::write_json(dir / kBlockFile, block_to_json(b));
}

inline void save_checkpoint(const std::filesystem::path& dir, const OmniAdapter& a) {
  std::filesystem::create_directories(dir);
  write_csv(dir / kBaseFile, *a.base);
  json manifest{{"format", "omni-smola"}, {"base", kBaseFile}, {"blocks", json::object()}};
  const std::pair<const char*, const SmolaBlock*> blocks[] = {
      {"visual", &a.visual}, {"text", &a.text}, {"multimodal", &a.multimodal}};
  for (const auto& [name, block] : blocks) {
    const std::string file = std::string("block_") + name + ".json";
    detail::write_json(dir / file, block_to_json(*block));
    manifest["blocks"][name] = file;
  }
  detail::write_json(dir / kOmniFile, manifest);
}

template <class A>
  requires requires(const A& a) { to_json(a); }
inline void save_checkpoint(const std::filesystem::path& dir, const A& a) {
  std::filesystem::create_directories(dir);
  write_csv(dir / kBaseFile, a.base_weight());
  detail::write_json(dir / kAdapterFile, to_json(a));
}

using Checkpoint = std::variant<SmolaBlock, OmniAdapter, PlainLora, GatedMoeAdapter, GatedLoraMixture>;

namespace detail {

inline std::filesystem::path checkpoint_document(const std::filesystem::path& path) {
  if (!std::filesystem::is_directory(path)) return path;
  for (const char* name : {kOmniFile, kBlockFile, kAdapterFile}) {
    if (std::filesystem::exists(path / name)) return path / name;
  }
  throw FormatError("no checkpoint document in " + path.string());
}

}  // namespace detail

/// Loads a checkpoint from its directory or its JSON document.
inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto doc = detail::checkpoint_document(path);
  const auto dir = doc.parent_path();
  const json j = detail::read_json(doc);
  if (!j.is_object() || !j.contains("format") || !j.at("format").is_string()) {
    throw FormatError(doc.string() + ": missing 'format'");
  }
  const std::string format = j.at("format").get<std::string>();
  auto base = detail::load_base(dir, j);
  if (format == "smola-block") return block_from_json(j, base);
  if (format == "plain-lora") return plain_lora_from_json(j, base);
  if (format == "gated-moe") return gated_moe_from_json(j, base);
  if (format == "gated-lora-mixture") return gated_lora_mixture_from_json(j, base);
  if (format == "omni-smola") {
    return detail::guarded("omni-smola", [&] {
      OmniAdapter a;
      a.base = base;
      const json& blocks = j.at("blocks");
      a.visual = block_from_json(detail::read_json(dir / blocks.at("visual").get<std::string>()), base);
      a.text = block_from_json(detail::read_json(dir / blocks.at("text").get<std::string>()), base);
      a.multimodal = block_from_json(detail::read_json(dir / blocks.at("multimodal").get<std::string>()), base);
      try {
        a.validate();
      } catch (const Error& e) {
        throw FormatError(std::string("omni-smola: ") + e.what());
      }
      return a;
    });
  }
  throw FormatError(doc.string() + ": unknown format '" + format + "'");
}

template <class A>
A load_checkpoint_as(const std::filesystem::path& path) {
  Checkpoint c = load_checkpoint(path);
  if (auto* a = std::get_if<A>(&c)) return std::move(*a);
  throw FormatError(path.string() + ": checkpoint holds a different adapter type");
}

}  // namespace smola

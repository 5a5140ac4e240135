#pragma once

// JSON form of model specs. Hierarchical documents carry `stem`, `stages`
// (4 entries), `head`, `drop_path_rate`, `layer_scale_init` plus the optional
// `name`, `in_channels`, `downsample`, `attn_mlp_ratio`, `attn_heads`, `bias`.
// Isotropic documents have a single top-level `isotropic` object.
// Unknown keys are rejected everywhere.

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "effmod/model.hpp"
#include "json.hpp"

namespace effmod {

using nlohmann::json;

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class V>
void read_opt(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline json conv_step_json(const ConvStepSpec& s) {
  return json{{"kernel", s.kernel}, {"stride", s.stride}, {"padding", s.padding}};
}

inline ConvStepSpec conv_step_from(const json& j, ConvStepSpec s, const std::string& where) {
  reject_unknown(j, {"kernel", "stride", "padding"}, where);
  read_opt(j, "kernel", s.kernel, where);
  read_opt(j, "stride", s.stride, where);
  read_opt(j, "padding", s.padding, where);
  return s;
}

/// "line L, column C" for a byte offset into `text`.
inline std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

}  // namespace detail

inline json to_json(const ModelSpec& s) {
  json stages = json::array();
  for (const auto& st : s.stages)
    stages.push_back({{"dim", st.dim},
                      {"mod_blocks", st.mod_blocks},
                      {"attn_blocks", st.attn_blocks},
                      {"expansion_pattern", st.expansion_pattern},
                      {"dw_kernel", st.dw_kernel}});
  return json{{"name", s.name},
              {"in_channels", s.in_channels},
              {"stem", detail::conv_step_json(s.stem)},
              {"downsample", detail::conv_step_json(s.downsample)},
              {"stages", stages},
              {"head", {{"classes", s.classes}}},
              {"drop_path_rate", s.drop_path_rate},
              {"layer_scale_init", s.layer_scale_init},
              {"attn_mlp_ratio", s.attn_mlp_ratio},
              {"attn_heads", s.attn_heads},
              {"bias", s.bias}};
}

inline json to_json(const IsotropicSpec& s) {
  return json{{"isotropic",
               {{"name", s.name},
                {"block", to_string(s.block)},
                {"dim", s.dim},
                {"depth", s.depth},
                {"expansion", s.expansion},
                {"kernel", s.kernel},
                {"patch", s.patch},
                {"in_channels", s.in_channels},
                {"classes", s.classes},
                {"drop_path_rate", s.drop_path_rate},
                {"layer_scale_init", s.layer_scale_init},
                {"bias", s.bias}}}};
}

inline json to_json(const Architecture& a) { return a.isotropic ? to_json(a.iso) : to_json(a.hier); }

inline ModelSpec model_spec_from_json(const json& j) {
  detail::reject_unknown(j,
                         {"name", "in_channels", "stem", "downsample", "stages", "head", "drop_path_rate",
                          "layer_scale_init", "attn_mlp_ratio", "attn_heads", "bias"},
                         "spec");
  ModelSpec s;
  detail::read_opt(j, "name", s.name, "spec");
  detail::read_opt(j, "in_channels", s.in_channels, "spec");
  if (j.contains("stem")) s.stem = detail::conv_step_from(j["stem"], s.stem, "spec.stem");
  if (j.contains("downsample")) s.downsample = detail::conv_step_from(j["downsample"], s.downsample, "spec.downsample");
  if (!j.contains("stages") || !j["stages"].is_array()) throw ConfigError("spec: 'stages' array is required");
  for (std::size_t i = 0; i < j["stages"].size(); ++i) {
    const json& st = j["stages"][i];
    const std::string where = "spec.stages[" + std::to_string(i) + "]";
    detail::reject_unknown(st, {"dim", "mod_blocks", "attn_blocks", "expansion_pattern", "dw_kernel"}, where);
    StageSpec ss;
    if (!st.contains("dim")) throw ConfigError(where + ": 'dim' is required");
    detail::read_opt(st, "dim", ss.dim, where);
    detail::read_opt(st, "mod_blocks", ss.mod_blocks, where);
    detail::read_opt(st, "attn_blocks", ss.attn_blocks, where);
    detail::read_opt(st, "expansion_pattern", ss.expansion_pattern, where);
    detail::read_opt(st, "dw_kernel", ss.dw_kernel, where);
    s.stages.push_back(ss);
  }
  if (j.contains("head")) {
    detail::reject_unknown(j["head"], {"classes"}, "spec.head");
    detail::read_opt(j["head"], "classes", s.classes, "spec.head");
  }
  detail::read_opt(j, "drop_path_rate", s.drop_path_rate, "spec");
  detail::read_opt(j, "layer_scale_init", s.layer_scale_init, "spec");
  detail::read_opt(j, "attn_mlp_ratio", s.attn_mlp_ratio, "spec");
  detail::read_opt(j, "attn_heads", s.attn_heads, "spec");
  detail::read_opt(j, "bias", s.bias, "spec");
  s.validate();
  return s;
}

inline IsotropicSpec isotropic_spec_from_json(const json& j) {
  const std::string where = "spec.isotropic";
  detail::reject_unknown(j,
                         {"name", "block", "dim", "depth", "expansion", "kernel", "patch", "in_channels", "classes",
                          "drop_path_rate", "layer_scale_init", "bias"},
                         where);
  IsotropicSpec s;
  std::string block = "efficient_mod";
  detail::read_opt(j, "name", s.name, where);
  detail::read_opt(j, "block", block, where);
  if (block == "efficient_mod") s.block = IsoBlock::efficient_mod;
  else if (block == "mbconv") s.block = IsoBlock::mbconv;
  else throw ConfigError(where + ".block: expected 'efficient_mod' or 'mbconv', got '" + block + "'");
  detail::read_opt(j, "dim", s.dim, where);
  detail::read_opt(j, "depth", s.depth, where);
  detail::read_opt(j, "expansion", s.expansion, where);
  detail::read_opt(j, "kernel", s.kernel, where);
  detail::read_opt(j, "patch", s.patch, where);
  detail::read_opt(j, "in_channels", s.in_channels, where);
  detail::read_opt(j, "classes", s.classes, where);
  detail::read_opt(j, "drop_path_rate", s.drop_path_rate, where);
  detail::read_opt(j, "layer_scale_init", s.layer_scale_init, where);
  detail::read_opt(j, "bias", s.bias, where);
  s.validate();
  return s;
}

inline Architecture architecture_from_json(const json& j) {
  if (j.is_object() && j.contains("isotropic")) {
    detail::reject_unknown(j, {"isotropic"}, "spec");
    return as_architecture(isotropic_spec_from_json(j["isotropic"]));
  }
  return as_architecture(model_spec_from_json(j));
}

/// Parses a JSON document; syntax errors are reported with line and column.
inline Architecture parse_architecture(const std::string& text, const std::string& source = "spec") {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t at = e.byte == 0 ? 0 : e.byte - 1;
    std::string what = e.what();
    if (const auto colon = what.find(": "); colon != std::string::npos) what = what.substr(colon + 2);
    throw ConfigError(source + ": parse error at " + detail::line_col(text, at) + ": " + what);
  }
  return architecture_from_json(j);
}

inline Architecture load_architecture(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open spec file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_architecture(ss.str(), path);
}

}  // namespace effmod

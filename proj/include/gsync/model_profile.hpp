/*
 Copyright 2026 The gsync Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

     http://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gsync/errors.hpp"
#include "gsync/precision.hpp"

namespace gsync {

enum class LayerKind { Conv, FullyConnected, NonParam };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "Conv";
    case LayerKind::FullyConnected: return "FullyConnected";
    case LayerKind::NonParam: return "NonParam";
  }
  return "Conv";
}

inline LayerKind layer_kind_from_name(const std::string& s) {
  if (s == "Conv") return LayerKind::Conv;
  if (s == "FullyConnected") return LayerKind::FullyConnected;
  if (s == "NonParam") return LayerKind::NonParam;
  throw ParseError("unknown layer kind '" + s + "'");
}

/// Shape record for one network layer. Communication planning only needs
/// parameter counts, output feature-map sizes, and per-sample flops; weights
/// themselves are never stored.
struct LayerDescriptor {
  int id = 0;
  std::string name;
  LayerKind kind = LayerKind::Conv;
  std::int64_t in_channels = 1;    // C
  std::int64_t out_channels = 1;   // K
  std::int64_t out_h = 1;          // OH
  std::int64_t out_w = 1;          // OW
  std::int64_t kernel_h = 1;       // KH
  std::int64_t kernel_w = 1;       // KW
  std::int64_t stride = 1;
  bool has_bias = false;
  std::int64_t param_count = 0;
  double fwd_flops_per_sample = 0.0;

  bool parameterized() const { return kind != LayerKind::NonParam; }

  std::int64_t derived_param_count() const {
    switch (kind) {
      case LayerKind::Conv:
        return in_channels * out_channels * kernel_h * kernel_w + (has_bias ? out_channels : 0);
      case LayerKind::FullyConnected:
        return in_channels * out_channels + (has_bias ? out_channels : 0);
      case LayerKind::NonParam:
        return 0;
    }
    return 0;
  }

  double derived_fwd_flops() const {
    switch (kind) {
      case LayerKind::Conv:
        return 2.0 * static_cast<double>(in_channels) * static_cast<double>(out_channels) *
               static_cast<double>(kernel_h * kernel_w) * static_cast<double>(out_h * out_w);
      case LayerKind::FullyConnected:
        return 2.0 * static_cast<double>(in_channels) * static_cast<double>(out_channels);
      case LayerKind::NonParam:
        return static_cast<double>(out_channels * out_h * out_w * kernel_h * kernel_w);
    }
    return 0.0;
  }

  /// Output activation elements per sample (K*OH*OW).
  std::int64_t activation_elems_per_sample() const { return out_channels * out_h * out_w; }

  bool operator==(const LayerDescriptor&) const = default;
};

struct ModelProfile {
  std::string name;
  std::vector<LayerDescriptor> layers;
  int default_minibatch = 1;

  bool operator==(const ModelProfile&) const = default;
};

namespace detail {

inline void require_fields(const nlohmann::json& j, const std::set<std::string>& required,
                           const std::set<std::string>& optional, const std::string& where) {
  for (const auto& f : required) {
    if (!j.contains(f)) throw ParseError(where + ": missing field '" + f + "'");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!required.count(it.key()) && !optional.count(it.key()))
      throw ParseError(where + ": unknown field '" + it.key() + "'");
  }
}

inline std::int64_t int_field(const nlohmann::json& j, const char* key, const std::string& where) {
  const auto& v = j.at(key);
  if (!v.is_number_integer()) throw ParseError(where + ": field '" + std::string(key) + "' must be an integer");
  return v.get<std::int64_t>();
}

}  // namespace detail

/// Parses and validates a profile from already-loaded JSON.
inline ModelProfile parse_profile(const nlohmann::json& root) {
  detail::require_fields(root, {"name", "default_minibatch", "layers"}, {}, "profile");
  ModelProfile p;
  p.name = root.at("name").get<std::string>();
  p.default_minibatch = static_cast<int>(detail::int_field(root, "default_minibatch", "profile"));
  if (p.default_minibatch < 1) throw ValidationError("profile: default_minibatch must be >= 1");
  if (!root.at("layers").is_array()) throw ParseError("profile: 'layers' must be an array");

  int expect_id = 0;
  bool any_param = false;
  for (const auto& jl : root.at("layers")) {
    const std::string where = "layer " + std::to_string(expect_id);
    detail::require_fields(jl,
                           {"id", "name", "kind", "C", "K", "OH", "OW", "KH", "KW", "stride", "has_bias"},
                           {"param_count", "fwd_flops_per_sample"}, where);
    LayerDescriptor d;
    d.id = static_cast<int>(detail::int_field(jl, "id", where));
    d.name = jl.at("name").get<std::string>();
    d.kind = layer_kind_from_name(jl.at("kind").get<std::string>());
    d.in_channels = detail::int_field(jl, "C", where);
    d.out_channels = detail::int_field(jl, "K", where);
    d.out_h = detail::int_field(jl, "OH", where);
    d.out_w = detail::int_field(jl, "OW", where);
    d.kernel_h = detail::int_field(jl, "KH", where);
    d.kernel_w = detail::int_field(jl, "KW", where);
    d.stride = detail::int_field(jl, "stride", where);
    if (!jl.at("has_bias").is_boolean()) throw ParseError(where + ": 'has_bias' must be a boolean");
    d.has_bias = jl.at("has_bias").get<bool>();

    if (d.id != expect_id)
      throw ValidationError("layer ids must be 0..L-1 without gaps; got " + std::to_string(d.id) +
                            " where " + std::to_string(expect_id) + " was expected");
    for (auto [v, n] : {std::pair<std::int64_t, const char*>{d.in_channels, "C"},
                        {d.out_channels, "K"},
                        {d.out_h, "OH"},
                        {d.out_w, "OW"},
                        {d.kernel_h, "KH"},
                        {d.kernel_w, "KW"},
                        {d.stride, "stride"}}) {
      if (v < 1)
        throw ValidationError("layer " + std::to_string(d.id) + ": field " + n + " must be >= 1");
    }

    if (jl.contains("param_count")) {
      d.param_count = detail::int_field(jl, "param_count", where);
      if (d.param_count != d.derived_param_count())
        throw ValidationError("layer " + std::to_string(d.id) + " (" + d.name +
                              "): param_count " + std::to_string(d.param_count) +
                              " contradicts shapes (expected " +
                              std::to_string(d.derived_param_count()) + ")");
    } else {
      d.param_count = d.derived_param_count();
    }

    if (jl.contains("fwd_flops_per_sample")) {
      const auto& v = jl.at("fwd_flops_per_sample");
      if (!v.is_number()) throw ParseError(where + ": 'fwd_flops_per_sample' must be a number");
      d.fwd_flops_per_sample = v.get<double>();
      if (d.kind != LayerKind::NonParam) {
        const double want = d.derived_fwd_flops();
        if (std::abs(d.fwd_flops_per_sample - want) > 1e-3 * want)
          throw ValidationError("layer " + std::to_string(d.id) + " (" + d.name +
                                "): fwd_flops_per_sample contradicts shapes");
      }
      if (!(d.fwd_flops_per_sample >= 0.0) || !std::isfinite(d.fwd_flops_per_sample))
        throw ValidationError("layer " + std::to_string(d.id) + ": fwd_flops_per_sample must be finite and >= 0");
    } else {
      d.fwd_flops_per_sample = d.derived_fwd_flops();
    }

    any_param = any_param || d.parameterized();
    p.layers.push_back(std::move(d));
    ++expect_id;
  }
  if (p.layers.empty()) throw ValidationError("profile has no layers");
  if (!any_param) throw ValidationError("profile has no parameterized layer");
  return p;
}

inline ModelProfile parse_profile(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("profile JSON parse failed: ") + e.what());
  }
  return parse_profile(root);
}

inline ModelProfile load_profile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open profile file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_profile(ss.str());
}

inline nlohmann::json profile_to_json(const ModelProfile& p) {
  nlohmann::json root;
  root["name"] = p.name;
  root["default_minibatch"] = p.default_minibatch;
  root["layers"] = nlohmann::json::array();
  for (const auto& d : p.layers) {
    nlohmann::json jl;
    jl["id"] = d.id;
    jl["name"] = d.name;
    jl["kind"] = layer_kind_name(d.kind);
    jl["C"] = d.in_channels;
    jl["K"] = d.out_channels;
    jl["OH"] = d.out_h;
    jl["OW"] = d.out_w;
    jl["KH"] = d.kernel_h;
    jl["KW"] = d.kernel_w;
    jl["stride"] = d.stride;
    jl["has_bias"] = d.has_bias;
    jl["param_count"] = d.param_count;
    jl["fwd_flops_per_sample"] = d.fwd_flops_per_sample;
    root["layers"].push_back(std::move(jl));
  }
  return root;
}

inline void save_profile(const ModelProfile& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write profile file '" + path + "'");
  out << profile_to_json(p).dump(1) << "\n";
}

inline std::int64_t total_params(const ModelProfile& p) {
  std::int64_t total = 0;
  for (const auto& d : p.layers) total += d.param_count;
  return total;
}

}  // namespace gsync

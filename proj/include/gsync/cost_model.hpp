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

#include <algorithm>
#include <cstdio>
#include <limits>
#include <optional>
#include <vector>

#include <json.hpp>

#include "gsync/errors.hpp"
#include "gsync/model_profile.hpp"
#include "gsync/precision.hpp"

namespace gsync {

/// Cluster description for the analytical model and the simulator: an
/// alpha-beta network (per-message latency, link bandwidth), a per-node
/// compute rate, and the overlap-effectiveness knob eta.
struct ClusterConfig {
  int node_count = 1;          // P
  double alpha = 0.0;          // seconds per message
  double beta = 1.25e9;        // bytes per second
  double gamma = 3e12;         // flops per second per node
  double eta = 0.9;            // fraction of overlappable compute that hides comm
  Precision wire_precision = Precision::FP32;

  void validate() const {
    if (node_count < 1) throw ConfigError("node_count must be >= 1");
    if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
    if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
    if (!(gamma > 0.0)) throw ConfigError("gamma must be > 0");
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must be in [0,1]");
  }
};

/// Per-layer parallelization choice: model-group size g. g=1 is pure data
/// parallelism, g=P pure model parallelism; data parallelism runs across the
/// D = P/g groups.
struct StrategyChoice {
  int group_size = 1;
};

struct LayerPlanEntry {
  int layer_id = 0;
  int group_size = 1;
  double est_compute_s = 0.0;
  double est_comm_s = 0.0;
  double est_exposed_s = 0.0;
};

struct ParallelismPlan {
  std::vector<LayerPlanEntry> layers;  // one entry per parameterized layer, id ascending
  double total_s = 0.0;

  const LayerPlanEntry* find(int layer_id) const {
    for (const auto& e : layers)
      if (e.layer_id == layer_id) return &e;
    return nullptr;
  }
};

inline void check_group(int g, int world) {
  if (g < 1 || world % g != 0)
    throw InvalidGroupError("group size " + std::to_string(g) + " does not divide world size " +
                            std::to_string(world));
}

/// Forward + backward flops for one layer at a given per-node minibatch.
/// Parameterized layers run one forward and two backward passes (data
/// gradient and weight gradient); NonParam layers are forward-only here.
inline double layer_flops(const LayerDescriptor& layer, int minibatch) {
  const double fwd = static_cast<double>(minibatch) * layer.fwd_flops_per_sample;
  return layer.parameterized() ? 3.0 * fwd : fwd;
}

struct CommVolume {
  double wgrad_bytes = 0.0;       // per node, ring-allreduce wire traffic
  double activation_bytes = 0.0;  // per node, allgather + reduce-scatter traffic
  double total() const { return wgrad_bytes + activation_bytes; }
};

/// Per-node wire bytes for one layer under a strategy choice. Weight
/// gradients travel across the D data peers (ring allreduce of the local
/// parameter shard); activations travel within the model group (allgather
/// forward, reduce-scatter backward).
inline CommVolume comm_volume(const LayerDescriptor& layer, StrategyChoice choice,
                              const ClusterConfig& cluster, int minibatch) {
  check_group(choice.group_size, cluster.node_count);
  CommVolume v;
  if (!layer.parameterized()) return v;
  const double e = static_cast<double>(bytes_per_element(cluster.wire_precision));
  const int g = choice.group_size;
  const int d = cluster.node_count / g;
  if (d > 1) {
    const double shard_bytes = static_cast<double>(layer.param_count) / g * e;
    v.wgrad_bytes = 2.0 * (d - 1) / d * shard_bytes;
  }
  if (g > 1) {
    const double act_bytes =
        static_cast<double>(minibatch) * static_cast<double>(layer.activation_elems_per_sample()) * e;
    v.activation_bytes = 2.0 * (g - 1) / g * act_bytes;
  }
  return v;
}

/// Compute-to-communication ratio; +infinity when the layer communicates
/// nothing under the given choice (e.g. P=1).
inline double compute_comm_ratio(const LayerDescriptor& layer, StrategyChoice choice,
                                 const ClusterConfig& cluster, int minibatch) {
  const CommVolume v = comm_volume(layer, choice, cluster, minibatch);
  if (v.total() <= 0.0) return std::numeric_limits<double>::infinity();
  return layer_flops(layer, minibatch) / v.total();
}

enum class CollectiveTimeKind { Allreduce, Allgather, ReduceScatter };

/// Ring-model completion time: allreduce costs 2(n-1) steps, allgather and
/// reduce-scatter n-1, each step alpha + (nbytes/n)/beta.
inline double estimate_collective_time(CollectiveTimeKind kind, double nbytes, int group_size,
                                       const ClusterConfig& cluster) {
  if (group_size <= 1) return 0.0;
  const double per_step = cluster.alpha + (nbytes / group_size) / cluster.beta;
  const int steps = (kind == CollectiveTimeKind::Allreduce) ? 2 * (group_size - 1) : group_size - 1;
  return steps * per_step;
}

namespace detail {

inline double fwd_time(const LayerDescriptor& l, int g, const ClusterConfig& c, int mb) {
  const double flops = static_cast<double>(mb) * l.fwd_flops_per_sample;
  return flops / (c.gamma * (l.parameterized() ? g : 1));
}

inline double bwd_time(const LayerDescriptor& l, int g, const ClusterConfig& c, int mb) {
  if (!l.parameterized()) return 0.0;
  return 2.0 * static_cast<double>(mb) * l.fwd_flops_per_sample / (c.gamma * g);
}

inline double wgrad_time(const LayerDescriptor& l, int g, const ClusterConfig& c) {
  const int d = c.node_count / g;
  if (d <= 1 || !l.parameterized()) return 0.0;
  const double shard_bytes =
      static_cast<double>(l.param_count) / g * bytes_per_element(c.wire_precision);
  return estimate_collective_time(CollectiveTimeKind::Allreduce, shard_bytes, d, c);
}

inline double activation_time(const LayerDescriptor& l, int g, const ClusterConfig& c, int mb) {
  if (g <= 1 || !l.parameterized()) return 0.0;
  const double act_bytes = static_cast<double>(mb) *
                           static_cast<double>(l.activation_elems_per_sample()) *
                           bytes_per_element(c.wire_precision);
  return 2.0 * estimate_collective_time(CollectiveTimeKind::Allgather, act_bytes, g, c);
}

}  // namespace detail

/// Analytical iteration estimate for a given plan. The weight-gradient
/// exchange of layer l overlaps eta * (backward compute of layers l-1..0 +
/// forward compute of layers 0..l-1 of the next iteration); activation
/// communication is never overlapped since it blocks the next layer.
inline ParallelismPlan estimate_iteration_time(const ModelProfile& profile,
                                               const ParallelismPlan& plan,
                                               const ClusterConfig& cluster, int minibatch) {
  cluster.validate();
  ParallelismPlan out;
  double compute_total = 0.0;
  double exposed_total = 0.0;
  double window = 0.0;  // running sum of bwd+fwd compute of layers below l
  for (const auto& layer : profile.layers) {
    int g = 1;
    if (layer.parameterized()) {
      const LayerPlanEntry* e = plan.find(layer.id);
      if (e == nullptr)
        throw PlanMismatchError("plan has no entry for parameterized layer " +
                                std::to_string(layer.id));
      g = e->group_size;
      check_group(g, cluster.node_count);
    }
    const double fwd = detail::fwd_time(layer, g, cluster, minibatch);
    const double bwd = detail::bwd_time(layer, g, cluster, minibatch);
    compute_total += fwd + bwd;
    if (layer.parameterized()) {
      const double wg = detail::wgrad_time(layer, g, cluster);
      const double act = detail::activation_time(layer, g, cluster, minibatch);
      const double exposed = std::max(0.0, wg - cluster.eta * window) + act;
      exposed_total += exposed;
      out.layers.push_back({layer.id, g, fwd + bwd, wg + act, exposed});
    }
    window += fwd + bwd;
  }
  out.total_s = compute_total + exposed_total;
  return out;
}

/// Chooses a group size per parameterized layer by exhaustive minimization of
/// that layer's compute + exposed communication. Overlap windows are taken
/// from the g=1 compute timeline so per-layer choices stay independent.
/// Candidates that do not divide the layer's K and param_count are skipped;
/// ties break toward smaller g.
inline ParallelismPlan select_plan(const ModelProfile& profile, const ClusterConfig& cluster,
                                   int minibatch, std::vector<int> candidates) {
  cluster.validate();
  if (candidates.empty()) throw InvalidGroupError("candidate group-size set is empty");
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  for (int g : candidates) check_group(g, cluster.node_count);

  ParallelismPlan chosen;
  double window = 0.0;
  for (const auto& layer : profile.layers) {
    if (layer.parameterized()) {
      double best_cost = std::numeric_limits<double>::infinity();
      int best_g = 0;
      for (int g : candidates) {
        if (g != 1 && (layer.out_channels % g != 0 || layer.param_count % g != 0)) continue;
        const double compute = detail::fwd_time(layer, g, cluster, minibatch) +
                               detail::bwd_time(layer, g, cluster, minibatch);
        const double exposed =
            std::max(0.0, detail::wgrad_time(layer, g, cluster) - cluster.eta * window) +
            detail::activation_time(layer, g, cluster, minibatch);
        const double cost = compute + exposed;
        if (cost < best_cost) {
          best_cost = cost;
          best_g = g;
        }
      }
      if (best_g == 0)
        throw IndivisibleShardError("layer " + std::to_string(layer.id) + " (" + layer.name +
                                    "): no candidate group size divides K=" +
                                    std::to_string(layer.out_channels) + " and param_count=" +
                                    std::to_string(layer.param_count));
      chosen.layers.push_back({layer.id, best_g, 0.0, 0.0, 0.0});
    }
    window += detail::fwd_time(layer, 1, cluster, minibatch) +
              detail::bwd_time(layer, 1, cluster, minibatch);
  }
  return estimate_iteration_time(profile, chosen, cluster, minibatch);
}

inline ParallelismPlan data_parallel_plan(const ModelProfile& profile, const ClusterConfig& cluster,
                                          int minibatch) {
  ParallelismPlan p;
  for (const auto& layer : profile.layers)
    if (layer.parameterized()) p.layers.push_back({layer.id, 1, 0.0, 0.0, 0.0});
  return estimate_iteration_time(profile, p, cluster, minibatch);
}

struct SweepRow {
  int world = 1;
  double iter_time_s = 0.0;
  double efficiency = 1.0;
};

inline std::vector<int> divisors_of(int n) {
  std::vector<int> out;
  for (int d = 1; d <= n; ++d)
    if (n % d == 0) out.push_back(d);
  return out;
}

/// Weak-scaling sweep under the analytical model: fixed per-node minibatch,
/// efficiency(P) = T(1)/T(P).
inline std::vector<SweepRow> scaling_sweep(const ModelProfile& profile,
                                           const ClusterConfig& cluster_template, int minibatch,
                                           const std::vector<int>& worlds,
                                           bool use_planner = false) {
  auto time_at = [&](int world) {
    ClusterConfig c = cluster_template;
    c.node_count = world;
    const ParallelismPlan plan = use_planner
                                     ? select_plan(profile, c, minibatch, divisors_of(world))
                                     : data_parallel_plan(profile, c, minibatch);
    return plan.total_s;
  };
  const double t1 = time_at(1);
  std::vector<SweepRow> rows;
  for (int world : worlds) {
    const double t = time_at(world);
    rows.push_back({world, t, t1 / t});
  }
  return rows;
}

// --- exports ---------------------------------------------------------------

inline std::string format_seconds(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9e", v);
  return buf;
}

inline nlohmann::json plan_to_json(const ParallelismPlan& plan) {
  nlohmann::json root;
  root["layers"] = nlohmann::json::array();
  for (const auto& e : plan.layers) {
    root["layers"].push_back({{"id", e.layer_id},
                              {"group_size", e.group_size},
                              {"est_compute_s", e.est_compute_s},
                              {"est_comm_s", e.est_comm_s},
                              {"est_exposed_s", e.est_exposed_s}});
  }
  root["total_s"] = plan.total_s;
  return root;
}

inline ParallelismPlan plan_from_json(const nlohmann::json& root) {
  ParallelismPlan plan;
  for (const auto& jl : root.at("layers")) {
    LayerPlanEntry e;
    e.layer_id = jl.at("id").get<int>();
    e.group_size = jl.at("group_size").get<int>();
    if (jl.contains("est_compute_s")) e.est_compute_s = jl.at("est_compute_s").get<double>();
    if (jl.contains("est_comm_s")) e.est_comm_s = jl.at("est_comm_s").get<double>();
    if (jl.contains("est_exposed_s")) e.est_exposed_s = jl.at("est_exposed_s").get<double>();
    plan.layers.push_back(e);
  }
  if (root.contains("total_s")) plan.total_s = root.at("total_s").get<double>();
  return plan;
}

inline std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::string out = "P,iter_time_s,efficiency\n";
  for (const auto& r : rows) {
    out += std::to_string(r.world);
    out += ',';
    out += format_seconds(r.iter_time_s);
    out += ',';
    out += format_seconds(r.efficiency);
    out += '\n';
  }
  return out;
}

}  // namespace gsync

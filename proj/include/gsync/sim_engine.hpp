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

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gsync/cost_model.hpp"
#include "gsync/layer_api.hpp"
#include "gsync/model_profile.hpp"
#include "gsync/sim.hpp"

namespace gsync {

struct SimRunOptions {
  bool prioritization = true;
  bool quantization = false;  // true forces an INT8 wire
  std::size_t chunk_bytes = 65536;
  bool record_trace = false;
  bool carry_payloads = false;  // only sensible at small scale
};

struct LayerMetricsRow {
  int layer_id = 0;
  double exposed_comm_s = 0.0;
  double comm_s = 0.0;
  double compute_s = 0.0;
};

/// Steady-state per-iteration metrics (first iteration excluded; with three
/// or more iterations the final one, whose trailing exchanges drain without a
/// following forward pass, is excluded as well).
struct SimMetrics {
  std::vector<LayerMetricsRow> per_layer;  // one row per layer, id ascending
  double iteration_s = 0.0;
  double total_exposed_s = 0.0;
  double total_comm_s = 0.0;
  double total_compute_s = 0.0;
  double link_utilization = 0.0;
  double makespan_s = 0.0;
  std::uint64_t total_wire_bytes = 0;  // whole run including drain
  int iterations = 0;
  int world = 1;
  double max_quant_abs = 0.0;
  std::string trace_csv;  // filled when options.record_trace

  std::string to_csv() const {
    std::string out = "layer_id,exposed_comm_s,comm_s,compute_s\n";
    char buf[160];
    for (const auto& r : per_layer) {
      std::snprintf(buf, sizeof buf, "%d,%.9e,%.9e,%.9e\n", r.layer_id, r.exposed_comm_s, r.comm_s,
                    r.compute_s);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "total,%.9e,%.9e,%.9e\n", total_exposed_s, total_comm_s,
                  total_compute_s);
    out += buf;
    return out;
  }
};

namespace detail {

// Iteration driver: per-rank straight-line program over the layer sessions.
// Forward waits on the previous iteration's weight gradients right before
// using each layer (from iteration 2 on); backward issues weight-gradient
// allreduces as soon as each layer's backward compute finishes; activation
// collectives run inline where g > 1.
struct SimProgramOp {
  enum Kind {
    IterMark,
    Compute,
    WgradWait,
    ActAllgather,
    InputGradScatter,
    WgradSubmit,
    DrainWait
  } kind = Compute;
  int layer = -1;
  int iteration = 0;
  double seconds = 0.0;
};

inline std::vector<SimProgramOp> build_program(const ModelProfile& profile,
                                               const ParallelismPlan& plan,
                                               const ClusterConfig& cluster, int minibatch,
                                               int iterations) {
  std::vector<SimProgramOp> ops;
  const int L = static_cast<int>(profile.layers.size());
  auto group_of = [&](const LayerDescriptor& l) {
    const LayerPlanEntry* e = plan.find(l.id);
    return (l.parameterized() && e != nullptr) ? e->group_size : 1;
  };
  for (int it = 1; it <= iterations; ++it) {
    ops.push_back({SimProgramOp::IterMark, -1, it, 0.0});
    for (int l = 0; l < L; ++l) {
      const LayerDescriptor& layer = profile.layers[l];
      const int g = group_of(layer);
      const int d = cluster.node_count / g;
      if (it >= 2 && layer.parameterized() && d > 1)
        ops.push_back({SimProgramOp::WgradWait, l, it, 0.0});
      if (layer.parameterized() && g > 1)
        ops.push_back({SimProgramOp::ActAllgather, l, it, 0.0});
      ops.push_back({SimProgramOp::Compute, l, it, detail::fwd_time(layer, g, cluster, minibatch)});
    }
    for (int l = L - 1; l >= 0; --l) {
      const LayerDescriptor& layer = profile.layers[l];
      const int g = group_of(layer);
      const int d = cluster.node_count / g;
      const double bwd = detail::bwd_time(layer, g, cluster, minibatch);
      if (bwd > 0.0) ops.push_back({SimProgramOp::Compute, l, it, bwd});
      if (layer.parameterized() && g > 1)
        ops.push_back({SimProgramOp::InputGradScatter, l, it, 0.0});
      if (layer.parameterized() && d > 1) ops.push_back({SimProgramOp::WgradSubmit, l, it, 0.0});
    }
  }
  for (int l = 0; l < L; ++l) {
    const LayerDescriptor& layer = profile.layers[l];
    if (layer.parameterized() && cluster.node_count / group_of(layer) > 1)
      ops.push_back({SimProgramOp::DrainWait, l, iterations, 0.0});
  }
  return ops;
}

struct StallRecord {
  int layer = 0;
  int iteration = 0;
  double seconds = 0.0;
};

struct RankDriver {
  std::vector<SimProgramOp> ops;
  std::size_t pc = 0;
  std::map<int, std::unique_ptr<LayerSession>> sessions;  // by layer id
  std::map<int, Handle> wgrad_handles;
  int wait_layer = -1;
  int wait_iteration = 0;
};

}  // namespace detail

/// Runs the iteration driver over the simulated network and reduces the event
/// timeline to per-layer steady-state metrics.
inline SimMetrics sim_run(const ModelProfile& profile, const ParallelismPlan& plan,
                          const ClusterConfig& cluster, int minibatch, int iterations,
                          std::uint64_t seed, const SimRunOptions& options) {
  (void)seed;  // runs are deterministic; payload-carrying tests seed their own buffers
  cluster.validate();
  if (iterations < 2) throw ConfigError("iterations must be >= 2 (iteration 1 has no overlap window)");
  if (minibatch < 1) throw ConfigError("minibatch must be >= 1");
  for (const auto& layer : profile.layers) {
    if (layer.parameterized() && plan.find(layer.id) == nullptr)
      throw PlanMismatchError("plan has no entry for layer " + std::to_string(layer.id));
  }

  const Precision wire = options.quantization ? Precision::INT8 : cluster.wire_precision;
  SimConfig sim_cfg;
  sim_cfg.world = cluster.node_count;
  sim_cfg.alpha = cluster.alpha;
  sim_cfg.beta = cluster.beta;
  sim_cfg.eta = cluster.eta;
  sim_cfg.chunk_bytes = options.chunk_bytes;
  sim_cfg.prioritization = options.prioritization;
  sim_cfg.carry_payloads = options.carry_payloads;
  sim_cfg.record_trace = options.record_trace;
  SimWorld world(sim_cfg);

  const int P = cluster.node_count;
  const int L = static_cast<int>(profile.layers.size());
  std::vector<detail::RankDriver> drivers(P);
  std::vector<std::vector<detail::StallRecord>> stalls(P);
  std::vector<double> iter_marks;  // rank 0's iteration start times

  for (int r = 0; r < P; ++r) {
    detail::RankDriver& drv = drivers[r];
    drv.ops = detail::build_program(profile, plan, cluster, minibatch, iterations);
    for (const auto& layer : profile.layers) {
      if (!layer.parameterized()) continue;
      const LayerPlanEntry* e = plan.find(layer.id);
      Distribution dist = Distribution::build(P, e->group_size, r);
      auto session = std::make_unique<LayerSession>(layer, dist, world.rank(r), minibatch, wire);
      drv.sessions.emplace(layer.id, std::move(session));
    }
    world.set_wait_observer(r, [&stalls, &drivers](int rank, double dur) {
      detail::RankDriver& d = drivers[rank];
      stalls[rank].push_back({d.wait_layer, d.wait_iteration, dur});
    });
  }

  // user_key encodes (iteration, layer) so metrics can window by iteration.
  auto encode_key = [L](int iteration, int layer) { return iteration * (L + 1) + layer; };

  std::vector<SimWorld::Agent> agents;
  for (int r = 0; r < P; ++r) {
    agents.push_back([r, &drivers, &world, &iter_marks, encode_key]() -> SimWorld::Action {
      detail::RankDriver& drv = drivers[r];
      while (drv.pc < drv.ops.size()) {
        const detail::SimProgramOp& op = drv.ops[drv.pc++];
        switch (op.kind) {
          case detail::SimProgramOp::IterMark:
            if (r == 0) iter_marks.push_back(world.now());
            break;
          case detail::SimProgramOp::Compute:
            return SimWorld::Action::compute(op.seconds);
          case detail::SimProgramOp::WgradSubmit: {
            LayerSession& s = *drv.sessions.at(op.layer);
            s.user_key = encode_key(op.iteration, op.layer);
            s.backward_wgrad_begin({});
            drv.wgrad_handles[op.layer] = s.take_wgrad_handle();
            break;
          }
          case detail::SimProgramOp::WgradWait:
          case detail::SimProgramOp::DrainWait: {
            const Handle h = drv.wgrad_handles[op.layer];
            if (!h.valid()) break;
            drv.wgrad_handles[op.layer] = Handle{};
            drv.wait_layer = op.layer;
            drv.wait_iteration = op.iteration;
            return SimWorld::Action::wait_for(h);
          }
          case detail::SimProgramOp::ActAllgather: {
            LayerSession& s = *drv.sessions.at(op.layer);
            s.user_key = encode_key(op.iteration, op.layer);
            const Handle h = s.forward_activations_begin({}, {});
            s.take_activation_handle();
            if (!h.valid()) break;
            drv.wait_layer = op.layer;
            drv.wait_iteration = op.iteration;
            return SimWorld::Action::wait_for(h);
          }
          case detail::SimProgramOp::InputGradScatter: {
            LayerSession& s = *drv.sessions.at(op.layer);
            s.user_key = encode_key(op.iteration, op.layer);
            const Handle h = s.backward_inputgrad_begin({});
            s.take_activation_handle();
            if (!h.valid()) break;
            drv.wait_layer = op.layer;
            drv.wait_iteration = op.iteration;
            return SimWorld::Action::wait_for(h);
          }
        }
      }
      return SimWorld::Action::finished();
    });
  }

  world.run_agents(std::move(agents));
  world.run_until_idle();

  // --- reduce to metrics ---
  SimMetrics m;
  m.iterations = iterations;
  m.world = P;
  m.makespan_s = world.now();
  m.total_wire_bytes = world.total_payload_bytes();
  m.max_quant_abs = world.max_quant_abs();
  if (m.makespan_s > 0.0)
    m.link_utilization = world.total_link_busy_s() / (P * m.makespan_s);

  const int steady_lo = 2;
  const int steady_hi = iterations >= 3 ? iterations - 1 : 2;  // inclusive
  const int steady_count = steady_hi - steady_lo + 1;
  if (iterations >= 3) {
    m.iteration_s = (iter_marks.at(iterations - 1) - iter_marks.at(1)) / (iterations - 2);
  } else {
    m.iteration_s = m.makespan_s - iter_marks.at(1);
  }

  std::vector<LayerMetricsRow> rows(L);
  for (int l = 0; l < L; ++l) {
    const LayerDescriptor& layer = profile.layers[l];
    const LayerPlanEntry* e = plan.find(layer.id);
    const int g = (layer.parameterized() && e != nullptr) ? e->group_size : 1;
    rows[l].layer_id = l;
    rows[l].compute_s = detail::fwd_time(layer, g, cluster, minibatch) +
                        detail::bwd_time(layer, g, cluster, minibatch);
  }
  for (int r = 0; r < P; ++r) {
    for (const auto& st : stalls[r]) {
      if (st.iteration >= steady_lo && st.iteration <= steady_hi)
        rows[st.layer].exposed_comm_s += st.seconds;
    }
  }
  for (const auto& info : world.request_infos()) {
    if (info.user_key < 0) continue;
    const int iteration = info.user_key / (L + 1);
    const int layer = info.user_key % (L + 1);
    if (iteration >= steady_lo && iteration <= steady_hi) rows[layer].comm_s += info.occupancy_s;
  }
  for (auto& row : rows) {
    row.exposed_comm_s /= static_cast<double>(steady_count) * P;
    row.comm_s /= static_cast<double>(steady_count) * P;
    m.total_exposed_s += row.exposed_comm_s;
    m.total_comm_s += row.comm_s;
    m.total_compute_s += row.compute_s;
  }
  m.per_layer = std::move(rows);
  if (sim_cfg.record_trace) m.trace_csv = trace_to_csv(world.trace_rows());
  return m;
}

/// Weak-scaling sweep in the simulator: fixed per-node minibatch, data
/// parallel by default; efficiency(P) = T(1)/T(P) over steady iteration time.
inline std::vector<SweepRow> sim_sweep(const ModelProfile& profile,
                                       const ClusterConfig& cluster_template, int minibatch,
                                       const std::vector<int>& worlds, int iterations,
                                       std::uint64_t seed, const SimRunOptions& options,
                                       bool use_planner = false) {
  auto run_at = [&](int world) {
    ClusterConfig c = cluster_template;
    c.node_count = world;
    const ParallelismPlan plan = use_planner
                                     ? select_plan(profile, c, minibatch, divisors_of(world))
                                     : data_parallel_plan(profile, c, minibatch);
    return sim_run(profile, plan, c, minibatch, iterations, seed, options).iteration_s;
  };
  const double t1 = run_at(1);
  std::vector<SweepRow> rows;
  for (int world : worlds) {
    const double t = run_at(world);
    rows.push_back({world, t, t1 / t});
  }
  return rows;
}

}  // namespace gsync

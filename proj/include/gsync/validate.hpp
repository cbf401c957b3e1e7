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

#include <functional>
#include <random>
#include <sstream>
#include <thread>

#include "gsync/cost_model.hpp"
#include "gsync/layer_api.hpp"
#include "gsync/sim.hpp"
#include "gsync/socket_backend.hpp"

namespace gsync {

struct SuiteResult {
  std::string name;
  bool passed = true;
  std::string detail;
};

namespace validate_detail {

inline std::vector<std::vector<float>> rand_inputs(int ranks, std::size_t n, std::uint64_t seed) {
  std::vector<std::vector<float>> out;
  for (int r = 0; r < ranks; ++r) {
    std::mt19937_64 rng(seed * 1000003 + r);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = dist(rng);
    out.push_back(std::move(v));
  }
  return out;
}

inline double rel_err(const std::vector<float>& got, const std::vector<float>& want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max(1.0, std::fabs(static_cast<double>(want[i])));
    worst = std::max(worst, std::fabs(static_cast<double>(got[i]) - want[i]) / denom);
  }
  return worst;
}

inline CommGroup everyone(int n, int me) {
  CommGroup g;
  for (int r = 0; r < n; ++r) g.ranks.push_back(r);
  g.my_index = me;
  return g;
}

/// Chunked ring allreduce through the simulated backend, payloads on.
inline std::vector<std::vector<float>> sim_allreduce(std::vector<std::vector<float>> bufs,
                                                     std::size_t chunk_bytes,
                                                     std::int64_t fault_chunk = -1) {
  SimConfig cfg;
  cfg.world = static_cast<int>(bufs.size());
  cfg.alpha = 1e-6;
  cfg.beta = 1e9;
  cfg.chunk_bytes = chunk_bytes;
  cfg.carry_payloads = true;
  cfg.fault_chunk = fault_chunk;
  SimWorld world(cfg);
  for (int r = 0; r < cfg.world; ++r) {
    CollectiveDesc d;
    d.group = everyone(cfg.world, r);
    d.elem_count = bufs[r].size();
    d.buffer = bufs[r].data();
    world.rank(r).submit(d);
  }
  world.run_until_idle();
  return bufs;
}

inline SuiteResult collectives_suite(std::int64_t fault_chunk) {
  SuiteResult res{"collectives", true, ""};
  for (int n : {1, 2, 3, 4, 5, 8}) {
    for (std::size_t len : {std::size_t(1), std::size_t(7), std::size_t(64), std::size_t(1000)}) {
      auto inputs = rand_inputs(n, len, 7 + n * 100 + len);
      const auto want = allreduce_oracle(inputs, ReduceOp::Sum);
      auto by_exec = inputs;
      run_collective_inprocess(CollectiveKind::Allreduce, ReduceOp::Sum, Precision::FP32, 64,
                               by_exec);
      auto by_sim = sim_allreduce(inputs, 64, fault_chunk);
      for (int r = 0; r < n; ++r) {
        if (rel_err(by_exec[r], want) > 1e-6) {
          return {"collectives", false,
                  "in-process ring mismatch at n=" + std::to_string(n) + " len=" + std::to_string(len)};
        }
        if (rel_err(by_sim[r], want) > 1e-6) {
          return {"collectives", false,
                  "simulated ring mismatch at n=" + std::to_string(n) + " len=" + std::to_string(len)};
        }
      }
    }
  }
  // chunk-size independence, bitwise
  auto base = rand_inputs(4, 501, 99);
  auto a = base, b = base;
  run_collective_inprocess(CollectiveKind::Allreduce, ReduceOp::Sum, Precision::FP32, 1024, a);
  run_collective_inprocess(CollectiveKind::Allreduce, ReduceOp::Sum, Precision::FP32, 501 * 4, b);
  for (int r = 0; r < 4; ++r) {
    if (std::memcmp(a[r].data(), b[r].data(), 501 * 4) != 0)
      return {"collectives", false, "chunk size changed FP32 results"};
  }
  // int8 error bound
  auto q = rand_inputs(4, 256, 123);
  const auto want = allreduce_oracle(q, ReduceOp::Sum);
  const double r_max =
      run_collective_inprocess(CollectiveKind::Allreduce, ReduceOp::Sum, Precision::INT8, 128, q);
  for (int r = 0; r < 4; ++r) {
    double worst = 0.0;
    for (std::size_t i = 0; i < want.size(); ++i)
      worst = std::max(worst, std::fabs(static_cast<double>(q[r][i]) - want[i]));
    if (worst > 4.0 * r_max / 127.0)
      return {"collectives", false, "int8 allreduce exceeded the n*R/127 bound"};
  }
  res.detail = "ring-vs-oracle grid, chunk independence, int8 bound";
  return res;
}

inline SuiteResult scheduler_suite() {
  // Preemption equivalence: contended vs solo results must match bitwise.
  auto bulk = rand_inputs(3, 1500, 5);
  auto solo = bulk;
  {
    SimConfig cfg;
    cfg.world = 3;
    cfg.beta = 1e9;
    cfg.chunk_bytes = 128;
    cfg.carry_payloads = true;
    SimWorld world(cfg);
    for (int r = 0; r < 3; ++r) {
      CollectiveDesc d;
      d.group = everyone(3, r);
      d.elem_count = solo[r].size();
      d.buffer = solo[r].data();
      d.priority = {PriorityClassKind::Bulk, 0};
      world.rank(r).submit(d);
    }
    world.run_until_idle();
  }
  SimConfig cfg;
  cfg.world = 3;
  cfg.beta = 1e9;
  cfg.chunk_bytes = 128;
  cfg.carry_payloads = true;
  cfg.record_trace = true;
  SimWorld world(cfg);
  auto contended = bulk;
  std::vector<Handle> hb;
  for (int r = 0; r < 3; ++r) {
    CollectiveDesc d;
    d.group = everyone(3, r);
    d.elem_count = contended[r].size();
    d.buffer = contended[r].data();
    d.priority = {PriorityClassKind::Bulk, 0};
    hb.push_back(world.rank(r).submit(d));
  }
  for (int i = 0; i < 8; ++i) world.progress_step();
  auto act = rand_inputs(3, 64, 6);
  const double chunk_time = cfg.alpha + 128.0 / cfg.beta;
  const double t_submit = world.now();
  std::vector<Handle> ha;
  for (int r = 0; r < 3; ++r) {
    CollectiveDesc d;
    d.group = everyone(3, r);
    d.elem_count = act[r].size();
    d.buffer = act[r].data();
    d.priority = {PriorityClassKind::Activation, 0};
    ha.push_back(world.rank(r).submit(d));
  }
  world.run_until_idle();
  for (int r = 0; r < 3; ++r) {
    if (std::memcmp(contended[r].data(), solo[r].data(), solo[r].size() * 4) != 0)
      return {"scheduler", false, "preempted result differs from uninterrupted run"};
  }
  // first activation departure within one chunk time of submission
  double first_depart = -1.0;
  for (const auto& row : world.trace_rows()) {
    if (row.event == TraceEvent::Depart &&
        (row.request_id == ha[0].id || row.request_id == ha[1].id || row.request_id == ha[2].id)) {
      first_depart = row.time_s;
      break;
    }
  }
  if (first_depart < 0.0 || first_depart - t_submit > chunk_time * (1.0 + 1e-9))
    return {"scheduler", false, "higher-priority request waited longer than one chunk"};
  return {"scheduler", true, "preemption equivalence and bounded takeover latency"};
}

inline SuiteResult layer_api_suite() {
  const Distribution d = Distribution::build(8, 2, 5);
  if (d.model_group.ranks != std::vector<int>{4, 5} ||
      d.data_peers.ranks != std::vector<int>{1, 3, 5, 7})
    return {"layer-api", false, "distribution index arithmetic broken"};

  // Hybrid consistency at P=4: sharded allreduce equals full allreduce.
  LayerDescriptor fc;
  fc.kind = LayerKind::FullyConnected;
  fc.in_channels = 8;
  fc.out_channels = 8;
  fc.param_count = 64;
  fc.fwd_flops_per_sample = 128;
  const auto inputs = rand_inputs(4, 64, 31);
  auto reference = inputs;
  {
    SimConfig cfg;
    cfg.world = 4;
    cfg.beta = 1e9;
    cfg.carry_payloads = true;
    SimWorld world(cfg);
    std::vector<LayerSession> sessions;
    for (int r = 0; r < 4; ++r)
      sessions.emplace_back(fc, Distribution::build(4, 1, r), world.rank(r), 1);
    for (int r = 0; r < 4; ++r) sessions[r].backward_wgrad_begin(reference[r]);
    for (int r = 0; r < 4; ++r)
      if (!sessions[r].wgrad_wait().ok()) return {"layer-api", false, "g=1 wgrad failed"};
  }
  for (int g : {2, 4}) {
    SimConfig cfg;
    cfg.world = 4;
    cfg.beta = 1e9;
    cfg.carry_payloads = true;
    SimWorld world(cfg);
    const std::size_t shard = 64 / g;
    std::vector<LayerSession> sessions;
    std::vector<std::vector<float>> shards(4);
    for (int r = 0; r < 4; ++r) {
      const Distribution dist = Distribution::build(4, g, r);
      const std::size_t off = dist.model_group.my_index * shard;
      std::vector<float> acc(shard, 0.0f);
      for (int peer : dist.model_group.ranks)
        for (std::size_t i = 0; i < shard; ++i) acc[i] += inputs[peer][off + i];
      shards[r] = acc;
      sessions.emplace_back(fc, dist, world.rank(r), 1);
    }
    for (int r = 0; r < 4; ++r) sessions[r].backward_wgrad_begin(shards[r]);
    for (int r = 0; r < 4; ++r)
      if (!sessions[r].wgrad_wait().ok()) return {"layer-api", false, "hybrid wgrad failed"};
    for (int r = 0; r < 4; ++r) {
      const Distribution dist = Distribution::build(4, g, r);
      const std::size_t off = dist.model_group.my_index * shard;
      for (std::size_t i = 0; i < shard; ++i) {
        const double denom = std::max(1.0f, std::fabs(reference[r][off + i]));
        if (std::fabs(shards[r][i] - reference[r][off + i]) / denom > 1e-6)
          return {"layer-api", false, "hybrid result differs from g=1 at g=" + std::to_string(g)};
      }
    }
  }
  return {"layer-api", true, "distribution arithmetic and hybrid consistency"};
}

inline SuiteResult backends_suite() {
  // Determinism: identical sims give identical traces.
  auto run_once = [] {
    SimConfig cfg;
    cfg.world = 3;
    cfg.beta = 1e9;
    cfg.chunk_bytes = 256;
    cfg.record_trace = true;
    cfg.carry_payloads = true;
    SimWorld world(cfg);
    auto bufs = rand_inputs(3, 777, 12);
    for (int r = 0; r < 3; ++r) {
      CollectiveDesc d;
      d.group = everyone(3, r);
      d.elem_count = bufs[r].size();
      d.buffer = bufs[r].data();
      world.rank(r).submit(d);
    }
    world.run_until_idle();
    return trace_to_csv(world.trace_rows());
  };
  if (run_once() != run_once()) return {"backends", false, "simulator traces not deterministic"};

  // Analytical consistency: single uncontended allreduce, chunk count 1.
  {
    SimConfig cfg;
    cfg.world = 4;
    cfg.alpha = 5e-6;
    cfg.beta = 1.25e9;
    cfg.chunk_bytes = std::size_t(1) << 30;
    SimWorld world(cfg);
    for (int r = 0; r < 4; ++r) {
      CollectiveDesc d;
      d.group = everyone(4, r);
      d.elem_count = 262144;
      world.rank(r).submit(d);
    }
    world.run_until_idle();
    ClusterConfig c;
    c.node_count = 4;
    c.alpha = 5e-6;
    c.beta = 1.25e9;
    const double want = estimate_collective_time(CollectiveTimeKind::Allreduce, 262144 * 4.0, 4, c);
    if (std::fabs(world.now() - want) > 1e-9 * want)
      return {"backends", false, "simulated allreduce time deviates from the analytical model"};
  }

  // Socket transport sanity on loopback (2 ranks, threaded).
  {
    const std::uint16_t base = find_free_port_base(2, static_cast<std::uint16_t>(22000 + (::getpid() % 1500) * 2));
    std::vector<Endpoint> eps = {{"127.0.0.1", base}, {"127.0.0.1", static_cast<std::uint16_t>(base + 1)}};
    const auto inputs = rand_inputs(2, 300, 64);
    const auto want = allreduce_oracle(inputs, ReduceOp::Sum);
    std::vector<std::vector<float>> results(2);
    std::string error;
    auto rank_fn = [&](int r) {
      try {
        SocketRuntime rt(r, 2, eps);
        std::vector<float> buf = inputs[r];
        CollectiveDesc d;
        d.group = everyone(2, r);
        d.elem_count = buf.size();
        d.buffer = buf.data();
        if (!rt.wait(rt.submit(d)).ok()) error = "socket allreduce failed";
        results[r] = buf;
        rt.shutdown(true);
      } catch (const std::exception& e) {
        error = e.what();
      }
    };
    std::thread t0(rank_fn, 0), t1(rank_fn, 1);
    t0.join();
    t1.join();
    if (!error.empty()) return {"backends", false, "socket transport: " + error};
    for (int r = 0; r < 2; ++r)
      if (rel_err(results[r], want) > 1e-6)
        return {"backends", false, "socket allreduce differs from oracle"};
  }
  return {"backends", true, "determinism, analytical consistency, socket loopback"};
}

}  // namespace validate_detail

/// Oracle-equivalence and invariant suites behind `validate`; fault_chunk is
/// the test hook that flips one byte of the k-th simulated chunk.
inline std::vector<SuiteResult> run_validation_suites(std::int64_t fault_chunk = -1) {
  return {validate_detail::collectives_suite(fault_chunk), validate_detail::scheduler_suite(),
          validate_detail::layer_api_suite(), validate_detail::backends_suite()};
}

}  // namespace gsync

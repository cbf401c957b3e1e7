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
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "gsync/cost_model.hpp"
#include "gsync/model_profile.hpp"
#include "gsync/sim_engine.hpp"
#include "gsync/socket_backend.hpp"
#include "gsync/validate.hpp"

namespace {

struct RunConfig {
  std::string profile_path;
  int world = 1;
  double alpha = 5e-6;
  double beta = 1.25e9;
  double gamma = 3e12;
  double eta = 0.9;
  int minibatch = 0;  // 0: take the profile default
  int iterations = 3;
  std::uint64_t seed = 0;
  std::size_t chunk_bytes = 65536;
  std::string wire = "fp32";
  bool no_priority = false;
  std::string out_path;

  gsync::ClusterConfig cluster() const {
    gsync::ClusterConfig c;
    c.node_count = world;
    c.alpha = alpha;
    c.beta = beta;
    c.gamma = gamma;
    c.eta = eta;
    c.wire_precision = gsync::precision_from_name(wire);
    c.validate();
    return c;
  }
  int mb(const gsync::ModelProfile& p) const { return minibatch > 0 ? minibatch : p.default_minibatch; }
};

void add_shared_options(CLI::App* cmd, RunConfig& cfg, bool needs_profile = true) {
  auto* profile = cmd->add_option("--profile", cfg.profile_path, "model profile JSON");
  if (needs_profile) profile->required();
  cmd->add_option("--world", cfg.world, "node count P");
  cmd->add_option("--alpha", cfg.alpha, "per-message latency, seconds");
  cmd->add_option("--beta", cfg.beta, "link bandwidth, bytes/second");
  cmd->add_option("--gamma", cfg.gamma, "per-node compute, flops/second");
  cmd->add_option("--eta", cfg.eta, "overlap effectiveness in [0,1]");
  cmd->add_option("--mb", cfg.minibatch, "minibatch per node (default: profile default)");
  cmd->add_option("--iters", cfg.iterations, "simulated iterations");
  cmd->add_option("--seed", cfg.seed, "random seed");
  cmd->add_option("--chunk-bytes", cfg.chunk_bytes, "collective chunk size in bytes");
  cmd->add_option("--wire", cfg.wire, "wire precision: fp32|fp16|int8")
      ->check(CLI::IsMember({"fp32", "fp16", "int8"}));
  cmd->add_flag("--no-priority", cfg.no_priority, "disable prioritization and preemption");
  cmd->add_option("--out", cfg.out_path, "output file path");
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw gsync::ConfigError("cannot write '" + path + "'");
  out << content;
}

std::string ratio_str(double r) {
  if (std::isinf(r)) return "inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", r);
  return buf;
}

int cmd_plan(const RunConfig& cfg, bool data_parallel_only) {
  const gsync::ModelProfile profile = gsync::load_profile(cfg.profile_path);
  const gsync::ClusterConfig cluster = cfg.cluster();
  const int mb = cfg.mb(profile);
  const gsync::ParallelismPlan plan =
      data_parallel_only ? gsync::data_parallel_plan(profile, cluster, mb)
                         : gsync::select_plan(profile, cluster, mb, gsync::divisors_of(cfg.world));

  std::printf("%-4s %-22s %-6s %12s %10s %6s %12s %12s %12s\n", "id", "name", "kind", "params",
              "ratio", "g", "compute_s", "comm_s", "exposed_s");
  for (const auto& e : plan.layers) {
    const gsync::LayerDescriptor& l = profile.layers.at(e.layer_id);
    const double ratio = gsync::compute_comm_ratio(l, {e.group_size}, cluster, mb);
    std::printf("%-4d %-22s %-6s %12lld %10s %6d %12.4e %12.4e %12.4e\n", l.id, l.name.c_str(),
                l.kind == gsync::LayerKind::Conv ? "conv" : "fc",
                static_cast<long long>(l.param_count), ratio_str(ratio).c_str(), e.group_size,
                e.est_compute_s, e.est_comm_s, e.est_exposed_s);
  }
  std::printf("total estimated iteration: %.6e s\n", plan.total_s);
  if (!cfg.out_path.empty()) {
    write_file(cfg.out_path, gsync::plan_to_json(plan).dump(1) + "\n");
    std::printf("plan written to %s\n", cfg.out_path.c_str());
  }
  return 0;
}

gsync::ParallelismPlan plan_for_sim(const RunConfig& cfg, const gsync::ModelProfile& profile,
                                    const gsync::ClusterConfig& cluster, int mb, bool auto_plan,
                                    const std::string& plan_path) {
  if (!plan_path.empty()) {
    std::ifstream in(plan_path);
    if (!in) throw gsync::ConfigError("cannot open plan '" + plan_path + "'");
    nlohmann::json j;
    in >> j;
    return gsync::plan_from_json(j);
  }
  if (auto_plan) return gsync::select_plan(profile, cluster, mb, gsync::divisors_of(cfg.world));
  return gsync::data_parallel_plan(profile, cluster, mb);
}

int cmd_simulate(const RunConfig& cfg, bool auto_plan, const std::string& plan_path,
                 const std::string& trace_path, bool compare) {
  const gsync::ModelProfile profile = gsync::load_profile(cfg.profile_path);
  const gsync::ClusterConfig cluster = cfg.cluster();
  const int mb = cfg.mb(profile);
  const gsync::ParallelismPlan plan = plan_for_sim(cfg, profile, cluster, mb, auto_plan, plan_path);

  gsync::SimRunOptions options;
  options.prioritization = !cfg.no_priority;
  options.quantization = cluster.wire_precision == gsync::Precision::INT8;
  options.chunk_bytes = cfg.chunk_bytes;
  options.record_trace = !trace_path.empty();

  const gsync::SimMetrics m =
      gsync::sim_run(profile, plan, cluster, mb, cfg.iterations, cfg.seed, options);
  std::printf("world=%d mb=%d iters=%d prioritization=%s wire=%s\n", cfg.world, mb, cfg.iterations,
              options.prioritization ? "on" : "off", cfg.wire.c_str());
  std::printf("steady iteration time: %.6e s\n", m.iteration_s);
  std::printf("total exposed comm:    %.6e s\n", m.total_exposed_s);
  std::printf("link utilization:      %.3f\n", m.link_utilization);
  std::printf("wire bytes (run):      %llu\n", static_cast<unsigned long long>(m.total_wire_bytes));

  if (compare) {
    gsync::SimRunOptions other = options;
    other.prioritization = !options.prioritization;
    const gsync::SimMetrics m2 =
        gsync::sim_run(profile, plan, cluster, mb, cfg.iterations, cfg.seed, other);
    const gsync::SimMetrics& on = options.prioritization ? m : m2;
    const gsync::SimMetrics& off = options.prioritization ? m2 : m;
    std::printf("exposed comm off/on:   %.6e / %.6e s\n", off.total_exposed_s, on.total_exposed_s);
    std::printf("reduction factor:      %.3f\n",
                on.total_exposed_s > 0 ? off.total_exposed_s / on.total_exposed_s : 0.0);
  }
  if (!cfg.out_path.empty()) {
    write_file(cfg.out_path, m.to_csv());
    std::printf("metrics written to %s\n", cfg.out_path.c_str());
  }
  if (!trace_path.empty()) {
    write_file(trace_path, m.trace_csv);
    std::printf("trace written to %s\n", trace_path.c_str());
  }
  return 0;
}

std::vector<int> parse_plist(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  if (out.empty()) throw gsync::ConfigError("empty P list");
  return out;
}

int cmd_sweep(const RunConfig& cfg, const std::string& plist, bool auto_plan) {
  const gsync::ModelProfile profile = gsync::load_profile(cfg.profile_path);
  gsync::ClusterConfig cluster = cfg.cluster();
  const int mb = cfg.mb(profile);
  const std::vector<int> worlds = parse_plist(plist);

  gsync::SimRunOptions options;
  options.prioritization = !cfg.no_priority;
  options.quantization = cluster.wire_precision == gsync::Precision::INT8;
  options.chunk_bytes = cfg.chunk_bytes;

  const auto sim_rows =
      gsync::sim_sweep(profile, cluster, mb, worlds, cfg.iterations, cfg.seed, options, auto_plan);
  const auto model_rows = gsync::scaling_sweep(profile, cluster, mb, worlds, auto_plan);

  std::printf("%8s %16s %12s %16s %12s\n", "P", "sim_iter_s", "sim_eff", "model_iter_s",
              "model_eff");
  for (std::size_t i = 0; i < sim_rows.size(); ++i) {
    std::printf("%8d %16.6e %12.4f %16.6e %12.4f\n", sim_rows[i].world, sim_rows[i].iter_time_s,
                sim_rows[i].efficiency, model_rows[i].iter_time_s, model_rows[i].efficiency);
  }
  if (!cfg.out_path.empty()) {
    write_file(cfg.out_path, gsync::sweep_to_csv(sim_rows));
    write_file(cfg.out_path + ".analytical.csv", gsync::sweep_to_csv(model_rows));
    std::printf("sweeps written to %s and %s.analytical.csv\n", cfg.out_path.c_str(),
                cfg.out_path.c_str());
  }
  return 0;
}

long env_long(const char* name, long fallback) {
  const char* v = std::getenv(name);
  return v != nullptr ? std::atol(v) : fallback;
}

int cmd_bench(const RunConfig& cfg) {
  const int rank = static_cast<int>(env_long("GSYNC_RANK", 0));
  const int world = static_cast<int>(env_long("GSYNC_WORLD_SIZE", 1));
  const std::uint16_t base_port = static_cast<std::uint16_t>(env_long("GSYNC_BASE_PORT", 18500));
  const char* hostfile = std::getenv("GSYNC_HOSTFILE");
  const gsync::Precision wire = gsync::precision_from_name(cfg.wire);

  std::vector<gsync::Endpoint> endpoints;
  if (world > 1) {
    if (hostfile == nullptr)
      throw gsync::ConfigError("GSYNC_HOSTFILE must be set for multi-rank bench");
    endpoints = gsync::parse_hostfile(hostfile, world, base_port);
  } else {
    endpoints = {{"127.0.0.1", base_port}};
  }

  gsync::SocketRuntimeOptions opts;
  opts.chunk_bytes = cfg.chunk_bytes;
  opts.prioritization = !cfg.no_priority;
  gsync::SocketRuntime rt(rank, world, endpoints, opts);

  std::printf("# rank %d of %d, wire=%s, chunk=%zu\n", rank, world, cfg.wire.c_str(),
              cfg.chunk_bytes);
  std::printf("%12s %14s %14s %10s\n", "bytes", "seconds", "MB/s", "verify");
  bool all_ok = true;
  for (std::size_t bytes = 4096; bytes <= (std::size_t(64) << 20); bytes *= 4) {
    const std::size_t elems = bytes / 4;
    // Every rank derives all inputs from the shared seed, so the oracle is
    // locally computable.
    std::vector<std::vector<float>> inputs;
    for (int r = 0; r < world; ++r) {
      std::mt19937_64 rng(cfg.seed * 7919 + r * 104729 + bytes);
      std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
      std::vector<float> v(elems);
      for (auto& x : v) x = dist(rng);
      inputs.push_back(std::move(v));
    }
    const std::vector<float> want = gsync::allreduce_oracle(inputs, gsync::ReduceOp::Sum);
    std::vector<float> buf = inputs[rank];

    gsync::CollectiveDesc d;
    for (int r = 0; r < world; ++r) d.group.ranks.push_back(r);
    d.group.my_index = rank;
    d.elem_count = elems;
    d.buffer = buf.data();
    d.wire = wire;
    d.priority = {gsync::PriorityClassKind::WeightGradient, 0};

    const auto t0 = std::chrono::steady_clock::now();
    const gsync::Handle h = rt.submit(d);
    const gsync::CompletionStatus st = rt.wait(h);
    const auto t1 = std::chrono::steady_clock::now();
    const double secs = std::chrono::duration<double>(t1 - t0).count();

    bool ok = st.ok();
    std::string verify = "ok";
    if (!ok) {
      verify = "FAIL(" + st.diagnostic + ")";
    } else if (wire == gsync::Precision::INT8) {
      const double bound = world * st.quant_max_abs / 127.0;
      double worst = 0.0;
      for (std::size_t i = 0; i < elems; ++i)
        worst = std::max(worst, std::fabs(static_cast<double>(buf[i]) - want[i]));
      ok = worst <= bound + 1e-12;
      char tmp[64];
      std::snprintf(tmp, sizeof tmp, "err %.3e <= bound %.3e", worst, bound);
      verify = ok ? tmp : std::string("FAIL ") + tmp;
    } else {
      double worst = 0.0;
      for (std::size_t i = 0; i < elems; ++i) {
        const double denom = std::max(1.0f, std::fabs(want[i]));
        worst = std::max(worst, std::fabs(static_cast<double>(buf[i]) - want[i]) / denom);
      }
      const double tol = wire == gsync::Precision::FP32 ? 1e-6 : 2e-3;
      ok = worst <= tol;
      if (!ok) verify = "FAIL(rel err)";
    }
    all_ok = all_ok && ok;
    std::printf("%12zu %14.6e %14.2f %10s\n", bytes, secs,
                static_cast<double>(bytes) / secs / 1e6, verify.c_str());
  }
  rt.shutdown(true);
  return all_ok ? 0 : 1;
}

int cmd_validate(std::int64_t fault_chunk) {
  const auto results = gsync::run_validation_suites(fault_chunk);
  bool all_ok = true;
  for (const auto& r : results) {
    std::printf("%-12s %s%s%s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL",
                r.detail.empty() ? "" : "  ", r.detail.c_str());
    all_ok = all_ok && r.passed;
  }
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gradient-synchronization runtime and evaluation harness"};
  app.require_subcommand(1);

  RunConfig cfg;
  bool data_parallel_only = false;
  bool auto_plan = false;
  bool compare = false;
  std::string plan_path, trace_path, plist = "1,2,4,8,16";
  std::int64_t fault_chunk = -1;

  CLI::App* plan = app.add_subcommand("plan", "choose a per-layer parallelization strategy");
  add_shared_options(plan, cfg);
  plan->add_flag("--data-parallel", data_parallel_only, "skip the planner; force g=1");

  CLI::App* simulate = app.add_subcommand("simulate", "run the discrete-event simulator");
  add_shared_options(simulate, cfg);
  simulate->add_option("--plan", plan_path, "run a previously exported plan JSON");
  simulate->add_flag("--auto-plan", auto_plan, "plan with select_plan instead of data parallel");
  simulate->add_option("--trace", trace_path, "write the event trace CSV here");
  simulate->add_flag("--compare", compare, "also run the opposite prioritization arm");

  CLI::App* sweep = app.add_subcommand("sweep", "weak-scaling sweep (simulated + analytical)");
  add_shared_options(sweep, cfg);
  sweep->add_option("--plist", plist, "comma-separated node counts");
  sweep->add_flag("--auto-plan", auto_plan, "plan with select_plan instead of data parallel");

  CLI::App* bench = app.add_subcommand("bench", "socket allreduce microbenchmark (env: GSYNC_*)");
  add_shared_options(bench, cfg, /*needs_profile=*/false);

  CLI::App* validate = app.add_subcommand("validate", "run oracle-equivalence suites");
  validate->add_option("--inject-fault", fault_chunk,
                       "test hook: flip a byte of the k-th simulated chunk");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(plan)) return cmd_plan(cfg, data_parallel_only);
    if (app.got_subcommand(simulate))
      return cmd_simulate(cfg, auto_plan, plan_path, trace_path, compare);
    if (app.got_subcommand(sweep)) return cmd_sweep(cfg, plist, auto_plan);
    if (app.got_subcommand(bench)) return cmd_bench(cfg);
    if (app.got_subcommand(validate)) return cmd_validate(fault_chunk);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

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

#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <queue>
#include <unordered_map>
#include <vector>

#include "gsync/collectives.hpp"
#include "gsync/errors.hpp"
#include "gsync/scheduler.hpp"

namespace gsync {

struct SimConfig {
  int world = 1;
  double alpha = 0.0;          // seconds per chunk
  double beta = 1.25e9;        // bytes per second
  double eta = 1.0;            // comm progress rate while the sender computes
  std::size_t chunk_bytes = 65536;
  bool prioritization = true;  // off: links served in submission order, no preemption
  bool carry_payloads = false; // move real floats (small-scale correctness runs)
  bool record_trace = false;
  std::int64_t fault_chunk = -1;  // test hook: flip one byte of the k-th departed chunk
  double drain_timeout_s = std::numeric_limits<double>::infinity();  // simulated seconds
};

/// Deterministic discrete-event network: one full-duplex NIC per rank, chunk
/// cost alpha + bytes/beta, priorities re-evaluated at every chunk boundary.
/// Everything is a pure function of (config, submissions); events process in
/// (time, sequence) order.
class SimWorld {
 public:
  explicit SimWorld(SimConfig cfg) : cfg_(cfg) {
    if (cfg.world < 1) throw ConfigError("world size must be >= 1");
    if (!(cfg.beta > 0.0)) throw ConfigError("beta must be > 0");
    if (cfg.alpha < 0.0) throw ConfigError("alpha must be >= 0");
    if (!(cfg.eta >= 0.0 && cfg.eta <= 1.0)) throw ConfigError("eta must be in [0,1]");
    if (cfg.chunk_bytes == 0) throw ConfigError("chunk_bytes must be > 0");
    ranks_.resize(cfg.world);
    facades_.reserve(cfg.world);
    for (int r = 0; r < cfg.world; ++r) facades_.push_back(std::make_unique<RankRuntime>(this, r));
  }

  SimWorld(const SimWorld&) = delete;
  SimWorld& operator=(const SimWorld&) = delete;

  class RankRuntime : public Runtime {
   public:
    RankRuntime(SimWorld* w, int r) : world_(w), rank_(r) {}
    Handle submit(const CollectiveDesc& desc) override { return world_->submit_on(rank_, desc); }
    CompletionStatus wait(Handle h) override { return world_->wait_pump(rank_, h); }
    bool test(Handle h) override { return world_->test_on(rank_, h); }
    int rank() const override { return rank_; }
    int world_size() const override { return world_->cfg_.world; }

   private:
    SimWorld* world_;
    int rank_;
  };

  Runtime& rank(int r) { return *facades_.at(r); }
  double now() const { return now_; }
  const SimConfig& config() const { return cfg_; }

  // --- submission / completion ------------------------------------------------

  Handle submit_on(int rank, const CollectiveDesc& desc) {
    if (stopped_) throw NotStartedError("runtime is shut down");
    desc.group.validate();
    if (desc.group.my_rank() != rank)
      throw InvalidGroupError("group my_index does not name the submitting rank");
    for (int r : desc.group.ranks)
      if (r < 0 || r >= cfg_.world) throw InvalidGroupError("group rank out of world range");
    if (desc.elem_count == 0 && desc.kind != CollectiveKind::Barrier)
      throw ConfigError("zero-length buffer is only valid for Barrier");

    const std::uint64_t sig = group_signature(desc.group);
    const std::uint64_t n = ++tag_counter_[std::make_pair(rank, sig)];
    const std::uint64_t tag = sig ^ (0x9e3779b97f4a7c15ull * n);

    const std::uint64_t id = next_id_++;
    RankState& rs = ranks_[rank];
    auto [it, fresh] = rs.requests.emplace(id, RequestCore(id, tag, desc, cfg_.chunk_bytes));
    RequestCore& req = it->second;
    req.priority.cls = desc.priority.cls;
    req.priority.key = desc.priority.key;
    req.priority.seq = submit_seq_++;
    rs.active.push_back(id);
    rs.by_tag[tag] = id;
    trace(TraceEvent::Submit, req.id(), -1, rank, -1);

    if (req.transfers_complete()) {
      finalize(rank, req);
    } else {
      // Chunks for this tag may already have arrived from eager peers.
      auto early = rs.early.find(tag);
      if (early != rs.early.end()) {
        while (!early->second.empty() && !req.transfers_complete()) {
          apply_arrival(rank, req, early->second.front());
          early->second.pop_front();
        }
        if (early->second.empty()) rs.early.erase(early);
      }
      try_grant(rank);
    }
    return Handle{id};
  }

  bool test_on(int rank, Handle h) {
    const RequestCore& req = find_request(rank, h);
    return req.state == RequestState::Done || req.state == RequestState::Failed;
  }

  CompletionStatus status_of(int rank, Handle h) {
    const RequestCore& req = find_request(rank, h);
    return {req.state, req.diagnostic, req.quant_max_abs};
  }

  /// Blocking wait for single-threaded use: promotes the request to the front
  /// of its priority class, then pumps the event loop until it completes.
  CompletionStatus wait_pump(int rank, Handle h) {
    RequestCore& req = find_request(rank, h);
    promote(rank, req);
    trace(TraceEvent::WaitBegin, req.id(), -1, rank, -1);
    while (req.state != RequestState::Done && req.state != RequestState::Failed) {
      if (!progress_step()) {
        req.state = RequestState::Failed;
        req.diagnostic = "no progress possible (peer submissions missing?)";
        break;
      }
    }
    trace(TraceEvent::WaitEnd, req.id(), -1, rank, -1);
    return {req.state, req.diagnostic, req.quant_max_abs};
  }

  void promote(int rank, Handle h) { promote(rank, find_request(rank, h)); }

  // --- event loop ---------------------------------------------------------------

  bool progress_step() {
    if (events_.empty()) return false;
    const Event ev = events_.top();
    events_.pop();
    now_ = ev.t;
    switch (ev.kind) {
      case Event::ChunkArrival: on_arrival(ev); break;
      case Event::ComputeDone: on_compute_done(ev.rank); break;
      case Event::GrantRetry: try_grant(ev.rank); break;
    }
    return true;
  }

  void run_until_idle() {
    while (progress_step()) {
    }
  }

  // --- agents (single-threaded multi-rank drivers) -----------------------------

  struct Action {
    enum Kind { Compute, WaitFor, Finished } kind = Finished;
    double seconds = 0.0;
    Handle handle;
    static Action compute(double s) { return {Compute, s, {}}; }
    static Action wait_for(Handle h) { return {WaitFor, 0.0, h}; }
    static Action finished() { return {Finished, 0.0, {}}; }
  };
  using Agent = std::function<Action()>;

  /// Runs one agent per rank to completion over simulated time. Agents submit
  /// through their rank facade and return the next blocking action; they must
  /// not call wait() themselves.
  void run_agents(std::vector<Agent> agents) {
    if (static_cast<int>(agents.size()) != cfg_.world)
      throw ConfigError("need exactly one agent per rank");
    for (int r = 0; r < cfg_.world; ++r) ranks_[r].agent = std::move(agents[r]);
    int live = cfg_.world;
    auto drain_ready = [&] {
      while (!unparked_.empty()) {
        std::vector<int> ready;
        ready.swap(unparked_);
        for (int r : ready)
          if (!advance_rank(r)) --live;
      }
    };
    for (int r = 0; r < cfg_.world; ++r)
      if (!advance_rank(r)) --live;
    drain_ready();
    while (live > 0) {
      if (!progress_step()) throw TransportError("simulation deadlock: parked agents but no events");
      drain_ready();
    }
    for (auto& rs : ranks_) rs.agent = nullptr;
  }

  DrainReport shutdown(bool drain) {
    DrainReport report;
    if (drain) {
      const double limit = now_ + cfg_.drain_timeout_s;
      while (progress_step()) {
        if (now_ > limit) throw DrainTimeoutError("drain exceeded simulated-time budget");
      }
    }
    for (auto& rs : ranks_) {
      for (auto& [id, req] : rs.requests) {
        if (req.state == RequestState::Done) {
          report.completed.push_back(id);
        } else {
          report.aborted.push_back(id);
        }
      }
    }
    std::sort(report.completed.begin(), report.completed.end());
    std::sort(report.aborted.begin(), report.aborted.end());
    stopped_ = true;
    return report;
  }

  // --- compute timeline (driven by agents or tests) ----------------------------

  void start_compute(int rank, double seconds) {
    if (seconds < 0.0) throw ConfigError("compute duration must be >= 0");
    RankState& rs = ranks_[rank];
    rs.compute_until = now_ + seconds;
    trace(TraceEvent::ComputeBegin, 0, -1, rank, -1);
    push_event({rs.compute_until, next_seq_++, Event::ComputeDone, rank, -1});
  }

  // --- introspection ------------------------------------------------------------

  struct RequestInfo {
    std::uint64_t id = 0;
    std::uint64_t tag = 0;
    int rank = 0;
    PriorityClassKind cls = PriorityClassKind::Bulk;
    int key = 0;
    std::uint64_t seq = 0;
    bool promoted = false;
    int user_key = -1;
    RequestState state = RequestState::Queued;
    std::int64_t total_chunks = 0;
    double occupancy_s = 0.0;
    double quant_max_abs = 0.0;
  };

  std::vector<RequestInfo> request_infos() const {
    std::vector<RequestInfo> out;
    for (int r = 0; r < cfg_.world; ++r) {
      for (const auto& [id, req] : ranks_[r].requests) {
        out.push_back({id, req.tag(), r, req.priority.cls, req.priority.key, req.priority.seq,
                       req.priority.promoted, req.desc().user_key, req.state, req.total_chunks(),
                       req.occupancy_s, req.quant_max_abs});
      }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return out;
  }

  const RequestCore* request(std::uint64_t id) const {
    for (const auto& rs : ranks_) {
      auto it = rs.requests.find(id);
      if (it != rs.requests.end()) return &it->second;
    }
    return nullptr;
  }

  const std::vector<TraceRow>& trace_rows() const { return trace_; }
  std::uint64_t total_payload_bytes() const { return total_payload_bytes_; }
  double total_link_busy_s() const { return link_busy_s_; }
  double max_quant_abs() const { return max_quant_abs_; }

 private:
  // Grant decisions at a timestamp run only after every arrival and compute
  // completion at that timestamp has been applied (phase 1 after phase 0), so
  // simultaneous events cannot race a link-assignment decision.
  struct Event {
    double t = 0.0;
    std::uint64_t seq = 0;
    enum Kind { ChunkArrival, ComputeDone, GrantRetry } kind = ChunkArrival;
    int rank = 0;       // destination rank (arrival) or the rank itself
    std::int32_t staged = -1;
    int phase() const { return kind == GrantRetry ? 1 : 0; }
  };
  struct EventAfter {
    bool operator()(const Event& a, const Event& b) const {
      if (a.t != b.t) return a.t > b.t;
      if (a.phase() != b.phase()) return a.phase() > b.phase();
      return a.seq > b.seq;
    }
  };

  struct StagedChunk {
    std::uint64_t tag = 0;
    int from = -1;
    std::size_t elems = 0;
    std::int64_t send_linear = 0;
    std::vector<std::uint8_t> payload;
  };

  struct RankState {
    double out_busy_until = 0.0;
    double in_busy_until = 0.0;
    double compute_until = 0.0;
    std::uint64_t serving = 0;  // request currently owning the out NIC
    std::vector<std::uint64_t> active;  // submission order; drained lazily
    std::unordered_map<std::uint64_t, RequestCore> requests;
    std::unordered_map<std::uint64_t, std::uint64_t> by_tag;
    std::unordered_map<std::uint64_t, std::deque<StagedChunk>> early;
    // agent state
    Agent agent;
    bool agent_finished = false;
    std::uint64_t parked_on = 0;
    double wait_started = 0.0;
    std::function<void(int, double)> on_wait_done;  // rank-local stall sink
  };

  RequestCore& find_request(int rank, Handle h) {
    auto& reqs = ranks_.at(rank).requests;
    auto it = reqs.find(h.id);
    if (it == reqs.end()) throw InvalidHandleError("unknown handle " + std::to_string(h.id));
    return it->second;
  }

  void promote(int rank, RequestCore& req) {
    if (!cfg_.prioritization) return;
    if (req.state == RequestState::Done || req.state == RequestState::Failed) return;
    if (!req.priority.promoted) {
      req.priority.promoted = true;
      req.priority.promote_seq = promote_seq_++;
      try_grant(rank);
    }
  }

  void push_event(Event ev) { events_.push(ev); }

  std::int32_t alloc_staged() {
    if (!staged_free_.empty()) {
      const std::int32_t idx = staged_free_.back();
      staged_free_.pop_back();
      return idx;
    }
    staged_.emplace_back();
    return static_cast<std::int32_t>(staged_.size() - 1);
  }

  void free_staged(std::int32_t idx) {
    staged_[idx].payload.clear();
    staged_free_.push_back(idx);
  }

  void trace(TraceEvent e, std::uint64_t rid, std::int64_t chunk, int from, int to) {
    if (cfg_.record_trace) trace_.push_back({now_, e, rid, chunk, from, to});
  }

  /// At most one outgoing chunk per rank; called at every boundary that could
  /// change the decision (chunk completion, submission, promotion, compute
  /// end). Picks the highest-priority runnable request, preempting whatever
  /// previously owned the NIC.
  void try_grant(int rank) {
    RankState& rs = ranks_[rank];
    if (rs.out_busy_until > now_) return;

    RequestCore* best = nullptr;
    bool any_live = false;
    for (std::uint64_t id : rs.active) {
      RequestCore& r = rs.requests.at(id);
      if (r.state == RequestState::Done || r.state == RequestState::Failed) continue;
      any_live = true;
      if (!r.send_runnable()) continue;
      if (best == nullptr ||
          (cfg_.prioritization ? priority_before(r.priority, best->priority)
                               : r.priority.seq < best->priority.seq)) {
        best = &r;
      }
    }
    if (!any_live) rs.active.clear();
    if (best == nullptr) return;

    const RequestCore::ChunkRef ch = best->peek_send();
    const int peer_index = (best->desc().group.my_index + 1) % best->desc().group.size();
    const int peer = best->desc().group.ranks[peer_index];
    RankState& ps = ranks_[peer];

    double t0 = std::max(now_, std::max(rs.out_busy_until, ps.in_busy_until));
    const std::size_t nbytes = ch.data.elems * bytes_per_element(best->desc().wire);
    double cost = cfg_.alpha + static_cast<double>(nbytes) / cfg_.beta;
    if (rs.compute_until > t0) {
      if (cfg_.eta == 0.0) {
        push_event({rs.compute_until, next_seq_++, Event::GrantRetry, rank, -1});
        return;
      }
      cost /= cfg_.eta;
    }

    if (cfg_.prioritization && rs.serving != 0 && rs.serving != best->id()) {
      auto prev = rs.requests.find(rs.serving);
      if (prev != rs.requests.end() && prev->second.state == RequestState::InFlight &&
          prev->second.sends_remaining()) {
        prev->second.state = RequestState::Preempted;
        trace(TraceEvent::Preempt, prev->second.id(), -1, rank, -1);
      }
    }
    if (best->state == RequestState::Queued) {
      best->state = RequestState::InFlight;
    } else if (best->state == RequestState::Preempted) {
      best->state = RequestState::InFlight;
      trace(TraceEvent::Resume, best->id(), -1, rank, -1);
    }
    rs.serving = best->id();

    const std::int32_t sidx = alloc_staged();
    StagedChunk& st = staged_[sidx];
    st.tag = best->tag();
    st.from = rank;
    st.elems = ch.data.elems;
    st.send_linear = ch.linear;
    st.payload.clear();
    if (cfg_.carry_payloads && best->desc().buffer != nullptr && ch.data.elems > 0) {
      const double qabs =
          encode_chunk(best->desc().wire,
                       std::span<const float>(best->desc().buffer + ch.data.offset_elems, ch.data.elems),
                       st.payload);
      best->quant_max_abs = std::max(best->quant_max_abs, qabs);
      max_quant_abs_ = std::max(max_quant_abs_, qabs);
      if (depart_counter_ == cfg_.fault_chunk && !st.payload.empty()) st.payload.back() ^= 0x80;
    }
    ++depart_counter_;
    total_payload_bytes_ += nbytes;
    link_busy_s_ += cost;
    best->occupancy_s += cost;
    trace(TraceEvent::Depart, best->id(), ch.linear, rank, peer);

    rs.out_busy_until = t0 + cost;
    ps.in_busy_until = t0 + cost;
    best->advance_send();
    push_event({t0 + cost, next_seq_++, Event::ChunkArrival, peer, sidx});
    if (best->transfers_complete()) finalize(rank, *best);
  }

  void apply_arrival(int rank, RequestCore& req, const StagedChunk& st) {
    const RequestCore::ChunkRef rc = req.peek_recv();
    if (rc.data.elems != st.elems)
      throw TransportError("simulated chunk size mismatch (schedule desync)");
    if (cfg_.carry_payloads && req.desc().buffer != nullptr && rc.data.elems > 0) {
      decode_chunk(req.desc().wire, st.payload,
                   std::span<float>(req.desc().buffer + rc.data.offset_elems, rc.data.elems),
                   req.recv_combines_now(), req.desc().op);
    }
    trace(TraceEvent::Arrive, req.id(), rc.linear, st.from, rank);
    req.advance_recv();
    if (req.transfers_complete()) finalize(rank, req);
  }

  void on_arrival(const Event& ev) {
    StagedChunk& st = staged_[ev.staged];
    const int sender = st.from;
    RankState& rs = ranks_[ev.rank];
    auto it = rs.by_tag.find(st.tag);
    bool applied = false;
    if (it != rs.by_tag.end()) {
      RequestCore& req = rs.requests.at(it->second);
      if (req.recvs_remaining()) {
        apply_arrival(ev.rank, req, st);
        applied = true;
      }
    }
    if (!applied) rs.early[st.tag].push_back(std::move(st));
    free_staged(ev.staged);
    push_event({now_, next_seq_++, Event::GrantRetry, sender, -1});
    push_event({now_, next_seq_++, Event::GrantRetry, ev.rank, -1});
  }

  void on_compute_done(int rank) {
    RankState& rs = ranks_[rank];
    if (rs.compute_until > now_) return;  // superseded by a newer interval
    trace(TraceEvent::ComputeEnd, 0, -1, rank, -1);
    if (rs.agent && !rs.agent_finished && rs.parked_on == 0) unparked_.push_back(rank);
    push_event({now_, next_seq_++, Event::GrantRetry, rank, -1});
  }

  void finalize(int rank, RequestCore& req) {
    req.state = RequestState::Done;
    RankState& rs = ranks_[rank];
    if (rs.serving == req.id()) rs.serving = 0;
    trace(TraceEvent::Done, req.id(), -1, rank, -1);
    if (rs.agent && rs.parked_on == req.id()) {
      rs.parked_on = 0;
      if (rs.on_wait_done) rs.on_wait_done(rank, now_ - rs.wait_started);
      trace(TraceEvent::WaitEnd, req.id(), -1, rank, -1);
      unparked_.push_back(rank);
    }
  }

  /// Runs the rank's agent until it blocks. Returns false once finished.
  bool advance_rank(int rank) {
    RankState& rs = ranks_[rank];
    if (rs.agent_finished) return false;
    while (true) {
      const Action a = rs.agent();
      if (a.kind == Action::Compute) {
        start_compute(rank, a.seconds);
        return true;
      }
      if (a.kind == Action::WaitFor) {
        RequestCore& req = find_request(rank, a.handle);
        if (req.state == RequestState::Done) continue;
        if (req.state == RequestState::Failed)
          throw TransportError("request failed during agent run: " + req.diagnostic);
        promote(rank, req);
        rs.parked_on = a.handle.id;
        rs.wait_started = now_;
        trace(TraceEvent::WaitBegin, a.handle.id, -1, rank, -1);
        return true;
      }
      rs.agent_finished = true;
      return false;
    }
  }

 public:
  /// Stall sink: called as (rank, stall_seconds) whenever an agent's wait
  /// completes; the iteration driver aggregates exposed time through this.
  void set_wait_observer(int rank, std::function<void(int, double)> fn) {
    ranks_.at(rank).on_wait_done = std::move(fn);
  }

 private:
  struct PairHash {
    std::size_t operator()(const std::pair<int, std::uint64_t>& p) const {
      return std::hash<std::uint64_t>()((static_cast<std::uint64_t>(p.first) << 56) ^ p.second);
    }
  };

  SimConfig cfg_;
  double now_ = 0.0;
  bool stopped_ = false;
  std::uint64_t next_id_ = 1;
  std::uint64_t next_seq_ = 0;
  std::uint64_t submit_seq_ = 0;
  std::uint64_t promote_seq_ = 0;
  std::int64_t depart_counter_ = 0;
  std::uint64_t total_payload_bytes_ = 0;
  double link_busy_s_ = 0.0;
  double max_quant_abs_ = 0.0;
  std::vector<RankState> ranks_;
  std::vector<std::unique_ptr<RankRuntime>> facades_;
  std::priority_queue<Event, std::vector<Event>, EventAfter> events_;
  std::vector<StagedChunk> staged_;
  std::vector<std::int32_t> staged_free_;
  std::unordered_map<std::pair<int, std::uint64_t>, std::uint64_t, PairHash> tag_counter_;
  std::vector<TraceRow> trace_;
  std::vector<int> unparked_;
};

}  // namespace gsync

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

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "gsync/collectives.hpp"
#include "gsync/errors.hpp"
#include "gsync/precision.hpp"

namespace gsync {

/// Priority classes, highest first. Activation exchanges outrank weight
/// gradients because they block the next layer's compute; weight gradients
/// order by forward layer id (layer 0 first, since the next iteration's
/// forward pass consumes it first); Bulk is everything else.
enum class PriorityClassKind : std::uint8_t { Activation = 0, WeightGradient = 1, Bulk = 2 };

inline const char* priority_class_name(PriorityClassKind c) {
  switch (c) {
    case PriorityClassKind::Activation: return "activation";
    case PriorityClassKind::WeightGradient: return "wgrad";
    case PriorityClassKind::Bulk: return "bulk";
  }
  return "bulk";
}

struct Priority {
  PriorityClassKind cls = PriorityClassKind::Bulk;
  int key = 0;  // for WeightGradient: the layer id
};

/// Fully resolved priority of a submitted request. Total order: class, then
/// wait-promotion (promoted requests move to the front of their class, in
/// promotion order), then key, then submission sequence (FIFO tie-break).
struct ResolvedPriority {
  PriorityClassKind cls = PriorityClassKind::Bulk;
  bool promoted = false;
  std::uint64_t promote_seq = 0;
  int key = 0;
  std::uint64_t seq = 0;
};

inline bool priority_before(const ResolvedPriority& a, const ResolvedPriority& b) {
  if (a.cls != b.cls) return a.cls < b.cls;
  if (a.promoted != b.promoted) return a.promoted;
  if (a.promoted && b.promoted && a.promote_seq != b.promote_seq)
    return a.promote_seq < b.promote_seq;
  if (a.key != b.key) return a.key < b.key;
  return a.seq < b.seq;
}

enum class RequestState : std::uint8_t { Queued, InFlight, Preempted, Done, Failed };

inline const char* request_state_name(RequestState s) {
  switch (s) {
    case RequestState::Queued: return "queued";
    case RequestState::InFlight: return "in_flight";
    case RequestState::Preempted: return "preempted";
    case RequestState::Done: return "done";
    case RequestState::Failed: return "failed";
  }
  return "queued";
}

/// One collective to run: what, over whom, at which priority. `buffer` is the
/// FP32 working buffer (accumulation is always FP32; the wire precision only
/// affects encoding). A null buffer runs the collective metadata-only, which
/// the simulator uses for timing-only sweeps.
struct CollectiveDesc {
  CollectiveKind kind = CollectiveKind::Allreduce;
  CommGroup group;
  std::size_t elem_count = 0;
  Precision wire = Precision::FP32;
  ReduceOp op = ReduceOp::Sum;
  Priority priority;
  int root_index = 0;
  float* buffer = nullptr;
  int user_key = -1;  // caller tag (the iteration driver stores the layer id)
};

struct Handle {
  std::uint64_t id = 0;
  bool valid() const { return id != 0; }
};

struct CompletionStatus {
  RequestState state = RequestState::Done;
  std::string diagnostic;
  double quant_max_abs = 0.0;  // largest |value| quantized on this rank (INT8 wire)
  bool ok() const { return state == RequestState::Done; }
};

struct DrainReport {
  std::vector<std::uint64_t> completed;
  std::vector<std::uint64_t> aborted;
};

/// Per-rank view of one in-progress collective: the ring plan plus send/recv
/// cursors. A send of step s is runnable once every receive of steps < s has
/// landed; zero-element steps complete on their own. chunks_done counts both
/// directions so Done <=> chunks_done == total_chunks holds exactly.
class RequestCore {
 public:
  RequestCore() = default;
  RequestCore(std::uint64_t id, std::uint64_t tag, const CollectiveDesc& desc,
              std::size_t chunk_bytes)
      : id_(id),
        tag_(tag),
        desc_(desc),
        plan_(desc.kind, desc.group.size(), desc.group.my_index, desc.elem_count,
              bytes_per_element(desc.wire), chunk_bytes, desc.root_index) {
    total_send_chunks_ = plan_.total_send_chunks();
    total_recv_chunks_ = plan_.total_recv_chunks();
    skip_empty_sends();
    skip_empty_recvs();
  }

  std::uint64_t id() const { return id_; }
  std::uint64_t tag() const { return tag_; }
  const CollectiveDesc& desc() const { return desc_; }
  const RingPlan& plan() const { return plan_; }

  RequestState state = RequestState::Queued;
  ResolvedPriority priority;
  double quant_max_abs = 0.0;
  double occupancy_s = 0.0;  // total link time consumed (simulator bookkeeping)
  std::string diagnostic;

  bool sends_remaining() const { return send_step_ < plan_.num_steps(); }
  bool recvs_remaining() const { return recv_step_ < plan_.num_steps(); }
  bool transfers_complete() const { return !sends_remaining() && !recvs_remaining(); }

  std::int64_t chunks_done() const { return send_chunks_done_ + recv_chunks_done_; }
  std::int64_t total_chunks() const { return total_send_chunks_ + total_recv_chunks_; }
  std::int64_t send_chunks_done() const { return send_chunks_done_; }

  int send_step() const { return send_step_; }
  int recv_step() const { return recv_step_; }

  /// True when the next send chunk's data dependency is satisfied: every
  /// receive of steps below send_step has landed (recv_step skips stepless
  /// receives on its own).
  bool send_runnable() const {
    return sends_remaining() && recv_step_ >= send_step_;
  }

  struct ChunkRef {
    int step = 0;
    Segment data;          // element range of this chunk
    std::int64_t linear = 0;  // 0-based index among this rank's sends (or recvs)
  };

  ChunkRef peek_send() const {
    ChunkRef c;
    c.step = send_step_;
    c.data = plan_.chunk_of(plan_.send_segment(send_step_), send_chunk_in_step_);
    c.linear = send_chunks_done_;
    return c;
  }

  void advance_send() {
    ++send_chunks_done_;
    if (++send_chunk_in_step_ >= plan_.send_chunks_in_step(send_step_)) {
      ++send_step_;
      send_chunk_in_step_ = 0;
      skip_empty_sends();
    }
  }

  ChunkRef peek_recv() const {
    ChunkRef c;
    c.step = recv_step_;
    c.data = plan_.chunk_of(plan_.recv_segment(recv_step_), recv_chunk_in_step_);
    c.linear = recv_chunks_done_;
    return c;
  }

  bool recv_combines_now() const { return plan_.recv_combines(recv_step_); }

  void advance_recv() {
    ++recv_chunks_done_;
    if (++recv_chunk_in_step_ >= plan_.recv_chunks_in_step(recv_step_)) {
      ++recv_step_;
      recv_chunk_in_step_ = 0;
      skip_empty_recvs();
    }
  }

 private:
  void skip_empty_sends() {
    while (send_step_ < plan_.num_steps() && plan_.send_chunks_in_step(send_step_) == 0) {
      ++send_step_;
      send_chunk_in_step_ = 0;
    }
  }
  void skip_empty_recvs() {
    while (recv_step_ < plan_.num_steps() && plan_.recv_chunks_in_step(recv_step_) == 0) {
      ++recv_step_;
      recv_chunk_in_step_ = 0;
    }
  }

  std::uint64_t id_ = 0;
  std::uint64_t tag_ = 0;
  CollectiveDesc desc_;
  RingPlan plan_;
  int send_step_ = 0;
  int send_chunk_in_step_ = 0;
  int recv_step_ = 0;
  int recv_chunk_in_step_ = 0;
  std::int64_t send_chunks_done_ = 0;
  std::int64_t recv_chunks_done_ = 0;
  std::int64_t total_send_chunks_ = 0;
  std::int64_t total_recv_chunks_ = 0;
};

/// Picks the request that should own a link next: the maximum under the
/// priority total order among runnable candidates, or plain submission order
/// when prioritization is off.
inline RequestCore* pick_next(const std::vector<RequestCore*>& candidates, bool prioritization) {
  RequestCore* best = nullptr;
  for (RequestCore* r : candidates) {
    if (r == nullptr || !r->send_runnable()) continue;
    if (r->state == RequestState::Done || r->state == RequestState::Failed) continue;
    if (best == nullptr) {
      best = r;
    } else if (prioritization ? priority_before(r->priority, best->priority)
                              : r->priority.seq < best->priority.seq) {
      best = r;
    }
  }
  return best;
}

/// Deterministic collective tag: all group members derive the same tag for
/// the k-th collective submitted on the same group, so instances rendezvous
/// across ranks without negotiation.
inline std::uint64_t group_signature(const CommGroup& g) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (int r : g.ranks) {
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(r));
    h *= 1099511628211ull;
  }
  return h;
}

/// Blocking-wait/non-blocking-test surface shared by the simulator rank
/// facades and the socket runtime; the layer API is written against this.
class Runtime {
 public:
  virtual ~Runtime() = default;
  virtual Handle submit(const CollectiveDesc& desc) = 0;
  virtual CompletionStatus wait(Handle h) = 0;
  virtual bool test(Handle h) = 0;
  virtual int rank() const = 0;
  virtual int world_size() const = 0;
};

// --- event trace -------------------------------------------------------------

enum class TraceEvent : std::uint8_t {
  Submit,
  Depart,
  Arrive,
  Preempt,
  Resume,
  Done,
  Failed,
  ComputeBegin,
  ComputeEnd,
  WaitBegin,
  WaitEnd,
};

inline const char* trace_event_name(TraceEvent e) {
  switch (e) {
    case TraceEvent::Submit: return "submit";
    case TraceEvent::Depart: return "depart";
    case TraceEvent::Arrive: return "arrive";
    case TraceEvent::Preempt: return "preempt";
    case TraceEvent::Resume: return "resume";
    case TraceEvent::Done: return "done";
    case TraceEvent::Failed: return "failed";
    case TraceEvent::ComputeBegin: return "compute_begin";
    case TraceEvent::ComputeEnd: return "compute_end";
    case TraceEvent::WaitBegin: return "wait_begin";
    case TraceEvent::WaitEnd: return "wait_end";
  }
  return "?";
}

struct TraceRow {
  double time_s = 0.0;
  TraceEvent event = TraceEvent::Submit;
  std::uint64_t request_id = 0;  // 0 for pure compute events
  std::int64_t chunk_index = -1;
  int link_from = -1;
  int link_to = -1;  // -1: single-rank event
};

inline std::string trace_to_csv(const std::vector<TraceRow>& rows) {
  std::string out = "time_s,event,request_id,chunk_index,link\n";
  char buf[160];
  for (const auto& r : rows) {
    std::string link = "r" + std::to_string(r.link_from);
    if (r.link_to >= 0) link += "->r" + std::to_string(r.link_to);
    std::snprintf(buf, sizeof buf, "%.9e,%s,%llu,%lld,%s\n", r.time_s, trace_event_name(r.event),
                  static_cast<unsigned long long>(r.request_id),
                  static_cast<long long>(r.chunk_index), link.c_str());
    out += buf;
  }
  return out;
}

}  // namespace gsync

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
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

#include "gsync/errors.hpp"
#include "gsync/precision.hpp"

namespace gsync {

enum class CollectiveKind : std::uint8_t { Allreduce, ReduceScatter, Allgather, Broadcast, Barrier };

inline const char* collective_kind_name(CollectiveKind k) {
  switch (k) {
    case CollectiveKind::Allreduce: return "allreduce";
    case CollectiveKind::ReduceScatter: return "reduce_scatter";
    case CollectiveKind::Allgather: return "allgather";
    case CollectiveKind::Broadcast: return "broadcast";
    case CollectiveKind::Barrier: return "barrier";
  }
  return "allreduce";
}

enum class ReduceOp : std::uint8_t { Sum, Max, Min };

/// Ordered set of global ranks taking part in one collective, plus the local
/// rank's position. The ring runs over the list order.
struct CommGroup {
  std::vector<int> ranks;
  int my_index = 0;

  void validate() const {
    if (ranks.empty()) throw InvalidGroupError("empty communication group");
    if (my_index < 0 || my_index >= static_cast<int>(ranks.size()))
      throw InvalidGroupError("my_index out of range");
    std::vector<int> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw InvalidGroupError("duplicate rank in communication group");
  }

  int size() const { return static_cast<int>(ranks.size()); }
  int my_rank() const { return ranks[my_index]; }
  int next_rank() const { return ranks[(my_index + 1) % size()]; }
  int prev_rank() const { return ranks[(my_index + size() - 1) % size()]; }

  bool operator==(const CommGroup&) const = default;
};

struct Segment {
  std::size_t offset_elems = 0;
  std::size_t elems = 0;
};

/// Balanced tiling of total_elems into n segments whose sizes differ by at
/// most one element; segment k.
inline Segment ring_segment(std::size_t total_elems, int n, int k) {
  const std::size_t base = total_elems / n;
  const std::size_t rem = total_elems % n;
  const std::size_t uk = static_cast<std::size_t>(k);
  return {uk * base + std::min(uk, rem), base + (uk < rem ? 1 : 0)};
}

/// Deterministic chunked ring schedule for one rank of a collective.
///
/// The buffer is tiled into group_size segments whose element counts differ
/// by at most one; a step moves one segment one hop around the ring, split
/// into chunks of at most chunk_bytes (last chunk short). Allreduce runs a
/// reduce-scatter phase (n-1 steps, receives accumulate) followed by an
/// allgather phase (n-1 steps, receives copy). All queries are O(1) so plans
/// stay cheap at large group sizes; entries() materializes the schedule for
/// inspection.
class RingPlan {
 public:
  RingPlan() = default;
  RingPlan(CollectiveKind kind, int group_size, int my_index, std::size_t total_elems,
           std::size_t elem_bytes, std::size_t chunk_bytes, int root_index = 0)
      : kind_(kind),
        n_(group_size),
        me_(my_index),
        total_elems_(total_elems),
        elem_bytes_(elem_bytes),
        root_(root_index) {
    if (group_size < 1) throw InvalidGroupError("group size must be >= 1");
    if (my_index < 0 || my_index >= group_size) throw InvalidGroupError("my_index out of range");
    if (chunk_bytes == 0) throw ConfigError("chunk_bytes must be > 0");
    if (elem_bytes == 0) throw ConfigError("elem_bytes must be > 0");
    chunk_elems_ = std::max<std::size_t>(1, chunk_bytes / elem_bytes);
    if (n_ > 1) {
      switch (kind) {
        case CollectiveKind::Allreduce: num_steps_ = 2 * (n_ - 1); break;
        case CollectiveKind::ReduceScatter:
        case CollectiveKind::Allgather: num_steps_ = n_ - 1; break;
        case CollectiveKind::Broadcast: num_steps_ = n_ - 1; break;
        case CollectiveKind::Barrier: num_steps_ = 2 * (n_ - 1); break;
      }
    }
  }

  CollectiveKind kind() const { return kind_; }
  int group_size() const { return n_; }
  int my_index() const { return me_; }
  int num_steps() const { return num_steps_; }
  std::size_t total_elems() const { return total_elems_; }
  std::size_t elem_bytes() const { return elem_bytes_; }
  std::size_t chunk_elems() const { return chunk_elems_; }

  Segment segment(int k) const { return ring_segment(total_elems_, n_, k); }

  // Broadcast runs as a store-and-forward chain in ring order starting at the
  // root: the rank at chain position t sends the whole buffer at step t.
  int chain_pos() const { return (me_ - root_ + n_) % n_; }

  bool has_send(int step) const {
    if (step < 0 || step >= num_steps_) return false;
    if (kind_ == CollectiveKind::Broadcast) return chain_pos() == step;
    return true;
  }
  bool has_recv(int step) const {
    if (step < 0 || step >= num_steps_) return false;
    if (kind_ == CollectiveKind::Broadcast) return chain_pos() == step + 1;
    return true;
  }

  Segment send_segment(int step) const {
    if (!has_send(step)) return {0, 0};
    switch (kind_) {
      case CollectiveKind::Allreduce:
        if (step < n_ - 1) return segment(mod(me_ - step - 1));
        return segment(mod(me_ - (step - (n_ - 1))));
      case CollectiveKind::ReduceScatter: return segment(mod(me_ - step - 1));
      case CollectiveKind::Allgather: return segment(mod(me_ - step));
      case CollectiveKind::Broadcast: return {0, total_elems_};
      case CollectiveKind::Barrier: return {0, 0};
    }
    return {0, 0};
  }

  Segment recv_segment(int step) const {
    if (!has_recv(step)) return {0, 0};
    switch (kind_) {
      case CollectiveKind::Allreduce:
        if (step < n_ - 1) return segment(mod(me_ - step - 2));
        return segment(mod(me_ - (step - (n_ - 1)) - 1));
      case CollectiveKind::ReduceScatter: return segment(mod(me_ - step - 2));
      case CollectiveKind::Allgather: return segment(mod(me_ - step - 1));
      case CollectiveKind::Broadcast: return {0, total_elems_};
      case CollectiveKind::Barrier: return {0, 0};
    }
    return {0, 0};
  }

  /// Receives accumulate during reduce phases and copy otherwise.
  bool recv_combines(int step) const {
    switch (kind_) {
      case CollectiveKind::Allreduce: return step < n_ - 1;
      case CollectiveKind::ReduceScatter: return true;
      default: return false;
    }
  }

  /// After reduce-scatter (standalone or as a phase), the local rank owns the
  /// fully reduced segment my_index, in place.
  Segment owned_segment() const { return segment(me_); }

  int chunks_for(std::size_t elems) const {
    if (elems == 0) return kind_ == CollectiveKind::Barrier ? 1 : 0;
    return static_cast<int>((elems + chunk_elems_ - 1) / chunk_elems_);
  }
  int send_chunks_in_step(int step) const {
    if (!has_send(step)) return 0;
    if (kind_ == CollectiveKind::Barrier) return 1;
    return chunks_for(send_segment(step).elems);
  }
  int recv_chunks_in_step(int step) const {
    if (!has_recv(step)) return 0;
    if (kind_ == CollectiveKind::Barrier) return 1;
    return chunks_for(recv_segment(step).elems);
  }

  std::int64_t total_send_chunks() const {
    std::int64_t total = 0;
    for (int s = 0; s < num_steps_; ++s) total += send_chunks_in_step(s);
    return total;
  }
  std::int64_t total_recv_chunks() const {
    std::int64_t total = 0;
    for (int s = 0; s < num_steps_; ++s) total += recv_chunks_in_step(s);
    return total;
  }

  /// Chunk k (0-based) of a segment.
  Segment chunk_of(Segment seg, int k) const {
    const std::size_t off = static_cast<std::size_t>(k) * chunk_elems_;
    if (off >= seg.elems) return {seg.offset_elems + seg.elems, 0};
    return {seg.offset_elems + off, std::min(chunk_elems_, seg.elems - off)};
  }

  struct Entry {
    int step = 0;
    int send_to = -1;    // group index, -1 when the step sends nothing
    int recv_from = -1;  // group index, -1 when the step receives nothing
    Segment send;
    Segment recv;
    bool combine = false;
  };

  /// Materialized per-step view (tests, trace tooling).
  std::vector<Entry> entries() const {
    std::vector<Entry> out;
    for (int s = 0; s < num_steps_; ++s) {
      Entry e;
      e.step = s;
      e.send = send_segment(s);
      e.recv = recv_segment(s);
      e.combine = recv_combines(s);
      e.send_to = has_send(s) ? (me_ + 1) % n_ : -1;
      e.recv_from = has_recv(s) ? (me_ + n_ - 1) % n_ : -1;
      out.push_back(e);
    }
    return out;
  }

 private:
  int mod(int v) const { return ((v % n_) + n_) % n_; }

  CollectiveKind kind_ = CollectiveKind::Allreduce;
  int n_ = 1;
  int me_ = 0;
  std::size_t total_elems_ = 0;
  std::size_t elem_bytes_ = 1;
  std::size_t chunk_elems_ = 1;
  int root_ = 0;
  int num_steps_ = 0;
};

/// Spec'd entry point: schedule over a raw byte buffer (element size 1).
inline RingPlan build_ring_schedule(CollectiveKind kind, int group_size, std::size_t buffer_bytes,
                                    std::size_t chunk_bytes, int my_index = 0,
                                    std::size_t elem_bytes = 1, int root_index = 0) {
  if (elem_bytes == 0 || buffer_bytes % elem_bytes != 0)
    throw ConfigError("buffer_bytes must be a multiple of elem_bytes");
  return RingPlan(kind, group_size, my_index, buffer_bytes / elem_bytes, elem_bytes, chunk_bytes,
                  root_index);
}

// --- reductions --------------------------------------------------------------

inline void reduce_elementwise(ReduceOp op, std::span<float> acc, std::span<const float> in) {
  if (acc.size() != in.size())
    throw LengthMismatchError("reduce_elementwise: length mismatch (" +
                              std::to_string(acc.size()) + " vs " + std::to_string(in.size()) + ")");
  switch (op) {
    case ReduceOp::Sum:
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += in[i];
      break;
    case ReduceOp::Max:
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = std::max(acc[i], in[i]);
      break;
    case ReduceOp::Min:
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = std::min(acc[i], in[i]);
      break;
  }
}

/// Sequential left-to-right reduction in rank order; the reference result for
/// every distributed execution path.
inline std::vector<float> allreduce_oracle(const std::vector<std::vector<float>>& inputs,
                                           ReduceOp op) {
  if (inputs.empty()) return {};
  std::vector<float> acc = inputs[0];
  for (std::size_t r = 1; r < inputs.size(); ++r) {
    if (inputs[r].size() != acc.size())
      throw LengthMismatchError("allreduce_oracle: rank " + std::to_string(r) + " length mismatch");
    reduce_elementwise(op, acc, inputs[r]);
  }
  return acc;
}

// --- int8 quantization --------------------------------------------------------

/// Symmetric linear int8 block: q = round(x / scale), scale = max|x| / 127.
struct QuantChunk {
  std::vector<std::int8_t> payload;
  float scale = 0.0f;
  std::size_t element_count() const { return payload.size(); }
};

inline QuantChunk quantize_chunk(std::span<const float> values) {
  float max_abs = 0.0f;
  for (float v : values) {
    if (!std::isfinite(v)) throw NonFiniteError("quantize_chunk: non-finite input");
    max_abs = std::max(max_abs, std::fabs(v));
  }
  QuantChunk q;
  q.scale = max_abs / 127.0f;
  q.payload.resize(values.size());
  if (q.scale > 0.0f) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const long r = std::lround(values[i] / q.scale);
      q.payload[i] = static_cast<std::int8_t>(std::clamp(r, -127L, 127L));
    }
  }
  return q;
}

inline std::vector<float> dequantize_chunk(const QuantChunk& q) {
  std::vector<float> out(q.payload.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(q.payload[i]) * q.scale;
  return out;
}

// --- wire codec ---------------------------------------------------------------
// One encode/decode implementation shared by the in-process executor, the
// simulator (payload mode) and the socket transport, so results agree
// bit-for-bit across backends.

inline std::size_t wire_payload_bytes(Precision p, std::size_t elems) {
  return elems * bytes_per_element(p) + (p == Precision::INT8 && elems > 0 ? 4 : 0);
}

/// Encodes elems floats to wire format; returns the largest |value| seen
/// (the quantization range when p is INT8, 0 for empty input).
inline double encode_chunk(Precision p, std::span<const float> src, std::vector<std::uint8_t>& out) {
  out.resize(wire_payload_bytes(p, src.size()));
  switch (p) {
    case Precision::FP32:
      if (!src.empty()) std::memcpy(out.data(), src.data(), src.size() * 4);
      return 0.0;
    case Precision::FP16:
      for (std::size_t i = 0; i < src.size(); ++i) {
        const std::uint16_t h = fp32_to_fp16_bits(src[i]);
        out[2 * i] = static_cast<std::uint8_t>(h & 0xff);
        out[2 * i + 1] = static_cast<std::uint8_t>(h >> 8);
      }
      return 0.0;
    case Precision::INT8: {
      if (src.empty()) return 0.0;
      const QuantChunk q = quantize_chunk(src);
      std::memcpy(out.data(), &q.scale, 4);
      std::memcpy(out.data() + 4, q.payload.data(), q.payload.size());
      return static_cast<double>(q.scale) * 127.0;
    }
  }
  return 0.0;
}

/// Decodes a wire chunk into dst, either accumulating (combine) or copying.
inline void decode_chunk(Precision p, std::span<const std::uint8_t> payload, std::span<float> dst,
                         bool combine, ReduceOp op) {
  if (payload.size() != wire_payload_bytes(p, dst.size()))
    throw LengthMismatchError("decode_chunk: payload size mismatch");
  if (dst.empty()) return;
  std::vector<float> tmp(dst.size());
  switch (p) {
    case Precision::FP32:
      std::memcpy(tmp.data(), payload.data(), dst.size() * 4);
      break;
    case Precision::FP16:
      for (std::size_t i = 0; i < dst.size(); ++i) {
        const std::uint16_t h = static_cast<std::uint16_t>(payload[2 * i]) |
                                (static_cast<std::uint16_t>(payload[2 * i + 1]) << 8);
        tmp[i] = fp16_bits_to_fp32(h);
      }
      break;
    case Precision::INT8: {
      float scale;
      std::memcpy(&scale, payload.data(), 4);
      for (std::size_t i = 0; i < dst.size(); ++i)
        tmp[i] = static_cast<float>(static_cast<std::int8_t>(payload[4 + i])) * scale;
      break;
    }
  }
  if (combine) {
    reduce_elementwise(op, dst, tmp);
  } else {
    std::copy(tmp.begin(), tmp.end(), dst.begin());
  }
}

// --- in-process executor --------------------------------------------------------

/// Executes one collective synchronously over n in-memory rank buffers using
/// each rank's RingPlan, chunk by chunk through the wire codec. Returns the
/// maximum |value| handed to the quantizer (0 unless INT8). Reference path
/// for backend-equivalence checks.
inline double run_collective_inprocess(CollectiveKind kind, ReduceOp op, Precision wire,
                                       std::size_t chunk_bytes,
                                       std::vector<std::vector<float>>& buffers,
                                       int root_index = 0) {
  const int n = static_cast<int>(buffers.size());
  if (n == 0) return 0.0;
  for (const auto& b : buffers)
    if (b.size() != buffers[0].size())
      throw LengthMismatchError("run_collective_inprocess: unequal buffer lengths");

  std::vector<RingPlan> plans;
  for (int i = 0; i < n; ++i)
    plans.emplace_back(kind, n, i, buffers[0].size(), sizeof(float), chunk_bytes, root_index);

  double max_abs = 0.0;
  std::vector<std::uint8_t> payload;
  const int steps = plans[0].num_steps();
  for (int s = 0; s < steps; ++s) {
    // Snapshot every rank's outgoing bytes for this step, then apply, so a
    // step's receives never feed its own sends.
    std::vector<std::vector<std::uint8_t>> staged(n);
    for (int i = 0; i < n; ++i) {
      const Segment seg = plans[i].send_segment(s);
      if (seg.elems == 0) continue;
      staged[i].clear();
      const int chunks = plans[i].chunks_for(seg.elems);
      for (int c = 0; c < chunks; ++c) {
        const Segment ch = plans[i].chunk_of(seg, c);
        max_abs = std::max(
            max_abs, encode_chunk(wire, std::span<const float>(buffers[i]).subspan(ch.offset_elems, ch.elems),
                                  payload));
        staged[i].insert(staged[i].end(), payload.begin(), payload.end());
      }
    }
    for (int i = 0; i < n; ++i) {
      const int from = (i + n - 1) % n;
      const Segment seg = plans[i].recv_segment(s);
      if (seg.elems == 0) continue;
      const bool combine = plans[i].recv_combines(s);
      std::size_t cursor = 0;
      const int chunks = plans[i].chunks_for(seg.elems);
      for (int c = 0; c < chunks; ++c) {
        const Segment ch = plans[i].chunk_of(seg, c);
        const std::size_t nbytes = wire_payload_bytes(wire, ch.elems);
        decode_chunk(wire, std::span<const std::uint8_t>(staged[from]).subspan(cursor, nbytes),
                     std::span<float>(buffers[i]).subspan(ch.offset_elems, ch.elems), combine, op);
        cursor += nbytes;
      }
    }
  }
  return max_abs;
}

}  // namespace gsync

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
#include <catch2/catch.hpp>

#include <map>
#include <random>

#include "gsync/collectives.hpp"
#include "test_util.hpp"

using namespace gsync;
using namespace gsync_test;

TEST_CASE("ring segments tile the buffer exactly and differ by at most one element") {
  // 10 bytes over 3 ranks: balanced split 4,3,3.
  const RingPlan plan = build_ring_schedule(CollectiveKind::Allreduce, 3, 10, 4);
  std::size_t total = 0;
  std::size_t lo = 10, hi = 0;
  for (int k = 0; k < 3; ++k) {
    const Segment s = plan.segment(k);
    CHECK(s.offset_elems == total);
    total += s.elems;
    lo = std::min(lo, s.elems);
    hi = std::max(hi, s.elems);
  }
  CHECK(total == 10);
  CHECK(hi - lo <= 1);
  CHECK(plan.segment(0).elems == 4);
  // chunking within a segment: last chunk short
  CHECK(plan.chunks_for(plan.segment(0).elems) == 1);  // 4 bytes / chunk 4
  const RingPlan fine = build_ring_schedule(CollectiveKind::Allreduce, 3, 10, 3);
  CHECK(fine.chunks_for(fine.segment(0).elems) == 2);  // 3 + 1
  CHECK(fine.chunk_of(fine.segment(0), 1).elems == 1);
}

TEST_CASE("allreduce schedule: 2(n-1) phases per segment, ring-neighbor consistency") {
  const int n = 5;
  std::map<int, int> segment_transfers;
  for (int i = 0; i < n; ++i) {
    const RingPlan plan(CollectiveKind::Allreduce, n, i, 100, 4, 65536);
    REQUIRE(plan.num_steps() == 2 * (n - 1));
    for (const auto& e : plan.entries()) {
      CHECK(e.send_to == (i + 1) % n);
      CHECK(e.recv_from == (i + n - 1) % n);
      // count transfers per segment (by matching offsets)
      for (int k = 0; k < n; ++k)
        if (plan.segment(k).offset_elems == e.send.offset_elems && e.send.elems > 0)
          segment_transfers[k]++;
    }
  }
  for (int k = 0; k < n; ++k) CHECK(segment_transfers[k] == 2 * (n - 1));
}

TEST_CASE("n=1 schedules are empty") {
  const RingPlan plan(CollectiveKind::Allreduce, 1, 0, 64, 4, 1024);
  CHECK(plan.num_steps() == 0);
  CHECK(plan.total_send_chunks() == 0);
}

TEST_CASE("reduce_elementwise basics") {
  std::vector<float> acc = {1, 2};
  reduce_elementwise(ReduceOp::Sum, acc, std::vector<float>{3, 4});
  CHECK(acc == std::vector<float>{4, 6});

  std::vector<float> mx = {1, 5};
  reduce_elementwise(ReduceOp::Max, mx, std::vector<float>{2, 3});
  CHECK(mx == std::vector<float>{2, 5});

  std::vector<float> mn = {1, 5};
  reduce_elementwise(ReduceOp::Min, mn, std::vector<float>{2, 3});
  CHECK(mn == std::vector<float>{1, 3});

  std::vector<float> bad = {1};
  CHECK_THROWS_AS(reduce_elementwise(ReduceOp::Sum, bad, std::vector<float>{1, 2}),
                  LengthMismatchError);
}

TEST_CASE("ring-order elementwise reduction is bit-exact vs the sequential oracle") {
  const auto inputs = random_inputs(4, 128, 7);
  std::vector<float> acc = inputs[0];
  for (int r = 1; r < 4; ++r) reduce_elementwise(ReduceOp::Sum, acc, inputs[r]);
  const std::vector<float> want = allreduce_oracle(inputs, ReduceOp::Sum);
  REQUIRE(acc.size() == want.size());
  for (std::size_t i = 0; i < acc.size(); ++i) CHECK(acc[i] == want[i]);
}

TEST_CASE("allreduce_oracle basics") {
  CHECK(allreduce_oracle({{1.5f, -2.0f}}, ReduceOp::Sum) == std::vector<float>{1.5f, -2.0f});
  const std::vector<std::vector<float>> ones(4, std::vector<float>(8, 1.0f));
  CHECK(allreduce_oracle(ones, ReduceOp::Sum) == std::vector<float>(8, 4.0f));
  CHECK_THROWS_AS(allreduce_oracle({{1.0f}, {1.0f, 2.0f}}, ReduceOp::Sum), LengthMismatchError);
}

TEST_CASE("quantize_chunk: zeros, hand case, property bound") {
  const QuantChunk z = quantize_chunk(std::vector<float>{0, 0, 0});
  CHECK(z.scale == 0.0f);
  CHECK(dequantize_chunk(z) == std::vector<float>{0, 0, 0});

  const std::vector<float> v = {-1.0f, 0.5f, 1.0f};
  const QuantChunk q = quantize_chunk(v);
  CHECK(q.scale == Approx(1.0 / 127.0).epsilon(1e-6));
  CHECK(q.payload[0] == -127);
  CHECK(q.payload[1] == 64);  // round(0.5 * 127) = 64
  CHECK(q.payload[2] == 127);
  const std::vector<float> back = dequantize_chunk(q);
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(std::fabs(back[i] - v[i]) <= q.scale / 2.0f * (1.0f + 1e-6f));

  const std::vector<float> r = random_vector(1000, 99);
  const QuantChunk qr = quantize_chunk(r);
  const std::vector<float> rb = dequantize_chunk(qr);
  double worst = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    worst = std::max(worst, std::fabs(static_cast<double>(rb[i]) - r[i]));
  CHECK(worst <= 0.5 / 127.0 + 1e-7);

  CHECK_THROWS_AS(quantize_chunk(std::vector<float>{std::nanf("")}), NonFiniteError);
  CHECK_THROWS_AS(quantize_chunk(std::vector<float>{std::numeric_limits<float>::infinity()}),
                  NonFiniteError);
}

TEST_CASE("fp16 wire codec round-trips representable values") {
  for (float v : {0.0f, 1.0f, -1.0f, 0.5f, 65504.0f, -0.0625f}) {
    CHECK(fp16_bits_to_fp32(fp32_to_fp16_bits(v)) == v);
  }
  // round-to-nearest-even stays within half an ulp
  const std::vector<float> r = random_vector(500, 5);
  for (float v : r) {
    const float back = fp16_bits_to_fp32(fp32_to_fp16_bits(v));
    CHECK(std::fabs(back - v) <= std::fabs(v) * 0.0005f + 1e-7f);
  }
}

TEST_CASE("in-process ring execution matches the sequential oracle") {
  for (int n : {1, 2, 3, 4, 5, 8}) {
    for (std::size_t len : {std::size_t(1), std::size_t(7), std::size_t(64), std::size_t(1000)}) {
      auto buffers = random_inputs(n, len, 1234 + n * 17 + len);
      const auto want = allreduce_oracle(buffers, ReduceOp::Sum);
      run_collective_inprocess(CollectiveKind::Allreduce, ReduceOp::Sum, Precision::FP32, 64, buffers);
      for (int r = 0; r < n; ++r) {
        INFO("n=" << n << " len=" << len << " rank=" << r);
        CHECK(max_rel_err(buffers[r], want) < 1e-6);
      }
    }
  }
}

TEST_CASE("reduce-scatter leaves each rank owning the reduced segment, in place") {
  const int n = 4;
  auto buffers = random_inputs(n, 16, 42);
  const auto want = allreduce_oracle(buffers, ReduceOp::Sum);
  auto scattered = buffers;
  run_collective_inprocess(CollectiveKind::ReduceScatter, ReduceOp::Sum, Precision::FP32, 4096,
                           scattered);
  for (int r = 0; r < n; ++r) {
    const Segment seg = ring_segment(16, n, r);
    for (std::size_t i = 0; i < seg.elems; ++i) {
      CHECK(scattered[r][seg.offset_elems + i] ==
            Approx(want[seg.offset_elems + i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("allgather distributes every pre-placed block to all ranks") {
  const int n = 4;
  const std::size_t len = 12;
  std::vector<std::vector<float>> buffers(n, std::vector<float>(len, 0.0f));
  std::vector<float> want(len);
  for (int r = 0; r < n; ++r) {
    const Segment seg = ring_segment(len, n, r);
    for (std::size_t i = 0; i < seg.elems; ++i) {
      const float v = static_cast<float>(r * 100 + static_cast<int>(i));
      buffers[r][seg.offset_elems + i] = v;
      want[seg.offset_elems + i] = v;
    }
  }
  run_collective_inprocess(CollectiveKind::Allgather, ReduceOp::Sum, Precision::FP32, 8, buffers);
  for (int r = 0; r < n; ++r) CHECK(buffers[r] == want);
}

TEST_CASE("broadcast propagates the root buffer along the chain") {
  const int n = 5;
  std::vector<std::vector<float>> buffers(n, std::vector<float>(33, -1.0f));
  const auto rootbuf = random_vector(33, 3);
  buffers[2] = rootbuf;
  run_collective_inprocess(CollectiveKind::Broadcast, ReduceOp::Sum, Precision::FP32, 16, buffers,
                           /*root_index=*/2);
  for (int r = 0; r < n; ++r) CHECK(buffers[r] == rootbuf);
}

TEST_CASE("chunk size does not change FP32/FP16 results, bit for bit") {
  for (Precision wire : {Precision::FP32, Precision::FP16}) {
    for (int n : {2, 3, 5}) {
      const std::size_t len = 501;
      auto a = random_inputs(n, len, 77);
      auto b = a;
      auto c = a;
      run_collective_inprocess(CollectiveKind::Allreduce, ReduceOp::Sum, wire, 1024, a);
      run_collective_inprocess(CollectiveKind::Allreduce, ReduceOp::Sum, wire, 65536, b);
      run_collective_inprocess(CollectiveKind::Allreduce, ReduceOp::Sum, wire, len * 4, c);
      for (int r = 0; r < n; ++r) {
        CHECK(std::memcmp(a[r].data(), b[r].data(), len * 4) == 0);
        CHECK(std::memcmp(a[r].data(), c[r].data(), len * 4) == 0);
      }
    }
  }
}

TEST_CASE("int8 wire allreduce respects the n*R/127 error bound") {
  for (int n : {2, 4, 8}) {
    auto buffers = random_inputs(n, 256, 31 + n);
    const auto want = allreduce_oracle(buffers, ReduceOp::Sum);
    const double r_max = run_collective_inprocess(CollectiveKind::Allreduce, ReduceOp::Sum,
                                                  Precision::INT8, 256, buffers);
    REQUIRE(r_max > 0.0);
    const double bound = n * r_max / 127.0;
    for (int r = 0; r < n; ++r) {
      double worst = 0.0;
      for (std::size_t i = 0; i < want.size(); ++i)
        worst = std::max(worst, std::fabs(static_cast<double>(buffers[r][i]) - want[i]));
      CHECK(worst <= bound);
    }
  }
}

TEST_CASE("barrier plan has 2(n-1) empty chunks and no payload bytes") {
  const RingPlan plan(CollectiveKind::Barrier, 4, 1, 0, 1, 65536);
  CHECK(plan.num_steps() == 6);
  CHECK(plan.total_send_chunks() == 6);
  CHECK(plan.send_segment(0).elems == 0);
}

TEST_CASE("randomized ring configurations stay oracle-exact") {
  std::mt19937_64 rng(20260808);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 8);
    const std::size_t len = 1 + rng() % 1500;
    const std::size_t chunk = 4 + rng() % 4096;
    const CollectiveKind kind =
        trial % 3 == 0 ? CollectiveKind::ReduceScatter : CollectiveKind::Allreduce;
    auto buffers = random_inputs(n, len, 50000 + trial);
    const auto want = allreduce_oracle(buffers, ReduceOp::Sum);
    run_collective_inprocess(kind, ReduceOp::Sum, Precision::FP32, chunk, buffers);
    for (int r = 0; r < n; ++r) {
      if (kind == CollectiveKind::Allreduce) {
        INFO("trial " << trial << " n=" << n << " len=" << len << " chunk=" << chunk);
        REQUIRE(max_rel_err(buffers[r], want) < 1e-6);
      } else {
        const Segment seg = ring_segment(len, n, r);
        for (std::size_t i = 0; i < seg.elems; ++i) {
          const double denom = std::max(1.0f, std::fabs(want[seg.offset_elems + i]));
          REQUIRE(std::fabs(buffers[r][seg.offset_elems + i] - want[seg.offset_elems + i]) / denom <
                  1e-6);
        }
      }
    }
  }
}

TEST_CASE("wire payload sizing: int8 carries a 4-byte scale") {
  CHECK(wire_payload_bytes(Precision::FP32, 10) == 40);
  CHECK(wire_payload_bytes(Precision::FP16, 10) == 20);
  CHECK(wire_payload_bytes(Precision::INT8, 10) == 14);
  CHECK(wire_payload_bytes(Precision::INT8, 0) == 0);
}

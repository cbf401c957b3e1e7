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

#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <fstream>
#include <thread>

#include "gsync/sim.hpp"
#include "gsync/socket_backend.hpp"
#include "test_util.hpp"

using namespace gsync;
using namespace gsync_test;

namespace {

std::uint16_t next_base_port() {
  static std::atomic<std::uint16_t> cursor{static_cast<std::uint16_t>(21000 + (::getpid() % 67) * 128)};
  const std::uint16_t base = find_free_port_base(8, cursor.load());
  cursor.store(static_cast<std::uint16_t>(base + 8));
  return base;
}

std::vector<Endpoint> local_endpoints(int world, std::uint16_t base) {
  std::vector<Endpoint> eps;
  for (int r = 0; r < world; ++r) eps.push_back({"127.0.0.1", static_cast<std::uint16_t>(base + r)});
  return eps;
}

/// Runs fn(rank) on `world` threads; reports every failure.
void run_ranks(int world, const std::function<void(int)>& fn) {
  std::vector<std::thread> threads;
  std::vector<std::string> errors(world);
  for (int r = 0; r < world; ++r) {
    threads.emplace_back([&, r] {
      try {
        fn(r);
      } catch (const std::exception& e) {
        errors[r] = e.what();
      } catch (...) {
        errors[r] = "unknown exception";
      }
    });
  }
  for (auto& t : threads) t.join();
  std::string all;
  for (int r = 0; r < world; ++r)
    if (!errors[r].empty()) all += "rank " + std::to_string(r) + ": " + errors[r] + "; ";
  if (!all.empty()) throw std::runtime_error(all);
}

CommGroup all_ranks(int n, int me) {
  CommGroup g;
  for (int r = 0; r < n; ++r) g.ranks.push_back(r);
  g.my_index = me;
  return g;
}

}  // namespace

TEST_CASE("wire header is 27 bytes and round-trips") {
  WireHeader h;
  h.request_tag = 0x0123456789abcdefull;
  h.chunk_index = 42;
  h.total_chunks = 99;
  h.dtype = static_cast<std::uint8_t>(Precision::INT8);
  h.payload_len = 65536;
  std::uint8_t buf[WireHeader::kSize];
  static_assert(WireHeader::kSize == 27);
  h.encode(buf);
  CHECK(buf[0] == 0x47);
  CHECK(buf[1] == 0x53);
  CHECK(buf[2] == 0x59);
  CHECK(buf[3] == 0x4E);
  CHECK(buf[4] == 1);
  const WireHeader d = WireHeader::decode(buf);
  CHECK(d.request_tag == h.request_tag);
  CHECK(d.chunk_index == 42);
  CHECK(d.total_chunks == 99);
  CHECK(d.dtype == h.dtype);
  CHECK(d.payload_len == 65536);
}

TEST_CASE("corrupt headers are rejected") {
  WireHeader h;
  std::uint8_t buf[WireHeader::kSize];
  h.encode(buf);
  std::uint8_t bad_magic[WireHeader::kSize];
  std::memcpy(bad_magic, buf, sizeof buf);
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(WireHeader::decode(bad_magic), HeaderCorruptError);
  std::uint8_t bad_version[WireHeader::kSize];
  std::memcpy(bad_version, buf, sizeof buf);
  bad_version[4] = 9;
  CHECK_THROWS_AS(WireHeader::decode(bad_version), HeaderCorruptError);
}

TEST_CASE("a zero-length Barrier chunk is exactly 27 bytes on the wire") {
  int sv[2];
  REQUIRE(::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) == 0);
  WireHeader h;
  h.request_tag = 7;
  h.payload_len = 0;
  sock_send_chunk(sv[0], h, {});
  ::shutdown(sv[0], SHUT_WR);
  std::uint8_t raw[64];
  std::size_t got = 0;
  while (got < sizeof raw) {
    const ssize_t n = ::read(sv[1], raw + got, sizeof raw - got);
    if (n <= 0) break;
    got += static_cast<std::size_t>(n);
  }
  CHECK(got == 27);
  const auto [hdr, payload] = [&] {
    int sv2[2];
    REQUIRE(::socketpair(AF_UNIX, SOCK_STREAM, 0, sv2) == 0);
    sock_send_chunk(sv2[0], h, {});
    auto out = sock_recv_chunk(sv2[1]);
    ::close(sv2[0]);
    ::close(sv2[1]);
    return out;
  }();
  CHECK(hdr.request_tag == 7);
  CHECK(payload.empty());
  ::close(sv[0]);
  ::close(sv[1]);
}

TEST_CASE("a 64 KiB FP32 chunk carries payload_len 65536 and the FP32 dtype code") {
  int sv[2];
  REQUIRE(::socketpair(AF_UNIX, SOCK_STREAM, 0, sv) == 0);
  const std::vector<float> data = random_vector(16384, 11);
  std::vector<std::uint8_t> payload;
  encode_chunk(Precision::FP32, data, payload);
  REQUIRE(payload.size() == 65536);
  WireHeader h;
  h.request_tag = 9;
  h.dtype = static_cast<std::uint8_t>(Precision::FP32);
  h.payload_len = static_cast<std::uint32_t>(payload.size());
  std::thread sender([&] { sock_send_chunk(sv[0], h, payload); });
  const auto [hdr, got] = sock_recv_chunk(sv[1]);
  sender.join();
  CHECK(hdr.payload_len == 65536);
  CHECK(hdr.dtype == 0);
  CHECK(got == payload);
  ::close(sv[0]);
  ::close(sv[1]);
}

TEST_CASE("hostfile parsing: explicit ports, default ports, shortfall") {
  const std::string path = "/tmp/gsync_hosts_test.txt";
  {
    std::ofstream f(path);
    f << "10.0.0.1:5000\n";
    f << "10.0.0.2\n";
    f << "# comment\n";
    f << "10.0.0.3:7777\n";
  }
  const auto eps = parse_hostfile(path, 3, 9000);
  REQUIRE(eps.size() == 3);
  CHECK(eps[0].host == "10.0.0.1");
  CHECK(eps[0].port == 5000);
  CHECK(eps[1].host == "10.0.0.2");
  CHECK(eps[1].port == 9001);  // base + line index
  CHECK(eps[2].port == 7777);
  CHECK_THROWS_AS(parse_hostfile(path, 4, 9000), ConfigError);
}

TEST_CASE("world of one: empty mesh, immediate success") {
  const SocketMesh mesh(0, 1, local_endpoints(1, next_base_port()));
  CHECK(mesh.connection_count() == 0);
}

TEST_CASE("four ranks build a full mesh: each holds three connections") {
  const auto eps = local_endpoints(4, next_base_port());
  std::atomic<int> total{0};
  run_ranks(4, [&](int r) {
    SocketMesh mesh(r, 4, eps);
    total += mesh.connection_count();
  });
  CHECK(total.load() == 12);  // 6 undirected links, counted from both ends
}

TEST_CASE("socket allreduce matches the oracle and the in-process executor bit for bit") {
  const int world = 4;
  const std::size_t len = 1000;
  const std::size_t chunk = 1024;
  const auto eps = local_endpoints(world, next_base_port());
  const auto inputs = random_inputs(world, len, 314);
  const auto want = allreduce_oracle(inputs, ReduceOp::Sum);
  auto reference = inputs;
  run_collective_inprocess(CollectiveKind::Allreduce, ReduceOp::Sum, Precision::FP32, chunk,
                           reference);

  std::vector<std::vector<float>> results(world);
  run_ranks(world, [&](int r) {
    SocketRuntimeOptions opt;
    opt.chunk_bytes = chunk;
    SocketRuntime rt(r, world, eps, opt);
    std::vector<float> buf = inputs[r];
    CollectiveDesc d;
    d.group = all_ranks(world, r);
    d.elem_count = buf.size();
    d.buffer = buf.data();
    d.priority = {PriorityClassKind::WeightGradient, 0};
    const Handle h = rt.submit(d);
    const CompletionStatus st = rt.wait(h);
    if (!st.ok()) throw std::runtime_error("allreduce failed: " + st.diagnostic);
    results[r] = buf;
    rt.shutdown(true);
  });
  for (int r = 0; r < world; ++r) {
    CHECK(max_rel_err(results[r], want) < 1e-6);
    CHECK(std::memcmp(results[r].data(), reference[r].data(), len * 4) == 0);
  }
}

TEST_CASE("socket and simulated backends produce identical FP32 buffers") {
  const int world = 3;
  const std::size_t len = 257;
  const std::size_t chunk = 256;
  const auto inputs = random_inputs(world, len, 2718);

  auto sim_result = inputs;
  {
    SimConfig cfg;
    cfg.world = world;
    cfg.beta = 1e9;
    cfg.chunk_bytes = chunk;
    cfg.carry_payloads = true;
    SimWorld sim(cfg);
    for (int r = 0; r < world; ++r) {
      CollectiveDesc d;
      d.group = all_ranks(world, r);
      d.elem_count = len;
      d.buffer = sim_result[r].data();
      sim.rank(r).submit(d);
    }
    sim.run_until_idle();
  }

  const auto eps = local_endpoints(world, next_base_port());
  std::vector<std::vector<float>> sock_result(world);
  run_ranks(world, [&](int r) {
    SocketRuntimeOptions opt;
    opt.chunk_bytes = chunk;
    SocketRuntime rt(r, world, eps, opt);
    std::vector<float> buf = inputs[r];
    CollectiveDesc d;
    d.group = all_ranks(world, r);
    d.elem_count = len;
    d.buffer = buf.data();
    if (!rt.wait(rt.submit(d)).ok()) throw std::runtime_error("allreduce failed");
    sock_result[r] = buf;
    rt.shutdown(true);
  });
  for (int r = 0; r < world; ++r)
    CHECK(std::memcmp(sock_result[r].data(), sim_result[r].data(), len * 4) == 0);
}

TEST_CASE("int8 socket allreduce stays inside the n*R/127 bound") {
  const int world = 4;
  const std::size_t len = 512;
  const auto eps = local_endpoints(world, next_base_port());
  const auto inputs = random_inputs(world, len, 55);
  const auto want = allreduce_oracle(inputs, ReduceOp::Sum);
  std::vector<std::vector<float>> results(world);
  std::vector<double> r_values(world);
  run_ranks(world, [&](int r) {
    SocketRuntimeOptions opt;
    opt.chunk_bytes = 128;
    SocketRuntime rt(r, world, eps, opt);
    std::vector<float> buf = inputs[r];
    CollectiveDesc d;
    d.group = all_ranks(world, r);
    d.elem_count = len;
    d.buffer = buf.data();
    d.wire = Precision::INT8;
    const CompletionStatus st = rt.wait(rt.submit(d));
    if (!st.ok()) throw std::runtime_error("int8 allreduce failed: " + st.diagnostic);
    results[r] = buf;
    r_values[r] = st.quant_max_abs;
    rt.shutdown(true);
  });
  const double r_max = *std::max_element(r_values.begin(), r_values.end());
  REQUIRE(r_max > 0.0);
  const double bound = world * r_max / 127.0;
  for (int r = 0; r < world; ++r) {
    double worst = 0.0;
    for (std::size_t i = 0; i < len; ++i)
      worst = std::max(worst, std::fabs(static_cast<double>(results[r][i]) - want[i]));
    CHECK(worst <= bound);
  }
}

TEST_CASE("barrier completes across sockets with zero payload bytes") {
  const int world = 3;
  const auto eps = local_endpoints(world, next_base_port());
  run_ranks(world, [&](int r) {
    SocketRuntime rt(r, world, eps);
    CollectiveDesc d;
    d.kind = CollectiveKind::Barrier;
    d.group = all_ranks(world, r);
    d.elem_count = 0;
    if (!rt.wait(rt.submit(d)).ok()) throw std::runtime_error("barrier failed");
    rt.shutdown(true);
  });
}

TEST_CASE("a higher-priority activation overtakes a large bulk transfer on sockets") {
  const int world = 2;
  const auto eps = local_endpoints(world, next_base_port());
  std::vector<char> bulk_done_first(world, 1);
  run_ranks(world, [&](int r) {
    SocketRuntimeOptions opt;
    opt.chunk_bytes = 16384;
    SocketRuntime rt(r, world, eps, opt);
    std::vector<float> bulk = random_vector(4 << 20, 17 + r);  // 16 MiB
    std::vector<float> act = random_vector(512, 18 + r);
    CollectiveDesc db;
    db.group = all_ranks(world, r);
    db.elem_count = bulk.size();
    db.buffer = bulk.data();
    db.priority = {PriorityClassKind::Bulk, 0};
    const Handle hb = rt.submit(db);
    CollectiveDesc da;
    da.group = all_ranks(world, r);
    da.elem_count = act.size();
    da.buffer = act.data();
    da.priority = {PriorityClassKind::Activation, 0};
    const Handle ha = rt.submit(da);
    if (!rt.wait(ha).ok()) throw std::runtime_error("activation failed");
    bulk_done_first[r] = rt.test(hb);  // the 16 MiB exchange cannot have finished yet
    if (!rt.wait(hb).ok()) throw std::runtime_error("bulk failed");
    rt.shutdown(true);
  });
  CHECK_FALSE(bulk_done_first[0]);
  CHECK_FALSE(bulk_done_first[1]);
}

TEST_CASE("multiple progress engines still produce oracle-exact collectives") {
  const int world = 4;
  const std::size_t len = 900;
  const auto eps = local_endpoints(world, next_base_port());
  const auto a_in = random_inputs(world, len, 611);
  const auto b_in = random_inputs(world, len, 612);
  const auto want_a = allreduce_oracle(a_in, ReduceOp::Sum);
  const auto want_b = allreduce_oracle(b_in, ReduceOp::Sum);
  std::vector<std::vector<float>> a_out(world), b_out(world);
  run_ranks(world, [&](int r) {
    SocketRuntimeOptions opt;
    opt.chunk_bytes = 512;
    opt.progress_threads = 3;  // one engine per peer connection
    SocketRuntime rt(r, world, eps, opt);
    if (rt.progress_engines() != 3) throw std::runtime_error("engine count wrong");
    std::vector<float> a = a_in[r];
    std::vector<float> b = b_in[r];
    CollectiveDesc da;
    da.group = all_ranks(world, r);
    da.elem_count = len;
    da.buffer = a.data();
    da.priority = {PriorityClassKind::WeightGradient, 1};
    CollectiveDesc db = da;
    db.buffer = b.data();
    db.priority = {PriorityClassKind::WeightGradient, 2};
    const Handle ha = rt.submit(da);
    const Handle hb = rt.submit(db);
    if (!rt.wait(ha).ok() || !rt.wait(hb).ok()) throw std::runtime_error("allreduce failed");
    a_out[r] = a;
    b_out[r] = b;
    rt.shutdown(true);
  });
  for (int r = 0; r < world; ++r) {
    CHECK(max_rel_err(a_out[r], want_a) < 1e-6);
    CHECK(max_rel_err(b_out[r], want_b) < 1e-6);
  }
}

TEST_CASE("fp16 socket allreduce matches the oracle to half precision") {
  const int world = 2;
  const std::size_t len = 700;
  const auto eps = local_endpoints(world, next_base_port());
  const auto inputs = random_inputs(world, len, 88);
  const auto want = allreduce_oracle(inputs, ReduceOp::Sum);
  std::vector<std::vector<float>> results(world);
  run_ranks(world, [&](int r) {
    SocketRuntime rt(r, world, eps);
    std::vector<float> buf = inputs[r];
    CollectiveDesc d;
    d.group = all_ranks(world, r);
    d.elem_count = len;
    d.buffer = buf.data();
    d.wire = Precision::FP16;
    if (!rt.wait(rt.submit(d)).ok()) throw std::runtime_error("fp16 allreduce failed");
    results[r] = buf;
    rt.shutdown(true);
  });
  for (int r = 0; r < world; ++r)
    for (std::size_t i = 0; i < len; ++i)
      CHECK(std::fabs(results[r][i] - want[i]) <= std::fabs(want[i]) * 2e-3 + 2e-3);
}

TEST_CASE("a mismatched handshake version is rejected, naming the problem") {
  const auto eps = local_endpoints(2, next_base_port());
  std::string error;
  std::thread acceptor([&] {
    try {
      SocketMesh mesh(1, 2, eps, 5.0);  // expects rank 0 to dial in
    } catch (const HandshakeError& e) {
      error = e.what();
    }
  });
  // Dial rank 1's listener with a corrupted version byte.
  int fd = -1;
  for (int tries = 0; tries < 200 && fd < 0; ++tries) {
    fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(eps[1].port);
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      ::close(fd);
      fd = -1;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  }
  REQUIRE(fd >= 0);
  std::uint8_t hello[9] = {0x47, 0x53, 0x59, 0x4E, 9 /* bad version */, 0, 0, 0, 0};
  REQUIRE(::write(fd, hello, sizeof hello) == 9);
  acceptor.join();
  ::close(fd);
  CHECK(error.find("version") != std::string::npos);
}

TEST_CASE("submit, test and wait are safe from concurrent application threads") {
  const int world = 2;
  const auto eps = local_endpoints(world, next_base_port());
  run_ranks(world, [&](int r) {
    SocketRuntime rt(r, world, eps);
    std::vector<std::vector<float>> bufs(8, std::vector<float>(256, 1.0f));
    std::vector<Handle> handles(8);
    // One thread issues the collectives in a fixed order; another hammers
    // test() on whatever has been submitted so far.
    std::atomic<int> submitted{0};
    std::thread submitter([&] {
      for (int i = 0; i < 8; ++i) {
        CollectiveDesc d;
        d.group = all_ranks(world, r);
        d.elem_count = bufs[i].size();
        d.buffer = bufs[i].data();
        d.priority = {PriorityClassKind::WeightGradient, i};
        handles[i] = rt.submit(d);
        submitted.store(i + 1);
      }
    });
    std::thread poller([&] {
      for (int spins = 0; spins < 20000; ++spins) {
        const int n = submitted.load();
        for (int i = 0; i < n; ++i) rt.test(handles[i]);
      }
    });
    submitter.join();
    poller.join();
    for (int i = 0; i < 8; ++i)
      if (!rt.wait(handles[i]).ok()) throw std::runtime_error("wait failed");
    for (int i = 0; i < 8; ++i)
      for (float v : bufs[i])
        if (v != 2.0f) throw std::runtime_error("bad reduction value");
    rt.shutdown(true);
  });
}

TEST_CASE("a lost participant fails the whole runtime with a diagnostic") {
  const int world = 2;
  const auto eps = local_endpoints(world, next_base_port());
  run_ranks(world, [&](int r) {
    if (r == 1) {
      SocketRuntime rt(1, world, eps);
      rt.shutdown(false);  // leave without participating
      return;
    }
    SocketRuntime rt(0, world, eps);
    std::vector<float> buf(4096, 1.0f);
    CollectiveDesc d;
    d.group = all_ranks(world, 0);
    d.elem_count = buf.size();
    d.buffer = buf.data();
    const CompletionStatus st = rt.wait(rt.submit(d));
    if (st.state != RequestState::Failed) throw std::runtime_error("expected Failed status");
    if (st.diagnostic.empty()) throw std::runtime_error("expected a diagnostic");
    rt.shutdown(false);
  });
}

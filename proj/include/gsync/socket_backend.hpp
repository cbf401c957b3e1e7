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

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <fstream>
#include <mutex>
#include <thread>
#include <unordered_map>
#include <vector>

#include "gsync/collectives.hpp"
#include "gsync/errors.hpp"
#include "gsync/scheduler.hpp"
#include "gsync/wire.hpp"

namespace gsync {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

/// Hostfile: one endpoint per line, line r = rank r; either "host:port" or a
/// bare "host" (port defaults to base_port + rank).
inline std::vector<Endpoint> parse_hostfile(const std::string& path, int world_size,
                                            std::uint16_t base_port) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open hostfile '" + path + "'");
  std::vector<Endpoint> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    Endpoint ep;
    const auto colon = line.rfind(':');
    if (colon == std::string::npos) {
      ep.host = line;
      ep.port = static_cast<std::uint16_t>(base_port + out.size());
    } else {
      ep.host = line.substr(0, colon);
      ep.port = static_cast<std::uint16_t>(std::stoi(line.substr(colon + 1)));
    }
    out.push_back(ep);
  }
  if (static_cast<int>(out.size()) < world_size)
    throw ConfigError("hostfile lists " + std::to_string(out.size()) + " endpoints, need " +
                      std::to_string(world_size));
  out.resize(world_size);
  return out;
}

namespace detail {

inline void write_all(int fd, const void* data, std::size_t len) {
  const char* p = static_cast<const char*>(data);
  while (len > 0) {
    const ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) {
        pollfd pf{fd, POLLOUT, 0};
        ::poll(&pf, 1, 100);
        continue;
      }
      throw PeerClosedError(std::string("send failed: ") + std::strerror(errno));
    }
    p += n;
    len -= static_cast<std::size_t>(n);
  }
}

inline void read_all(int fd, void* data, std::size_t len) {
  char* p = static_cast<char*>(data);
  while (len > 0) {
    const ssize_t n = ::recv(fd, p, len, 0);
    if (n == 0) throw PeerClosedError("peer closed connection");
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) {
        pollfd pf{fd, POLLIN, 0};
        ::poll(&pf, 1, 100);
        continue;
      }
      throw PeerClosedError(std::string("recv failed: ") + std::strerror(errno));
    }
    p += n;
    len -= static_cast<std::size_t>(n);
  }
}

inline void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

inline void set_nonblocking(int fd, bool on) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, on ? (flags | O_NONBLOCK) : (flags & ~O_NONBLOCK));
}

}  // namespace detail

/// True when `count` consecutive ports starting at `base` can be bound on
/// loopback right now. Single-host harnesses use this to pick rendezvous
/// ports without racing other services.
inline bool ports_bindable(std::uint16_t base, int count) {
  std::vector<int> fds;
  bool ok = true;
  for (int i = 0; i < count && ok; ++i) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) {
      ok = false;
      break;
    }
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(static_cast<std::uint16_t>(base + i));
    ok = ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0;
    fds.push_back(fd);
  }
  for (int fd : fds) ::close(fd);
  return ok;
}

/// Finds a base port such that [base, base+count) is currently bindable.
inline std::uint16_t find_free_port_base(int count, std::uint16_t start = 21000) {
  for (std::uint16_t base = start; base < 64000; base = static_cast<std::uint16_t>(base + count + 3)) {
    if (ports_bindable(base, count)) return base;
  }
  throw ConfigError("no free port range found");
}

/// Sends one framed chunk, resuming partial writes. Blocking variant for
/// handshakes, benchmarks and tests; the runtime's progress engine keeps its
/// own non-blocking path.
inline void sock_send_chunk(int fd, const WireHeader& header,
                            std::span<const std::uint8_t> payload) {
  if (payload.size() != header.payload_len)
    throw LengthMismatchError("sock_send_chunk: payload_len mismatch");
  std::uint8_t hdr[WireHeader::kSize];
  header.encode(hdr);
  detail::write_all(fd, hdr, sizeof hdr);
  if (!payload.empty()) detail::write_all(fd, payload.data(), payload.size());
}

/// Receives one framed chunk (header validated, payload resumed internally).
inline std::pair<WireHeader, std::vector<std::uint8_t>> sock_recv_chunk(int fd) {
  std::uint8_t hdr[WireHeader::kSize];
  detail::read_all(fd, hdr, sizeof hdr);
  const WireHeader h = WireHeader::decode(hdr);
  std::vector<std::uint8_t> payload(h.payload_len);
  if (h.payload_len > 0) detail::read_all(fd, payload.data(), payload.size());
  return {h, std::move(payload)};
}

/// Fully connected TCP mesh over loopback/LAN. Rank r listens on its
/// hostfile endpoint, accepts connections from ranks below it and dials ranks
/// above it; each connection starts with a (magic, version, rank) handshake
/// in both directions.
class SocketMesh {
 public:
  SocketMesh() = default;
  SocketMesh(int rank, int world_size, const std::vector<Endpoint>& endpoints,
             double timeout_s = 15.0)
      : rank_(rank), world_(world_size) {
    if (rank < 0 || rank >= world_size) throw ConfigError("rank out of range");
    if (static_cast<int>(endpoints.size()) < world_size)
      throw ConfigError("endpoint list shorter than world size");
    fds_.assign(world_size, -1);
    if (world_size == 1) return;
    const auto deadline = std::chrono::steady_clock::now() +
                          std::chrono::milliseconds(static_cast<long>(timeout_s * 1000));

    int listener = -1;
    if (rank > 0) listener = listen_on(endpoints[rank].port);
    try {
      for (int peer = rank + 1; peer < world_size; ++peer)
        fds_[peer] = dial(endpoints[peer], peer, deadline);
      for (int i = 0; i < rank; ++i) accept_one(listener, deadline);
    } catch (...) {
      if (listener >= 0) ::close(listener);
      close_all();
      throw;
    }
    if (listener >= 0) ::close(listener);
  }

  SocketMesh(const SocketMesh&) = delete;
  SocketMesh& operator=(const SocketMesh&) = delete;
  SocketMesh(SocketMesh&& other) noexcept { *this = std::move(other); }
  SocketMesh& operator=(SocketMesh&& other) noexcept {
    close_all();
    rank_ = other.rank_;
    world_ = other.world_;
    fds_ = std::move(other.fds_);
    other.fds_.clear();
    return *this;
  }
  ~SocketMesh() { close_all(); }

  int rank() const { return rank_; }
  int world_size() const { return world_; }
  int fd(int peer) const { return fds_.at(peer); }
  int connection_count() const {
    int n = 0;
    for (int f : fds_)
      if (f >= 0) ++n;
    return n;
  }

 private:
  static constexpr std::size_t kHelloSize = 9;  // magic(4) + version(1) + rank(4 LE)

  static void encode_hello(std::uint8_t out[kHelloSize], int rank) {
    std::memcpy(out, kWireMagic.data(), 4);
    out[4] = kWireVersion;
    const std::uint32_t r = static_cast<std::uint32_t>(rank);
    out[5] = static_cast<std::uint8_t>(r);
    out[6] = static_cast<std::uint8_t>(r >> 8);
    out[7] = static_cast<std::uint8_t>(r >> 16);
    out[8] = static_cast<std::uint8_t>(r >> 24);
  }

  static int decode_hello(const std::uint8_t in[kHelloSize]) {
    if (std::memcmp(in, kWireMagic.data(), 4) != 0)
      throw HandshakeError("handshake: bad magic from peer");
    if (in[4] != kWireVersion)
      throw HandshakeError("handshake: unsupported version " + std::to_string(in[4]));
    return static_cast<int>(static_cast<std::uint32_t>(in[5]) |
                            (static_cast<std::uint32_t>(in[6]) << 8) |
                            (static_cast<std::uint32_t>(in[7]) << 16) |
                            (static_cast<std::uint32_t>(in[8]) << 24));
  }

  int listen_on(std::uint16_t port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw ConfigError("socket() failed");
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(port);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      ::close(fd);
      throw ConfigError("bind to port " + std::to_string(port) + " failed: " +
                        std::strerror(errno));
    }
    ::listen(fd, world_ + 8);
    return fd;
  }

  int dial(const Endpoint& ep, int peer, std::chrono::steady_clock::time_point deadline) {
    while (true) {
      const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
      if (fd < 0) throw ConfigError("socket() failed");
      sockaddr_in addr{};
      addr.sin_family = AF_INET;
      addr.sin_port = htons(ep.port);
      if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) {
        hostent* he = ::gethostbyname(ep.host.c_str());
        if (he == nullptr || he->h_addrtype != AF_INET) {
          ::close(fd);
          throw ConfigError("cannot resolve host '" + ep.host + "'");
        }
        std::memcpy(&addr.sin_addr, he->h_addr_list[0], sizeof addr.sin_addr);
      }
      if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) {
        detail::set_nodelay(fd);
        std::uint8_t hello[kHelloSize];
        encode_hello(hello, rank_);
        detail::write_all(fd, hello, sizeof hello);
        detail::read_all(fd, hello, sizeof hello);
        const int got = decode_hello(hello);
        if (got != peer) {
          ::close(fd);
          throw HandshakeError("handshake: expected rank " + std::to_string(peer) + ", peer says " +
                               std::to_string(got));
        }
        return fd;
      }
      ::close(fd);
      if (std::chrono::steady_clock::now() > deadline)
        throw ConnectTimeoutError("connect to rank " + std::to_string(peer) + " (" + ep.host + ":" +
                                  std::to_string(ep.port) + ") timed out");
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }

  void accept_one(int listener, std::chrono::steady_clock::time_point deadline) {
    while (true) {
      pollfd pf{listener, POLLIN, 0};
      const int pr = ::poll(&pf, 1, 100);
      if (pr > 0) {
        const int fd = ::accept(listener, nullptr, nullptr);
        if (fd < 0) continue;
        detail::set_nodelay(fd);
        std::uint8_t hello[kHelloSize];
        detail::read_all(fd, hello, sizeof hello);
        const int peer = decode_hello(hello);
        if (peer < 0 || peer >= rank_ || fds_[peer] != -1) {
          ::close(fd);
          throw HandshakeError("handshake: unexpected peer rank " + std::to_string(peer));
        }
        encode_hello(hello, rank_);
        detail::write_all(fd, hello, sizeof hello);
        fds_[peer] = fd;
        return;
      }
      if (std::chrono::steady_clock::now() > deadline)
        throw ConnectTimeoutError("timed out waiting for lower-rank connections");
    }
  }

  void close_all() {
    for (int& f : fds_) {
      if (f >= 0) ::close(f);
      f = -1;
    }
  }

  int rank_ = 0;
  int world_ = 1;
  std::vector<int> fds_;
};

struct SocketRuntimeOptions {
  std::size_t chunk_bytes = 65536;
  bool prioritization = true;
  int progress_threads = 1;  // engines; peers partition across them round-robin
  double connect_timeout_s = 15.0;
  double drain_timeout_s = 30.0;
};

/// Real-transport runtime: one process per rank, one or more progress engines
/// that exclusively own the sockets (peer connections partition across
/// engines; a ring request always talks to one fixed neighbor, so every
/// request belongs to exactly one engine). Each engine keeps a single
/// in-flight outgoing chunk and re-picks by priority at every chunk boundary.
/// Any transport failure fails the whole runtime.
class SocketRuntime final : public Runtime {
 public:
  SocketRuntime(int rank, int world_size, const std::vector<Endpoint>& endpoints,
                SocketRuntimeOptions options = {})
      : opts_(options), mesh_(rank, world_size, endpoints, options.connect_timeout_s) {
    if (opts_.progress_threads < 1) throw ConfigError("progress_threads must be >= 1");
    for (int p = 0; p < world_size; ++p) {
      if (mesh_.fd(p) >= 0) detail::set_nonblocking(mesh_.fd(p), true);
    }
    recv_states_.resize(world_size);
    peer_dead_.assign(world_size, false);
    engine_of_peer_.assign(world_size, 0);
    const int engines = std::max(1, std::min(opts_.progress_threads, world_size - 1 > 0 ? world_size - 1 : 1));
    engines_.resize(engines);
    for (int i = 0; i < engines; ++i) engines_[i].id = i;
    int next_engine = 0;
    for (int p = 0; p < world_size; ++p) {
      if (mesh_.fd(p) < 0) continue;
      engine_of_peer_[p] = next_engine;
      engines_[next_engine].peers.push_back(p);
      next_engine = (next_engine + 1) % engines;
    }
    for (auto& e : engines_) {
      if (::pipe(e.wake_pipe) != 0) throw ConfigError("pipe() failed");
      detail::set_nonblocking(e.wake_pipe[0], true);
    }
    for (std::size_t i = 0; i < engines_.size(); ++i)
      engines_[i].thread = std::thread([this, i] { progress_loop(engines_[i]); });
  }

  ~SocketRuntime() override {
    try {
      if (!stopped_) shutdown(false);
    } catch (...) {
    }
    for (auto& e : engines_) {
      if (e.wake_pipe[0] >= 0) ::close(e.wake_pipe[0]);
      if (e.wake_pipe[1] >= 0) ::close(e.wake_pipe[1]);
    }
  }

  int rank() const override { return mesh_.rank(); }
  int world_size() const override { return mesh_.world_size(); }
  int progress_engines() const { return static_cast<int>(engines_.size()); }

  Handle submit(const CollectiveDesc& desc) override {
    std::lock_guard<std::mutex> lk(mu_);
    if (stopped_) throw NotStartedError("runtime is shut down");
    if (failed_) throw TransportError("runtime already failed: " + fail_reason_);
    desc.group.validate();
    if (desc.group.my_rank() != mesh_.rank())
      throw InvalidGroupError("group my_index does not name the local rank");
    for (int r : desc.group.ranks)
      if (r < 0 || r >= mesh_.world_size()) throw InvalidGroupError("group rank out of range");
    if (desc.elem_count == 0 && desc.kind != CollectiveKind::Barrier)
      throw ConfigError("zero-length buffer is only valid for Barrier");
    if (desc.buffer == nullptr && desc.elem_count > 0)
      throw ConfigError("socket runtime requires a data buffer");

    const std::uint64_t sig = group_signature(desc.group);
    const std::uint64_t n = ++tag_counters_[sig];
    const std::uint64_t tag = sig ^ (0x9e3779b97f4a7c15ull * n);
    const std::uint64_t id = next_id_++;
    auto [it, fresh] = requests_.emplace(id, RequestCore(id, tag, desc, opts_.chunk_bytes));
    RequestCore& req = it->second;
    req.priority.cls = desc.priority.cls;
    req.priority.key = desc.priority.key;
    req.priority.seq = submit_seq_++;
    active_.push_back(id);
    by_tag_[tag] = id;

    if (req.transfers_complete()) {
      req.state = RequestState::Done;
      cv_.notify_all();
    } else {
      auto early = early_.find(tag);
      if (early != early_.end()) {
        while (!early->second.empty() && req.recvs_remaining()) {
          auto& [hdr, payload] = early->second.front();
          apply_chunk_locked(req, hdr, payload);
          early->second.pop_front();
        }
        if (early->second.empty()) early_.erase(early);
      }
    }
    wake_all();
    return Handle{id};
  }

  CompletionStatus wait(Handle h) override {
    std::unique_lock<std::mutex> lk(mu_);
    RequestCore& req = find_locked(h);
    if (opts_.prioritization && !req.priority.promoted && req.state != RequestState::Done &&
        req.state != RequestState::Failed) {
      req.priority.promoted = true;
      req.priority.promote_seq = promote_seq_++;
      wake_all();
    }
    cv_.wait(lk, [&] {
      return req.state == RequestState::Done || req.state == RequestState::Failed;
    });
    return {req.state, req.diagnostic, req.quant_max_abs};
  }

  bool test(Handle h) override {
    std::lock_guard<std::mutex> lk(mu_);
    const RequestCore& req = find_locked(h);
    return req.state == RequestState::Done || req.state == RequestState::Failed;
  }

  bool failed() const {
    std::lock_guard<std::mutex> lk(mu_);
    return failed_;
  }

  DrainReport shutdown(bool drain) {
    {
      std::unique_lock<std::mutex> lk(mu_);
      if (stopped_) return last_report_;
      if (drain && !failed_) {
        const auto deadline = std::chrono::steady_clock::now() +
                              std::chrono::milliseconds(static_cast<long>(opts_.drain_timeout_s * 1000));
        const bool drained = cv_.wait_until(lk, deadline, [&] {
          if (failed_) return true;
          for (const auto& [id, req] : requests_)
            if (req.state != RequestState::Done && req.state != RequestState::Failed) return false;
          return true;
        });
        if (!drained) throw DrainTimeoutError("drain timed out with requests pending");
      }
      stopped_ = true;
      for (const auto& [id, req] : requests_) {
        if (req.state == RequestState::Done) {
          last_report_.completed.push_back(id);
        } else {
          last_report_.aborted.push_back(id);
        }
      }
      std::sort(last_report_.completed.begin(), last_report_.completed.end());
      std::sort(last_report_.aborted.begin(), last_report_.aborted.end());
    }
    wake_all();
    for (auto& e : engines_) {
      if (e.thread.joinable()) e.thread.join();
    }
    return last_report_;
  }

 private:
  struct RecvState {
    std::uint8_t header[WireHeader::kSize];
    std::size_t header_got = 0;
    bool have_header = false;
    WireHeader decoded;
    std::vector<std::uint8_t> payload;
    std::size_t payload_got = 0;
  };

  struct OutChunk {
    bool pending = false;
    int peer = -1;
    std::uint64_t request_id = 0;
    std::vector<std::uint8_t> bytes;  // header + payload
    std::size_t written = 0;
  };

  struct Engine {
    int id = 0;
    std::vector<int> peers;
    int wake_pipe[2] = {-1, -1};
    std::thread thread;
    OutChunk out;
    std::uint64_t serving = 0;
  };

  RequestCore& find_locked(Handle h) {
    auto it = requests_.find(h.id);
    if (it == requests_.end()) throw InvalidHandleError("unknown handle " + std::to_string(h.id));
    return it->second;
  }

  static int send_peer_of(const RequestCore& r) {
    const CommGroup& g = r.desc().group;
    return g.ranks[(g.my_index + 1) % g.size()];
  }
  static int recv_peer_of(const RequestCore& r) {
    const CommGroup& g = r.desc().group;
    return g.ranks[(g.my_index + g.size() - 1) % g.size()];
  }

  /// A peer disappearing is fatal only while some unfinished request still
  /// needs bytes from or to it; a rank that drained and left is fine.
  void on_peer_closed(Engine& engine, int peer, const std::string& why) {
    std::lock_guard<std::mutex> lk(mu_);
    peer_dead_[peer] = true;
    bool fatal = engine.out.pending && engine.out.peer == peer;
    for (const auto& [id, req] : requests_) {
      if (req.state == RequestState::Done || req.state == RequestState::Failed) continue;
      if ((req.recvs_remaining() && recv_peer_of(req) == peer) ||
          (req.sends_remaining() && send_peer_of(req) == peer)) {
        fatal = true;
        break;
      }
    }
    if (fatal) fail_all_locked(why);
  }

  void wake_all() {
    const char b = 1;
    for (auto& e : engines_) {
      [[maybe_unused]] ssize_t n = ::write(e.wake_pipe[1], &b, 1);
    }
  }

  void wake_engine(int id) {
    const char b = 1;
    [[maybe_unused]] ssize_t n = ::write(engines_[id].wake_pipe[1], &b, 1);
  }

  void apply_chunk_locked(RequestCore& req, const WireHeader& hdr,
                          const std::vector<std::uint8_t>& payload) {
    const RequestCore::ChunkRef rc = req.peek_recv();
    if (hdr.dtype != static_cast<std::uint8_t>(req.desc().wire))
      throw HeaderCorruptError("chunk dtype does not match request precision");
    if (hdr.chunk_index != static_cast<std::uint32_t>(rc.linear))
      throw HeaderCorruptError("chunk arrived out of order");
    if (payload.size() != wire_payload_bytes(req.desc().wire, rc.data.elems))
      throw HeaderCorruptError("chunk payload length mismatch");
    if (req.desc().buffer != nullptr && rc.data.elems > 0) {
      decode_chunk(req.desc().wire, payload,
                   std::span<float>(req.desc().buffer + rc.data.offset_elems, rc.data.elems),
                   req.recv_combines_now(), req.desc().op);
    }
    req.advance_recv();
    if (req.transfers_complete()) {
      req.state = RequestState::Done;
      cv_.notify_all();
    } else if (req.send_runnable()) {
      // The receive may have unblocked this request's next send, which a
      // different engine serves; make sure it re-evaluates.
      wake_engine(engine_of_peer_[send_peer_of(req)]);
    }
  }

  void fail_all_locked(const std::string& why) {
    failed_ = true;
    fail_reason_ = why;
    for (auto& [id, req] : requests_) {
      if (req.state != RequestState::Done) {
        req.state = RequestState::Failed;
        req.diagnostic = why;
      }
    }
    cv_.notify_all();
  }

  /// Picks the engine's next outgoing chunk (priority order at every chunk
  /// boundary, restricted to requests whose ring neighbor this engine owns)
  /// and stages its wire bytes. Returns false when nothing is runnable.
  bool stage_next_send_locked(Engine& engine) {
    std::vector<RequestCore*> candidates;
    candidates.reserve(active_.size());
    std::size_t live = 0;
    for (std::uint64_t id : active_) {
      RequestCore& r = requests_.at(id);
      if (r.state == RequestState::Done || r.state == RequestState::Failed) continue;
      active_[live++] = id;
      if (r.sends_remaining() && engine_of_peer_[send_peer_of(r)] == engine.id)
        candidates.push_back(&r);
    }
    active_.resize(live);
    RequestCore* best = pick_next(candidates, opts_.prioritization);
    if (best == nullptr) return false;
    if (peer_dead_[send_peer_of(*best)]) {
      fail_all_locked("rank " + std::to_string(send_peer_of(*best)) + " left the mesh");
      return false;
    }

    if (opts_.prioritization && engine.serving != 0 && engine.serving != best->id()) {
      auto prev = requests_.find(engine.serving);
      if (prev != requests_.end() && prev->second.state == RequestState::InFlight &&
          prev->second.sends_remaining()) {
        prev->second.state = RequestState::Preempted;
      }
    }
    if (best->state == RequestState::Queued || best->state == RequestState::Preempted)
      best->state = RequestState::InFlight;
    engine.serving = best->id();

    const RequestCore::ChunkRef ch = best->peek_send();
    const CollectiveDesc& desc = best->desc();
    engine.out.peer = send_peer_of(*best);
    engine.out.request_id = best->id();

    WireHeader hdr;
    hdr.request_tag = best->tag();
    hdr.chunk_index = static_cast<std::uint32_t>(ch.linear);
    hdr.total_chunks = static_cast<std::uint32_t>(best->plan().total_send_chunks());
    hdr.dtype = static_cast<std::uint8_t>(desc.wire);

    std::vector<std::uint8_t> payload;
    if (desc.buffer != nullptr && ch.data.elems > 0) {
      const double qabs = encode_chunk(
          desc.wire, std::span<const float>(desc.buffer + ch.data.offset_elems, ch.data.elems),
          payload);
      best->quant_max_abs = std::max(best->quant_max_abs, qabs);
    }
    hdr.payload_len = static_cast<std::uint32_t>(payload.size());

    engine.out.bytes.resize(WireHeader::kSize + payload.size());
    hdr.encode(engine.out.bytes.data());
    if (!payload.empty())
      std::memcpy(engine.out.bytes.data() + WireHeader::kSize, payload.data(), payload.size());
    engine.out.written = 0;
    engine.out.pending = true;

    best->advance_send();
    if (best->transfers_complete()) {
      best->state = RequestState::Done;
      if (engine.serving == best->id()) engine.serving = 0;
      cv_.notify_all();
    }
    return true;
  }

  void handle_readable(int peer) {
    RecvState& rs = recv_states_[peer];
    const int fd = mesh_.fd(peer);
    while (true) {
      if (!rs.have_header) {
        const ssize_t n =
            ::recv(fd, rs.header + rs.header_got, WireHeader::kSize - rs.header_got, 0);
        if (n == 0) throw PeerClosedError("rank " + std::to_string(peer) + " closed connection");
        if (n < 0) {
          if (errno == EINTR) continue;
          if (errno == EAGAIN || errno == EWOULDBLOCK) return;
          throw PeerClosedError(std::string("recv: ") + std::strerror(errno));
        }
        rs.header_got += static_cast<std::size_t>(n);
        if (rs.header_got < WireHeader::kSize) continue;
        rs.decoded = WireHeader::decode(rs.header);
        rs.payload.resize(rs.decoded.payload_len);
        rs.payload_got = 0;
        rs.have_header = true;
      }
      if (rs.payload_got < rs.payload.size()) {
        const ssize_t n =
            ::recv(fd, rs.payload.data() + rs.payload_got, rs.payload.size() - rs.payload_got, 0);
        if (n == 0) throw PeerClosedError("rank " + std::to_string(peer) + " closed connection");
        if (n < 0) {
          if (errno == EINTR) continue;
          if (errno == EAGAIN || errno == EWOULDBLOCK) return;
          throw PeerClosedError(std::string("recv: ") + std::strerror(errno));
        }
        rs.payload_got += static_cast<std::size_t>(n);
        if (rs.payload_got < rs.payload.size()) continue;
      }
      // complete chunk
      {
        std::lock_guard<std::mutex> lk(mu_);
        auto it = by_tag_.find(rs.decoded.request_tag);
        if (it != by_tag_.end() && requests_.at(it->second).recvs_remaining()) {
          apply_chunk_locked(requests_.at(it->second), rs.decoded, rs.payload);
        } else {
          early_[rs.decoded.request_tag].emplace_back(rs.decoded, std::move(rs.payload));
        }
      }
      rs.have_header = false;
      rs.header_got = 0;
      rs.payload.clear();
      rs.payload_got = 0;
    }
  }

  void progress_loop(Engine& engine) {
    try {
      std::vector<pollfd> pfds;
      std::vector<int> pfd_peer;
      while (true) {
        std::vector<char> dead_snapshot(mesh_.world_size(), 0);
        {
          std::lock_guard<std::mutex> lk(mu_);
          if (stopped_ || failed_) return;
          if (!engine.out.pending) stage_next_send_locked(engine);
          for (int p = 0; p < mesh_.world_size(); ++p) dead_snapshot[p] = peer_dead_[p] ? 1 : 0;
        }
        pfds.clear();
        pfd_peer.clear();
        pfds.push_back({engine.wake_pipe[0], POLLIN, 0});
        pfd_peer.push_back(-1);
        for (int p : engine.peers) {
          if (dead_snapshot[p]) continue;
          short ev = POLLIN;
          if (engine.out.pending && engine.out.peer == p) ev |= POLLOUT;
          pfds.push_back({mesh_.fd(p), ev, 0});
          pfd_peer.push_back(p);
        }
        ::poll(pfds.data(), pfds.size(), 50);

        if (pfds[0].revents & POLLIN) {
          char buf[64];
          while (::read(engine.wake_pipe[0], buf, sizeof buf) > 0) {
          }
        }
        for (std::size_t idx = 1; idx < pfds.size(); ++idx) {
          const int p = pfd_peer[idx];
          const short re = pfds[idx].revents;
          if (re & (POLLIN | POLLHUP | POLLERR)) {
            try {
              handle_readable(p);
            } catch (const PeerClosedError& e) {
              // Mid-chunk truncation is data loss; a clean boundary may just
              // be a rank that finished and left.
              const RecvState& rs = recv_states_[p];
              if (rs.have_header || rs.header_got > 0) {
                std::lock_guard<std::mutex> lk(mu_);
                fail_all_locked(std::string(e.what()) + " (mid-chunk)");
              } else {
                on_peer_closed(engine, p, e.what());
              }
              continue;
            }
          }
          if (engine.out.pending && engine.out.peer == p && (re & POLLOUT)) {
            const int fd = mesh_.fd(p);
            bool write_failed = false;
            while (engine.out.written < engine.out.bytes.size()) {
              const ssize_t n = ::send(fd, engine.out.bytes.data() + engine.out.written,
                                       engine.out.bytes.size() - engine.out.written, MSG_NOSIGNAL);
              if (n < 0) {
                if (errno == EINTR) continue;
                if (errno == EAGAIN || errno == EWOULDBLOCK) break;
                write_failed = true;
                break;
              }
              engine.out.written += static_cast<std::size_t>(n);
            }
            if (write_failed) {
              std::lock_guard<std::mutex> lk(mu_);
              fail_all_locked("send to rank " + std::to_string(p) + " failed: " +
                              std::strerror(errno));
            } else if (engine.out.written == engine.out.bytes.size()) {
              engine.out.pending = false;
            }
          }
        }
      }
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lk(mu_);
      fail_all_locked(e.what());
    }
  }

  SocketRuntimeOptions opts_;
  SocketMesh mesh_;
  std::vector<Engine> engines_;
  std::vector<int> engine_of_peer_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  bool stopped_ = false;
  bool failed_ = false;
  std::string fail_reason_;
  std::uint64_t next_id_ = 1;
  std::uint64_t submit_seq_ = 0;
  std::uint64_t promote_seq_ = 0;
  std::unordered_map<std::uint64_t, RequestCore> requests_;
  std::vector<std::uint64_t> active_;
  std::unordered_map<std::uint64_t, std::uint64_t> by_tag_;
  std::unordered_map<std::uint64_t, std::deque<std::pair<WireHeader, std::vector<std::uint8_t>>>>
      early_;
  std::unordered_map<std::uint64_t, std::uint64_t> tag_counters_;
  std::vector<RecvState> recv_states_;
  std::vector<bool> peer_dead_;
  DrainReport last_report_;
};

}  // namespace gsync

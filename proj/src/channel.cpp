#include "hetnet/channel.hpp"

#include <arpa/inet.h>
#include <fnmatch.h>
#include <linux/sockios.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/ioctl.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hetnet {

using wire::Msg;
using wire::Type;

std::string_view to_string(Transport t) {
  switch (t) {
    case Transport::Socket: return "socket";
    case Transport::Elastic: return "elastic";
    case Transport::Reserve: return "reserve";
  }
  return "?";
}

Transport transport_from_string(std::string_view s) {
  if (s == "socket" || s == "baseline") return Transport::Socket;
  if (s == "elastic") return Transport::Elastic;
  if (s == "reserve") return Transport::Reserve;
  throw Error(Errc::config, "unknown transport '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Allowlist

Allowlist Allowlist::parse(std::string_view text) {
  Allowlist out;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string verb, target, extra;
    if (!(ls >> verb)) continue;
    if (!(ls >> target) || (ls >> extra)) {
      throw Error(Errc::config, "allowlist line " + std::to_string(lineno) + ": expected '" +
                                    verb + " <host>:<port>'");
    }
    Rule r;
    if (verb == "allow") {
      r.allow = true;
    } else if (verb != "deny") {
      throw Error(Errc::config, "allowlist line " + std::to_string(lineno) + ": unknown verb '" +
                                    verb + "'");
    }
    const auto colon = target.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == target.size()) {
      throw Error(Errc::config,
                  "allowlist line " + std::to_string(lineno) + ": expected <host>:<port>");
    }
    r.host = target.substr(0, colon);
    r.port = target.substr(colon + 1);
    out.rules_.push_back(std::move(r));
  }
  return out;
}

Allowlist Allowlist::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(Errc::config, "cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

Allowlist Allowlist::allow_all() { return parse("allow *:*"); }

bool Allowlist::permits(std::string_view host, std::uint16_t port) const {
  const std::string h(host);
  const std::string p = std::to_string(port);
  for (const Rule& r : rules_) {
    if (::fnmatch(r.host.c_str(), h.c_str(), 0) == 0 &&
        ::fnmatch(r.port.c_str(), p.c_str(), 0) == 0) {
      return r.allow;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Handshake

namespace {

constexpr std::uint32_t kHandshakeMagic = 0x484e4831;  // "HNH1"
constexpr std::uint16_t kHandshakeVersion = 1;

enum class HsType : std::uint8_t { Hello = 1, HelloAck = 2, Ready = 3 };

struct Handshake {
  std::uint32_t magic = kHandshakeMagic;
  std::uint16_t version = kHandshakeVersion;
  HsType type = HsType::Hello;
  std::uint8_t flag = 0;  // Hello: wants the segment; HelloAck: accepted
  std::uint32_t kind = 0;
  std::uint32_t principal = 0;
  std::uint32_t channel = 0;
  std::uint32_t reserved = 0;
  std::uint64_t reserve_bytes = 0;
  std::uint64_t gen = 0;
  char segment[64] = {};
};
static_assert(sizeof(Handshake) == 104);

std::string sockaddr_string(const sockaddr_in& a) {
  char buf[INET_ADDRSTRLEN] = {};
  ::inet_ntop(AF_INET, &a.sin_addr, buf, sizeof(buf));
  return std::string(buf) + ":" + std::to_string(ntohs(a.sin_port));
}

sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_port = htons(port);
  const std::string h = host == "localhost" ? "127.0.0.1" : host;
  if (::inet_pton(AF_INET, h.c_str(), &a.sin_addr) != 1) {
    throw Error(Errc::invalid_argument, "bad IPv4 address '" + host + "'");
  }
  return a;
}

// poll() may return a little before its timeout; keep waiting until the full
// interval has elapsed.
bool wait_readable_fd(int fd, std::chrono::milliseconds timeout) {
  using clock = std::chrono::steady_clock;
  const auto deadline = clock::now() + timeout;
  pollfd p{fd, POLLIN, 0};
  for (bool first = true;; first = false) {
    int wait_ms = -1;
    if (timeout.count() >= 0) {
      const auto left = std::chrono::ceil<std::chrono::milliseconds>(deadline - clock::now());
      if (left.count() <= 0 && !first) return false;
      wait_ms = static_cast<int>(std::max<std::int64_t>(0, left.count()));
    }
    const int rc = ::poll(&p, 1, wait_ms);
    if (rc < 0 && errno == EINTR) continue;
    if (rc == 0 && wait_ms > 0) continue;
    return rc > 0;
  }
}

bool send_all(int fd, const void* data, std::size_t len) {
  const auto* p = static_cast<const char*>(data);
  while (len > 0) {
    const ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

// Peeks for a handshake header; false when the peer sent something else or
// nothing within the timeout.
bool peek_handshake(int fd, std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    const auto left =
        std::chrono::ceil<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0 || !wait_readable_fd(fd, left)) return false;
    std::uint32_t magic = 0;
    const ssize_t n = ::recv(fd, &magic, sizeof(magic), MSG_PEEK | MSG_DONTWAIT);
    if (n == static_cast<ssize_t>(sizeof(magic))) return magic == kHandshakeMagic;
    if (n == 0) return false;
    if (n < 0 && errno != EAGAIN && errno != EINTR) return false;
    // Partial header: wait for the rest.
    std::this_thread::sleep_for(std::chrono::microseconds(50));
  }
}

bool recv_handshake(int fd, Handshake& h, std::chrono::milliseconds timeout) {
  auto* p = reinterpret_cast<char*>(&h);
  std::size_t got = 0;
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (got < sizeof(h)) {
    const auto left =
        std::chrono::ceil<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0 || !wait_readable_fd(fd, left)) return false;
    const ssize_t n = ::recv(fd, p + got, sizeof(h) - got, MSG_DONTWAIT);
    if (n == 0) return false;
    if (n < 0) {
      if (errno == EAGAIN || errno == EINTR) continue;
      return false;
    }
    got += static_cast<std::size_t>(n);
  }
  return h.magic == kHandshakeMagic && h.version == kHandshakeVersion;
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

PipeKind pipe_kind(Transport t) {
  return t == Transport::Reserve ? PipeKind::Reserve : PipeKind::Elastic;
}

}  // namespace

// ---------------------------------------------------------------------------
// Channel

Channel::Channel(Worker& w, int fd, ChannelOptions opts)
    : worker_(&w), st_(&w.runtime().state()), fd_(fd), opts_(std::move(opts)) {
  cap_ = st_->record_size();
}

void Channel::attach_gshm(ChannelId ch, std::uint32_t dir, std::uint64_t gen, Transport t,
                          Principal peer) {
  transport_ = t;
  channel_ = ch;
  tx_ = pipe_id(ch, dir);
  rx_ = pipe_id(ch, 1 - dir);
  gen_ = gen;
  peer_ = peer;
  const PipeBlock& p = st_->pipe(tx_);
  if (p.arena != kNoArena) arena_ = Arena(*st_, p.arena);
  worker_->add_tx_pipe(tx_);
}

Channel::~Channel() {
  try {
    close();
  } catch (const Error&) {
    // Broker already gone.
  }
}

Errc Channel::pipe_error(const PipeBlock& p) const {
  const std::uint32_t e = p.error.load(std::memory_order_acquire);
  if (e != 0) return static_cast<Errc>(e);
  if (p.torn_down.load(std::memory_order_acquire) != 0) return Errc::channel_closed;
  if (st_->channel(channel_).generation.load(std::memory_order_acquire) != gen_) {
    return Errc::channel_closed;
  }
  return Errc::ok;
}

std::atomic<std::uint64_t>* Channel::reader_slot() const {
  return accelerated() ? &st_->pipe(rx_).reader_waiter : nullptr;
}
std::atomic<std::uint64_t>* Channel::writer_slot() const {
  return accelerated() ? &st_->pipe(tx_).writer_waiter : nullptr;
}
std::atomic<std::uint64_t>* Channel::arena_slot() const {
  return arena_.valid() && transport_ == Transport::Elastic ? &arena_.block().waiter_token
                                                            : nullptr;
}

std::uint64_t Channel::unread_tx() const {
  if (!accelerated()) return 0;
  const PipeBlock& p = st_->pipe(tx_);
  return p.write_pos.load(std::memory_order_acquire) - p.read_pos.load(std::memory_order_acquire);
}
std::uint64_t Channel::unread_rx() const {
  if (!accelerated()) return 0;
  const PipeBlock& p = st_->pipe(rx_);
  return p.write_pos.load(std::memory_order_acquire) - p.read_pos.load(std::memory_order_acquire);
}

void Channel::notify_reader() const {
  std::atomic_thread_fence(std::memory_order_seq_cst);
  worker_->runtime().signal_slot(st_->pipe(tx_).reader_waiter);
}

void Channel::notify_writer() const {
  std::atomic_thread_fence(std::memory_order_seq_cst);
  PipeBlock& p = st_->pipe(rx_);
  worker_->runtime().signal_slot(p.writer_waiter);
  if (p.arena != kNoArena) worker_->runtime().signal_slot(st_->arena(p.arena).waiter_token);
}

// --- readiness -------------------------------------------------------------

bool Channel::readable() const {
  if (closed_) return true;
  if (!accelerated()) return wait_readable_fd(fd_, std::chrono::milliseconds(0));
  const PipeBlock& p = st_->pipe(rx_);
  return p.write_pos.load(std::memory_order_acquire) != p.read_pos.load(std::memory_order_relaxed) ||
         p.sender_closed.load(std::memory_order_acquire) != 0 || pipe_error(p) != Errc::ok;
}

bool Channel::elastic_writable() const {
  const PipeBlock& p = st_->pipe(tx_);
  const RecordId w = p.write_record.load(std::memory_order_relaxed);
  if (w == kNoRecord) return true;  // broken chain: the write reports the error
  const RecordMeta& m = st_->record(w);
  const std::uint64_t wp = p.write_pos.load(std::memory_order_relaxed);
  if (wp - m.start.load(std::memory_order_relaxed) < cap_) return true;
  if (m.next.load(std::memory_order_acquire) != kNoRecord) return true;
  const RecordId reclaim = p.reclaim_record.load(std::memory_order_relaxed);
  if (reclaim != kNoRecord && reclaim != p.head_record.load(std::memory_order_acquire)) return true;
  if (w == p.local_record && reclaim == w &&
      p.read_pos.load(std::memory_order_acquire) == wp) {
    return true;
  }
  if (p.local_record != kNoRecord && p.local_in_chain.load(std::memory_order_acquire) == 0) {
    return true;
  }
  if (!arena_.valid()) return false;
  const ArenaBlock& a = arena_.block();
  if (a.ret_tail.load(std::memory_order_acquire) != a.ret_head.load(std::memory_order_relaxed)) {
    return true;
  }
  const ClaimLimits& lim = worker_->limits();
  if (p.chain_records.load(std::memory_order_relaxed) + 1 > lim.max_records_per_channel) {
    return false;
  }
  const std::uint32_t free = a.free_count.load(std::memory_order_acquire);
  if (a.record_count - free + 1 > lim.max_records_per_process) return false;
  if (a.claim_tail.load(std::memory_order_relaxed) - a.claim_head.load(std::memory_order_acquire) >=
      a.record_count) {
    return false;
  }
  return free > 0 || worker_->reclaimable();
}

bool Channel::writable() const {
  if (closed_) return true;
  if (!accelerated()) {
    pollfd pfd{fd_, POLLOUT, 0};
    return ::poll(&pfd, 1, 0) > 0;
  }
  const PipeBlock& p = st_->pipe(tx_);
  if (p.receiver_closed.load(std::memory_order_acquire) != 0 || pipe_error(p) != Errc::ok) {
    return true;
  }
  if (transport_ == Transport::Reserve) {
    return p.write_pos.load(std::memory_order_relaxed) -
               p.read_pos.load(std::memory_order_acquire) <
           p.ring_bytes;
  }
  return elastic_writable();
}

// --- elastic / reserve data path ------------------------------------------

RecordId Channel::advance_write_record(RecordId w) {
  const SharedState& st = *st_;
  PipeBlock& p = st.pipe(tx_);
  RecordMeta& wm = st.record(w);
  const RecordId next = wm.next.load(std::memory_order_acquire);
  if (next != kNoRecord) {
    p.write_record.store(next, std::memory_order_relaxed);
    return next;
  }
  reclaim_consumed_pipe(st, arena_, tx_);
  const std::uint64_t wp = p.write_pos.load(std::memory_order_relaxed);
  const RecordId local = p.local_record;
  if (w == local && p.reclaim_record.load(std::memory_order_relaxed) == w &&
      p.read_pos.load(std::memory_order_acquire) == wp) {
    // The chain is just the local record and the reader has caught up.
    wm.start.store(wp, std::memory_order_relaxed);
    wm.write_cursor.store(0, std::memory_order_relaxed);
    wm.read_cursor.store(0, std::memory_order_relaxed);
    return w;
  }
  if (local != kNoRecord && p.local_in_chain.load(std::memory_order_acquire) == 0) {
    RecordMeta& lm = st.record(local);
    lm.start.store(wm.start.load(std::memory_order_relaxed) + cap_, std::memory_order_relaxed);
    lm.write_cursor.store(0, std::memory_order_relaxed);
    lm.read_cursor.store(0, std::memory_order_relaxed);
    lm.next.store(kNoRecord, std::memory_order_relaxed);
    p.local_in_chain.store(1, std::memory_order_relaxed);
    p.tail_record.store(local, std::memory_order_relaxed);
    wm.next.store(local, std::memory_order_release);
    p.write_record.store(local, std::memory_order_relaxed);
    return local;
  }
  if (!arena_.valid()) return kNoRecord;
  auto r = claim_one(arena_, tx_, worker_->limits());
  if (!r && r.error() == Errc::arena_exhausted && worker_->reclaim_consumed() > 0) {
    r = claim_one(arena_, tx_, worker_->limits());
  }
  if (!r) return kNoRecord;
  p.write_record.store(*r, std::memory_order_relaxed);
  return *r;
}

Result<std::size_t> Channel::gshm_write(const std::byte* src, std::size_t len) {
  const SharedState& st = *st_;
  PipeBlock& p = st.pipe(tx_);
  const Principal me = worker_->principal();
  const PermissionMap& pmap = worker_->runtime().pmap();
  worker_->maintain();
  if (p.receiver_closed.load(std::memory_order_acquire) != 0) return Errc::channel_closed;
  if (const Errc e = pipe_error(p); e != Errc::ok) return e;

  std::size_t total = 0;
  std::uint64_t wp = p.write_pos.load(std::memory_order_relaxed);
  if (transport_ == Transport::Reserve) {
    const std::uint64_t ring = p.ring_bytes;
    while (total < len) {
      const std::uint64_t used = wp - p.read_pos.load(std::memory_order_acquire);
      if (used >= ring) break;
      const std::uint64_t pos = wp % ring;
      const RecordId rec = p.ring_first + static_cast<RecordId>(pos / cap_);
      const std::uint64_t off = pos % cap_;
      const std::size_t n = static_cast<std::size_t>(
          std::min<std::uint64_t>({cap_ - off, ring - used, len - total}));
      if (!is_allowed(check_access(pmap, me, rec, AccessKind::Write))) {
        const Errc e = worker_->runtime().fault(me, rec, AccessKind::Write);
        if (e != Errc::ok) return total > 0 ? Result<std::size_t>(total) : Result<std::size_t>(e);
        continue;
      }
      std::memcpy(st.data(p.ring_first) + pos, src + total, n);
      wp += n;
      total += n;
      p.write_pos.store(wp, std::memory_order_release);
    }
  } else {
    while (total < len) {
      RecordId w = p.write_record.load(std::memory_order_relaxed);
      if (w == kNoRecord) {
        if (total > 0) break;
        const Errc e = pipe_error(p);
        return e != Errc::ok ? e : Errc::channel_closed;
      }
      std::uint64_t off = wp - st.record(w).start.load(std::memory_order_relaxed);
      if (off >= cap_) {
        w = advance_write_record(w);
        if (w == kNoRecord) break;
        off = wp - st.record(w).start.load(std::memory_order_relaxed);
      }
      if (!is_allowed(check_access(pmap, me, w, AccessKind::Write))) {
        const Errc e = worker_->runtime().fault(me, w, AccessKind::Write);
        if (e != Errc::ok) return total > 0 ? Result<std::size_t>(total) : Result<std::size_t>(e);
        continue;
      }
      const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(cap_ - off, len - total));
      std::memcpy(st.data(w) + off, src + total, n);
      st.record(w).write_cursor.store(static_cast<std::uint32_t>(off + n), std::memory_order_relaxed);
      wp += n;
      total += n;
      p.write_pos.store(wp, std::memory_order_release);
    }
  }
  if (total > 0) notify_reader();
  if (total == 0) return Errc::would_block;
  return total;
}

Result<std::size_t> Channel::gshm_read(std::byte* dst, std::size_t max) {
  const SharedState& st = *st_;
  PipeBlock& p = st.pipe(rx_);
  const Principal me = worker_->principal();
  const PermissionMap& pmap = worker_->runtime().pmap();
  std::size_t total = 0;
  std::uint64_t rp = p.read_pos.load(std::memory_order_relaxed);
  const bool ring = transport_ == Transport::Reserve;
  while (total < max) {
    const std::uint64_t wp = p.write_pos.load(std::memory_order_acquire);
    if (rp == wp) break;
    RecordId h;
    std::uint64_t off;
    std::byte* base;
    std::size_t n;
    if (ring) {
      const std::uint64_t pos = rp % p.ring_bytes;
      h = p.ring_first + static_cast<RecordId>(pos / cap_);
      off = pos % cap_;
      base = st.data(p.ring_first) + pos;
      n = static_cast<std::size_t>(std::min<std::uint64_t>({cap_ - off, wp - rp, max - total}));
    } else {
      h = p.head_record.load(std::memory_order_relaxed);
      if (h == kNoRecord) {
        const Errc e = pipe_error(p);
        if (total > 0) break;
        return e != Errc::ok ? e : Errc::channel_closed;
      }
      off = rp - st.record(h).start.load(std::memory_order_relaxed);
      if (off >= cap_) {
        const RecordId next = st.record(h).next.load(std::memory_order_acquire);
        if (next == kNoRecord) {
          const Errc e = pipe_error(p);
          if (total > 0) break;
          return e != Errc::ok ? e : Errc::channel_closed;
        }
        p.head_record.store(next, std::memory_order_release);
        continue;
      }
      base = st.data(h) + off;
      n = static_cast<std::size_t>(std::min<std::uint64_t>({cap_ - off, wp - rp, max - total}));
    }
    if (!is_allowed(check_access(pmap, me, h, AccessKind::Read))) {
      const Errc e = worker_->runtime().fault(me, h, AccessKind::Read);
      if (e != Errc::ok) {
        if (total > 0) break;
        return e;
      }
      continue;
    }
    std::memcpy(dst + total, base, n);
    // A teardown may have recycled the record under the copy.
    if (pipe_error(p) != Errc::ok) {
      if (total > 0) break;
      return pipe_error(p);
    }
    if (!ring) {
      st.record(h).read_cursor.store(static_cast<std::uint32_t>(off + n), std::memory_order_relaxed);
    }
    rp += n;
    total += n;
    p.read_pos.store(rp, std::memory_order_release);
  }
  if (total > 0) {
    notify_writer();
    return total;
  }
  if (p.sender_closed.load(std::memory_order_acquire) != 0 &&
      p.write_pos.load(std::memory_order_acquire) == rp) {
    return std::size_t{0};
  }
  if (const Errc e = pipe_error(p); e != Errc::ok) return e;
  return Errc::would_block;
}

// --- socket data path --------------------------------------------------------

Result<std::size_t> Channel::socket_write(const std::byte* src, std::size_t len, bool block) {
  std::size_t total = 0;
  while (total < len) {
    const ssize_t n = ::send(fd_, src + total, len - total, MSG_NOSIGNAL | (block ? 0 : MSG_DONTWAIT));
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN) break;
      if (total > 0) break;
      return errno == EPIPE || errno == ECONNRESET ? Errc::channel_closed : Errc::io;
    }
    total += static_cast<std::size_t>(n);
    if (!block) break;
  }
  if (total == 0) return Errc::would_block;
  return total;
}

Result<std::size_t> Channel::socket_read(std::byte* dst, std::size_t max, bool block) {
  for (;;) {
    const ssize_t n = ::recv(fd_, dst, max, block ? 0 : MSG_DONTWAIT);
    if (n >= 0) return static_cast<std::size_t>(n);
    if (errno == EINTR) continue;
    if (errno == EAGAIN) return Errc::would_block;
    return errno == ECONNRESET ? Errc::channel_closed : Errc::io;
  }
}

// --- public data path ---------------------------------------------------------

Result<std::size_t> Channel::try_write(const void* data, std::size_t len) {
  if (closed_) return Errc::channel_closed;
  if (len == 0) return std::size_t{0};
  const auto* src = static_cast<const std::byte*>(data);
  return accelerated() ? gshm_write(src, len) : socket_write(src, len, false);
}

Result<std::size_t> Channel::try_read(void* buf, std::size_t max) {
  if (closed_) return Errc::channel_closed;
  if (max == 0) return std::size_t{0};
  auto* dst = static_cast<std::byte*>(buf);
  return accelerated() ? gshm_read(dst, max) : socket_read(dst, max, false);
}

Result<std::size_t> Channel::write(const void* data, std::size_t len) {
  if (!opts_.blocking) return try_write(data, len);
  if (closed_) return Errc::channel_closed;
  const auto* src = static_cast<const std::byte*>(data);
  if (!accelerated()) return socket_write(src, len, true);
  std::size_t total = 0;
  while (total < len) {
    auto r = gshm_write(src + total, len - total);
    if (r) {
      total += *r;
      continue;
    }
    if (r.error() != Errc::would_block) {
      if (total > 0) return total;
      return r.error();
    }
    wait_writable();
  }
  return total;
}

Result<std::size_t> Channel::read(void* buf, std::size_t max) {
  if (!opts_.blocking) return try_read(buf, max);
  if (closed_) return Errc::channel_closed;
  if (max == 0) return std::size_t{0};
  auto* dst = static_cast<std::byte*>(buf);
  if (!accelerated()) return socket_read(dst, max, true);
  for (;;) {
    auto r = gshm_read(dst, max);
    if (r || r.error() != Errc::would_block) return r;
    wait_readable();
  }
}

Errc Channel::write_all(std::span<const std::byte> data) {
  std::size_t done = 0;
  while (done < data.size()) {
    auto r = write(data.data() + done, data.size() - done);
    if (!r) {
      if (r.error() == Errc::would_block) {
        wait_writable();
        continue;
      }
      return r.error();
    }
    done += *r;
  }
  return Errc::ok;
}

Errc Channel::read_exact(std::span<std::byte> buf) {
  std::size_t done = 0;
  while (done < buf.size()) {
    auto r = read(buf.data() + done, buf.size() - done);
    if (!r) {
      if (r.error() == Errc::would_block) {
        wait_readable();
        continue;
      }
      return r.error();
    }
    if (*r == 0) return Errc::channel_closed;
    done += *r;
  }
  return Errc::ok;
}

void Channel::wait_readable() {
  if (!accelerated()) {
    wait_readable_fd(fd_, std::chrono::milliseconds(-1));
    return;
  }
  if (readable()) return;
  Runtime& rt = worker_->runtime();
  if (!read_token_) read_token_ = rt.make_token(worker_->principal(), NotifyMode::Sync);
  const Errc e = rt.arm(*read_token_, kNotifyRead, {wire::arm_entry(rx_, kNotifyRead)},
                        {&st_->pipe(rx_).reader_waiter}, [this] { return readable(); });
  if (e != Errc::ok) {
    std::this_thread::yield();
    return;
  }
  read_token_->wait();
}

void Channel::wait_writable() {
  if (!accelerated()) {
    pollfd pfd{fd_, POLLOUT, 0};
    ::poll(&pfd, 1, -1);
    return;
  }
  if (writable()) return;
  Runtime& rt = worker_->runtime();
  // Commit point before blocking: lets the reader see claimed records
  // without faulting.
  if (arena_.valid()) {
    const ArenaBlock& a = arena_.block();
    if (a.claim_tail.load(std::memory_order_relaxed) != a.claim_head.load(std::memory_order_acquire)) {
      worker_->yield();
    }
  }
  if (!write_token_) write_token_ = rt.make_token(worker_->principal(), NotifyMode::Sync);
  std::vector<std::atomic<std::uint64_t>*> slots{&st_->pipe(tx_).writer_waiter};
  if (auto* a = arena_slot()) slots.push_back(a);
  const Errc e = rt.arm(*write_token_, kNotifyWrite, {wire::arm_entry(tx_, kNotifyWrite)}, slots,
                        [this] { return writable(); });
  if (e != Errc::ok) {
    std::this_thread::yield();
    return;
  }
  write_token_->wait();
}

void Channel::close() {
  if (closed_) return;
  closed_ = true;
  if (accelerated()) {
    PipeBlock& tx = st_->pipe(tx_);
    PipeBlock& rx = st_->pipe(rx_);
    tx.sender_closed.store(1, std::memory_order_seq_cst);
    rx.receiver_closed.store(1, std::memory_order_seq_cst);
    std::atomic_thread_fence(std::memory_order_seq_cst);
    Runtime& rt = worker_->runtime();
    rt.signal_slot(tx.reader_waiter);
    rt.signal_slot(rx.writer_waiter, wire::Status::Closed);
    if (rx.arena != kNoArena) rt.signal_slot(st_->arena(rx.arena).waiter_token);
    read_token_.reset();
    write_token_.reset();
    worker_->remove_tx_pipe(tx_);
    Msg m;
    m.type = Type::CloseChannel;
    m.channel = channel_;
    m.principal = worker_->principal();
    counters().control_messages.fetch_add(1, std::memory_order_relaxed);
    rt.call(m);
    worker_->maintain();
  }
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

Result<std::string> Channel::get_metadata(std::string_view key) const {
  if (key == "transport") return std::string(to_string(transport_));
  if (key == "peer_addr" || key == "local_addr") {
    if (fd_ < 0) return Errc::channel_closed;
    sockaddr_in a{};
    socklen_t len = sizeof(a);
    const int rc = key == "peer_addr" ? ::getpeername(fd_, reinterpret_cast<sockaddr*>(&a), &len)
                                      : ::getsockname(fd_, reinterpret_cast<sockaddr*>(&a), &len);
    if (rc != 0) return Errc::io;
    return sockaddr_string(a);
  }
  if (key == "original_dst") {
    if (original_dst_.empty()) return Errc::no_original_dst;
    return original_dst_;
  }
  if (key == "occupancy") {
    if (accelerated()) return std::to_string(unread_tx() + unread_rx());
    if (fd_ < 0) return Errc::channel_closed;
    int inq = 0;
    int outq = 0;
    ::ioctl(fd_, SIOCINQ, &inq);
    ::ioctl(fd_, SIOCOUTQ, &outq);
    return std::to_string(inq + outq);
  }
  return Errc::unknown_key;
}

// ---------------------------------------------------------------------------
// Establishment

std::unique_ptr<Listener> Listener::listen(Worker& w, const std::string& host, std::uint16_t port,
                                           ChannelOptions opts) {
  std::unique_ptr<Listener> l(new Listener());
  l->worker_ = &w;
  l->opts_ = std::move(opts);
  l->fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (l->fd_ < 0) throw_errno(Errc::io, "socket");
  int one = 1;
  ::setsockopt(l->fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in a = resolve(host, port);
  if (::bind(l->fd_, reinterpret_cast<sockaddr*>(&a), sizeof(a)) != 0) {
    throw_errno(errno == EADDRINUSE ? Errc::conflict : Errc::io, "bind " + host);
  }
  if (::listen(l->fd_, 1024) != 0) throw_errno(Errc::io, "listen");
  socklen_t len = sizeof(a);
  ::getsockname(l->fd_, reinterpret_cast<sockaddr*>(&a), &len);
  l->port_ = ntohs(a.sin_port);
  return l;
}

Listener::~Listener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<Channel> Listener::accept() {
  int fd;
  for (;;) {
    fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd >= 0) break;
    if (errno != EINTR) throw_errno(Errc::io, "accept");
  }
  set_nodelay(fd);
  std::unique_ptr<Channel> ch(new Channel(*worker_, fd, opts_));
  Runtime& rt = worker_->runtime();

  if (!peek_handshake(fd, opts_.handshake_timeout)) {
    ch->handshake_timed_out_ = true;
    return ch;  // plain peer: the socket is the data path
  }
  Handshake hello;
  if (!recv_handshake(fd, hello, opts_.handshake_timeout) || hello.type != HsType::Hello) {
    ch->handshake_timed_out_ = true;
    return ch;
  }
  sockaddr_in peer{};
  socklen_t plen = sizeof(peer);
  ::getpeername(fd, reinterpret_cast<sockaddr*>(&peer), &plen);
  char host[INET_ADDRSTRLEN] = {};
  ::inet_ntop(AF_INET, &peer.sin_addr, host, sizeof(host));
  const bool permitted = !opts_.allowlist || opts_.allowlist->permits(host, port_);
  const bool same_segment =
      std::string_view(hello.segment, strnlen(hello.segment, sizeof(hello.segment))) ==
      rt.segment_name();
  const Transport want = opts_.transport;
  Handshake ack;
  ack.type = HsType::HelloAck;
  Msg reply;
  if (hello.flag != 0 && permitted && same_segment && want != Transport::Socket) {
    Msg m;
    m.type = Type::OpenChannel;
    m.principal = worker_->principal();
    m.peer = hello.principal;
    m.kind = static_cast<std::uint32_t>(pipe_kind(want));
    m.a = want == Transport::Reserve ? opts_.reserve_bytes : 0;
    counters().control_messages.fetch_add(1, std::memory_order_relaxed);
    reply = rt.call(m);
    if (reply.status == wire::Status::Ok) {
      ack.flag = 1;
      ack.channel = reply.channel;
      ack.gen = reply.gen;
      ack.kind = static_cast<std::uint32_t>(want);
      ack.principal = worker_->principal();
    }
  }
  const bool sent = send_all(fd, &ack, sizeof(ack));
  if (ack.flag == 0) return ch;
  Handshake ready;
  if (!sent || !recv_handshake(fd, ready, opts_.handshake_timeout) || ready.type != HsType::Ready) {
    Msg m;
    m.type = Type::Abort;
    m.channel = ack.channel;
    counters().control_messages.fetch_add(1, std::memory_order_relaxed);
    rt.call(m);
    ch->handshake_timed_out_ = true;
    return ch;
  }
  ch->attach_gshm(ack.channel, 0, ack.gen, want, hello.principal);
  Msg act;
  act.type = Type::Activate;
  act.channel = ack.channel;
  counters().control_messages.fetch_add(1, std::memory_order_relaxed);
  rt.call(act);
  return ch;
}

std::unique_ptr<Channel> connect(Worker& w, const std::string& host, std::uint16_t port,
                                 ChannelOptions opts) {
  const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw_errno(Errc::io, "socket");
  sockaddr_in a = resolve(host, port);
  for (;;) {
    if (::connect(fd, reinterpret_cast<sockaddr*>(&a), sizeof(a)) == 0) break;
    if (errno == EINTR) continue;
    const int err = errno;
    ::close(fd);
    errno = err;
    throw_errno(Errc::io, "connect " + host + ":" + std::to_string(port));
  }
  set_nodelay(fd);
  std::unique_ptr<Channel> ch(new Channel(w, fd, opts));
  Runtime& rt = w.runtime();

  char remote[INET_ADDRSTRLEN] = {};
  ::inet_ntop(AF_INET, &a.sin_addr, remote, sizeof(remote));
  const bool permitted = !opts.allowlist || opts.allowlist->permits(remote, port);
  Handshake hello;
  hello.type = HsType::Hello;
  hello.flag = permitted && opts.transport != Transport::Socket ? 1 : 0;
  hello.kind = static_cast<std::uint32_t>(opts.transport);
  hello.principal = w.principal();
  hello.reserve_bytes = opts.reserve_bytes;
  std::strncpy(hello.segment, rt.segment_name().c_str(), sizeof(hello.segment) - 1);
  if (!send_all(fd, &hello, sizeof(hello))) return ch;

  if (!peek_handshake(fd, opts.handshake_timeout)) {
    ch->handshake_timed_out_ = true;
    return ch;  // peer does not speak the handshake
  }
  Handshake ack;
  if (!recv_handshake(fd, ack, opts.handshake_timeout) || ack.type != HsType::HelloAck) {
    ch->handshake_timed_out_ = true;
    return ch;
  }
  if (ack.flag == 0) return ch;
  Handshake ready;
  ready.type = HsType::Ready;
  if (!send_all(fd, &ready, sizeof(ready))) return ch;
  ch->attach_gshm(ack.channel, 1, ack.gen, static_cast<Transport>(ack.kind), ack.principal);
  return ch;
}

}  // namespace hetnet

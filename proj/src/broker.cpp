#include "hetnet/broker.hpp"

#include <poll.h>
#include <pthread.h>
#include <signal.h>
#include <sys/eventfd.h>
#include <sys/mman.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <condition_variable>
#include <deque>
#include <future>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "hetnet/wire.hpp"

namespace hetnet {

using wire::Msg;
using wire::Type;

namespace {

constexpr std::uint32_t kMaskR = 1;
constexpr std::uint32_t kMaskW = 2;

#ifndef MADV_POPULATE_WRITE
#define MADV_POPULATE_WRITE 23
#endif

// Pinned buffers are resident from the moment they are handed out.
void populate(const SharedState& st, RecordId first, std::uint32_t count) {
  if (count == 0) return;
  std::byte* p = st.data(first);
  const std::size_t len = static_cast<std::size_t>(count) * st.record_size();
  if (::madvise(p, len, MADV_POPULATE_WRITE) != 0) {
    for (std::size_t off = 0; off < len; off += kPageSize) {
      reinterpret_cast<volatile std::byte*>(p)[off] = std::byte{0};
    }
  }
}

const char* state_name(RecordState s) {
  switch (s) {
    case RecordState::Free: return "F";
    case RecordState::Claimed: return "C";
    case RecordState::Committed: return "K";
  }
  return "?";
}

const char* channel_state_name(std::uint32_t s) {
  switch (static_cast<ChannelState>(s)) {
    case ChannelState::Unused: return "unused";
    case ChannelState::Handshaking: return "handshaking";
    case ChannelState::Active: return "active";
    case ChannelState::Draining: return "draining";
    case ChannelState::Closed: return "closed";
  }
  return "?";
}

}  // namespace

struct Broker::Impl {
  struct PrincipalInfo {
    std::uint32_t pid = 0;
    wire::Address addr;
    std::uint32_t arena = kNoArena;
    bool alive = true;
  };
  struct TokenEntry {
    std::uint64_t gen = 0;
    std::uint32_t mask = 0;
    std::vector<std::uint32_t> pipes;  // wire::arm_entry values
    bool armed = false;
  };
  struct ChannelInfo {
    std::vector<std::pair<RecordId, std::uint32_t>> ranges;  // local / ring records
  };

  BrokerConfig cfg;
  Segment seg;
  SharedState st;
  PermissionMap pmap{st};
  RecordPool pool;
  std::uint32_t brokers = 1;
  std::string addr_name;
  wire::Socket sock;
  std::vector<wire::Address> peers;

  std::map<Principal, PrincipalInfo> principals;
  std::uint32_t next_seq = 1;
  std::unordered_map<TokenId, TokenEntry> tokens;
  std::set<std::pair<PipeId, std::uint32_t>> pending_status;
  std::map<std::uint32_t, ChannelInfo> channels;
  std::vector<std::uint32_t> zombies;

  int event_fd = -1;
  std::mutex task_mu;
  std::deque<std::function<void()>> tasks;

  std::thread thread;
  std::atomic<bool> stopping{false};
  std::atomic<clockid_t> thread_clock{0};
  std::atomic<bool> clock_ready{false};
  std::chrono::steady_clock::time_point next_tick;
  std::chrono::steady_clock::time_point next_liveness;

  struct AtomicStats {
    std::atomic<std::uint64_t> commits{0}, records_committed{0}, records_rolled_back{0},
        faults{0}, statuses{0}, completions{0}, ticks{0}, teardowns{0};
  } stats;

  explicit Impl(BrokerConfig c) : cfg(std::move(c)) {
    seg = Segment::open(cfg.segment);
    st = SharedState(seg.data());
    pmap = PermissionMap(st);
    brokers = std::max<std::uint32_t>(1, st.broker_count());
    if (cfg.index >= brokers) throw Error(Errc::invalid_argument, "broker index out of range");
    if (cfg.policy.record_size_bytes != st.record_size()) {
      throw Error(Errc::config, "policy record size differs from the segment's record size");
    }
    const std::uint32_t n = st.record_count();
    const auto lo = static_cast<RecordId>(static_cast<std::uint64_t>(n) * cfg.index / brokers);
    const auto hi = static_cast<RecordId>(static_cast<std::uint64_t>(n) * (cfg.index + 1) / brokers);
    pool = RecordPool(lo, static_cast<std::uint32_t>(hi - lo));
    addr_name = wire::broker_address(cfg.segment, cfg.index);
    sock = wire::Socket(addr_name);
    for (std::uint32_t i = 0; i < brokers; ++i) {
      peers.push_back(wire::Address::abstract(wire::broker_address(cfg.segment, i)));
    }
    event_fd = ::eventfd(0, EFD_CLOEXEC | EFD_NONBLOCK);
    if (event_fd < 0) throw_errno(Errc::io, "eventfd");
    next_tick = std::chrono::steady_clock::now() + cfg.tick;
    next_liveness = std::chrono::steady_clock::now() + cfg.liveness_period;
  }

  ~Impl() {
    if (event_fd >= 0) ::close(event_fd);
  }

  // -------------------------------------------------------------------------
  // Ownership helpers

  bool mine_arena(std::uint32_t slot) const { return slot % brokers == cfg.index; }
  bool mine_channel(std::uint32_t ch) const { return ch % brokers == cfg.index; }
  bool mine_principal(Principal p) const { return wire::broker_of(p) == cfg.index; }

  void send_to_broker(std::uint32_t idx, const Msg& m) { sock.send(peers.at(idx), m); }

  void reply(const Msg& req, const wire::Address& from, Msg r) {
    r.type = Type::Reply;
    r.req_id = req.req_id;
    sock.send(wire::reply_address(req, from), r);
  }

  void forward(std::uint32_t idx, Msg m, const wire::Address& from) {
    if (m.reply_len == 0) wire::set_reply_to(m, from);
    send_to_broker(idx, m);
  }

  // -------------------------------------------------------------------------
  // Tokens

  void send_complete(TokenId token, std::uint64_t gen, wire::Status status) {
    const Principal owner = wire::token_owner(token);
    auto it = principals.find(owner);
    if (it == principals.end() || !it->second.alive) return;
    Msg m;
    m.type = Type::Complete;
    m.token = token;
    m.gen = gen;
    m.status = status;
    sock.send(it->second.addr, m);
    stats.completions.fetch_add(1, std::memory_order_relaxed);
  }

  // Completes `token` if armed here; forwards to the owning broker otherwise.
  void complete_token(TokenId token, wire::Status status) {
    if (token == 0) return;
    const Principal owner = wire::token_owner(token);
    if (!mine_principal(owner)) {
      Msg m;
      m.type = Type::Status;
      m.token = token;
      m.status = status;
      send_to_broker(wire::broker_of(owner), m);
      return;
    }
    auto it = tokens.find(token);
    if (it == tokens.end()) {
      // Closed events must not be lost even if the token was never armed
      // here (self-fired fast path): the runtime filters stale generations.
      if (status == wire::Status::Closed) send_complete(token, 0, status);
      return;
    }
    if (!it->second.armed && status != wire::Status::Closed) return;
    it->second.armed = false;
    send_complete(token, it->second.gen, status);
  }

  // Completes one token armed here for (pipe, bit). False when none is.
  bool wake_armed_on(PipeId pipe, std::uint32_t bit) {
    for (auto& [id, t] : tokens) {
      if (!t.armed) continue;
      for (std::uint32_t entry : t.pipes) {
        if ((entry & bit) && wire::entry_pipe(entry) == pipe) {
          t.armed = false;
          send_complete(id, t.gen, wire::Status::Ok);
          return true;
        }
      }
    }
    return false;
  }

  void wake_pipe_waiters(PipeId p, wire::Status status) {
    PipeBlock& pb = st.pipe(p);
    complete_token(pb.reader_waiter.load(std::memory_order_acquire), status);
    complete_token(pb.writer_waiter.load(std::memory_order_acquire), status);
  }

  void wake_arena_waiter(std::uint32_t slot) {
    complete_token(st.arena(slot).waiter_token.load(std::memory_order_acquire),
                   wire::Status::Ok);
  }

  // -------------------------------------------------------------------------
  // Permissions for NoRW

  template <class F>
  void for_each_pipe_record(PipeId p, F&& f) {
    PipeBlock& pb = st.pipe(p);
    if (pb.kind == static_cast<std::uint32_t>(PipeKind::Reserve)) {
      for (std::uint32_t i = 0; i < pb.ring_records; ++i) f(pb.ring_first + static_cast<RecordId>(i));
      return;
    }
    if (pb.local_record != kNoRecord) f(pb.local_record);
    RecordId r = pb.reclaim_record.load(std::memory_order_acquire);
    const RecordId tail = pb.tail_record.load(std::memory_order_acquire);
    for (std::uint32_t steps = 0; r != kNoRecord && steps <= st.record_count(); ++steps) {
      if (r != pb.local_record) f(r);
      if (r == tail) break;
      r = st.record(r).next.load(std::memory_order_acquire);
    }
  }

  void revoke_pipe(PipeId p, std::uint32_t mask) {
    PipeBlock& pb = st.pipe(p);
    if (mask & kMaskR) {
      pb.norw_read.store(1, std::memory_order_seq_cst);
      std::atomic_thread_fence(std::memory_order_seq_cst);
      for_each_pipe_record(p, [&](RecordId r) {
        const RecordId one[] = {r};
        pmap.revoke(pb.receiver, one, AccessKind::Read);
      });
    }
    if (mask & kMaskW) {
      pb.norw_write.store(1, std::memory_order_seq_cst);
      for_each_pipe_record(p, [&](RecordId r) {
        const RecordId one[] = {r};
        pmap.revoke(pb.sender, one, AccessKind::Write);
      });
    }
  }

  void restore_pipe(PipeId p, std::uint32_t mask) {
    PipeBlock& pb = st.pipe(p);
    if ((mask & kMaskR) && pb.norw_read.exchange(0, std::memory_order_seq_cst) != 0) {
      for_each_pipe_record(p, [&](RecordId r) {
        const RecordMeta& m = st.record(r);
        if (static_cast<RecordState>(m.state.load()) == RecordState::Committed &&
            m.owner_pipe.load() == p) {
          pmap.grant(pb.receiver, r, AccessKind::Read);
        }
      });
    }
    if ((mask & kMaskW) && pb.norw_write.exchange(0, std::memory_order_seq_cst) != 0) {
      for_each_pipe_record(p, [&](RecordId r) {
        const RecordMeta& m = st.record(r);
        if (m.owner_pipe.load() == p && static_cast<RecordState>(m.state.load()) != RecordState::Free) {
          pmap.grant(pb.sender, r, AccessKind::Write);
        }
      });
    }
  }

  // -------------------------------------------------------------------------
  // Commit

  CommitReport commit_arena(std::uint32_t slot) {
    ArenaBlock& a = st.arena(slot);
    if (a.in_use.load(std::memory_order_acquire) == 0) return {};
    auto it = principals.find(a.owner);
    if (it != principals.end() && !it->second.alive) return {};
    CommitReport rep = broker_commit(Arena(st, slot), cfg.policy);
    if (rep.empty()) return rep;
    stats.commits.fetch_add(1, std::memory_order_relaxed);
    stats.records_committed.fetch_add(rep.committed.size(), std::memory_order_relaxed);
    if (!rep.rolled_back.empty()) {
      stats.records_rolled_back.fetch_add(rep.rolled_back.size(), std::memory_order_relaxed);
      std::set<PipeId> affected;
      for (const ClaimEntry& e : Arena(st, slot).pending_claims()) (void)e;
      for (RecordId r : rep.rolled_back) {
        // owner_pipe survives until the owner drains the return queue.
        affected.insert(st.record(r).owner_pipe.load());
      }
      for (PipeId p : affected) {
        if (p != kNoPipe) wake_pipe_waiters(p, wire::Status::Ok);
      }
      wake_arena_waiter(slot);
    }
    return rep;
  }

  void commit_all() {
    for (std::uint32_t i = 0; i < st.max_arenas(); ++i) {
      if (!mine_arena(i)) continue;
      ArenaBlock& a = st.arena(i);
      if (a.in_use.load(std::memory_order_acquire) == 0) continue;
      if (a.claim_tail.load(std::memory_order_acquire) != a.claim_head.load()) commit_arena(i);
    }
  }

  std::uint32_t arena_of(Principal p) const {
    for (std::uint32_t i = 0; i < st.max_arenas(); ++i) {
      const ArenaBlock& a = st.arena(i);
      if (a.in_use.load(std::memory_order_acquire) != 0 && a.owner == p) return i;
    }
    return kNoArena;
  }

  // -------------------------------------------------------------------------
  // Channels

  void free_ranges(const ChannelInfo& info) {
    for (const auto& [first, count] : info.ranges) {
      for (std::uint32_t i = 0; i < count; ++i) {
        RecordMeta& m = st.record(first + static_cast<RecordId>(i));
        m.state.store(static_cast<std::uint32_t>(RecordState::Free));
        m.kind.store(static_cast<std::uint32_t>(RecordKind::Unassigned));
        m.owner_pipe.store(kNoPipe);
        m.next.store(kNoRecord);
        m.write_cursor.store(0);
        m.read_cursor.store(0);
        pmap.clear(first + static_cast<RecordId>(i));
      }
      pool.release(first, count);
    }
  }

  Msg open_channel(const Msg& m) {
    Msg r;
    std::uint32_t ch = kNoArena;
    for (std::uint32_t i = 0; i < st.max_channels(); ++i) {
      if (!mine_channel(i) || channels.count(i) != 0) continue;
      if (st.channel(i).state.load() == static_cast<std::uint32_t>(ChannelState::Unused)) {
        ch = i;
        break;
      }
    }
    if (ch == kNoArena) {
      r.status = wire::Status::Error;
      r.errc = static_cast<std::uint32_t>(Errc::segment_exhausted);
      return r;
    }
    const auto kind = static_cast<PipeKind>(m.kind);
    std::uint32_t per_dir = 1;
    if (kind == PipeKind::Reserve) {
      if (m.a == 0 || m.a % st.record_size() != 0) {
        r.status = wire::Status::Error;
        r.errc = static_cast<std::uint32_t>(Errc::invalid_argument);
        return r;
      }
      per_dir = static_cast<std::uint32_t>(m.a / st.record_size());
    }
    const auto first = pool.allocate(per_dir);
    const auto second = first ? pool.allocate(per_dir) : std::nullopt;
    if (!first || !second) {
      if (first) pool.release(*first, per_dir);
      r.status = wire::Status::Error;
      r.errc = static_cast<std::uint32_t>(Errc::segment_exhausted);
      return r;
    }
    ChannelBlock& c = st.channel(ch);
    c.principal_a = m.principal;
    c.principal_b = m.peer;
    c.closed_a.store(0);
    c.closed_b.store(0);
    const Principal senders[2] = {m.principal, m.peer};
    const RecordId firsts[2] = {*first, *second};
    for (std::uint32_t dir = 0; dir < 2; ++dir) {
      const PipeId p = pipe_id(ch, dir);
      const Principal snd = senders[dir];
      const Principal rcv = senders[1 - dir];
      if (kind == PipeKind::Reserve) {
        pipe_init_ring(st, p, snd, rcv, firsts[dir], per_dir);
      } else {
        pipe_init(st, p, snd, rcv, firsts[dir], arena_of(snd));
      }
    }
    populate(st, *first, per_dir);
    populate(st, *second, per_dir);
    channels[ch].ranges = {{*first, per_dir}, {*second, per_dir}};
    c.generation.fetch_add(1, std::memory_order_acq_rel);
    c.state.store(static_cast<std::uint32_t>(ChannelState::Handshaking), std::memory_order_release);
    r.channel = ch;
    r.records[0] = *first;
    r.records[1] = *second;
    r.gen = c.generation.load();
    return r;
  }

  void teardown(std::uint32_t ch) {
    ChannelBlock& c = st.channel(ch);
    const auto s = c.state.load();
    if (s == static_cast<std::uint32_t>(ChannelState::Unused) ||
        s == static_cast<std::uint32_t>(ChannelState::Closed)) {
      return;
    }
    c.state.store(static_cast<std::uint32_t>(ChannelState::Closed), std::memory_order_release);
    stats.teardowns.fetch_add(1, std::memory_order_relaxed);
    for (std::uint32_t dir = 0; dir < 2; ++dir) {
      const PipeId p = pipe_id(ch, dir);
      PipeBlock& pb = st.pipe(p);
      pb.sender_closed.store(1, std::memory_order_release);
      pb.receiver_closed.store(1, std::memory_order_release);
      wake_pipe_waiters(p, wire::Status::Closed);
      for (auto& [id, t] : tokens) {
        if (t.armed && std::any_of(t.pipes.begin(), t.pipes.end(), [p](std::uint32_t e) {
              return wire::entry_pipe(e) == p;
            })) {
          t.armed = false;
          send_complete(id, t.gen, wire::Status::Closed);
        }
      }
      for (std::uint32_t bit : {kMaskR, kMaskW}) pending_status.erase({p, bit});
      if (pb.kind == static_cast<std::uint32_t>(PipeKind::Elastic) && pb.arena != kNoArena) {
        pb.teardown_pending.store(1, std::memory_order_release);
        if (mine_arena(pb.arena)) {
          teardown_pipe(p);
        } else {
          Msg m;
          m.type = Type::TeardownPipe;
          m.pipe = p;
          send_to_broker(pb.arena % brokers, m);
        }
      } else {
        pb.torn_down.store(1, std::memory_order_release);
        pb.teardown_pending.store(0, std::memory_order_release);
      }
    }
    zombies.push_back(ch);
  }

  // Runs on the broker owning the pipe's arena.
  void teardown_pipe(PipeId p) {
    PipeBlock& pb = st.pipe(p);
    const std::uint32_t slot = pb.arena;
    ArenaBlock& a = st.arena(slot);
    if (slot == kNoArena || a.in_use.load() == 0 || a.owner != pb.sender) {
      pb.torn_down.store(1, std::memory_order_release);
      pb.teardown_pending.store(0, std::memory_order_release);
      return;
    }
    pb.torn_down.store(1, std::memory_order_seq_cst);
    auto it = principals.find(a.owner);
    const bool owner_alive = it != principals.end() && it->second.alive;
    if (owner_alive) {
      // The owner reclaims on its next data-path call.
      a.teardown_epoch.fetch_add(1, std::memory_order_acq_rel);
      wake_arena_waiter(slot);
    } else {
      reclaim_pipe(Arena(st, slot), p);
    }
  }

  void process_zombies() {
    for (auto it = zombies.begin(); it != zombies.end();) {
      const std::uint32_t ch = *it;
      ChannelBlock& c = st.channel(ch);
      if (c.pipes[0].teardown_pending.load() != 0 || c.pipes[1].teardown_pending.load() != 0) {
        ++it;
        continue;
      }
      auto info = channels.find(ch);
      if (info != channels.end()) {
        free_ranges(info->second);
        channels.erase(info);
      }
      for (std::uint32_t dir = 0; dir < 2; ++dir) {
        PipeBlock& pb = c.pipes[dir];
        pb.sender = kNoPrincipal;
        pb.receiver = kNoPrincipal;
        pb.reader_waiter.store(0);
        pb.writer_waiter.store(0);
      }
      c.generation.fetch_add(1, std::memory_order_acq_rel);
      c.state.store(static_cast<std::uint32_t>(ChannelState::Unused), std::memory_order_release);
      it = zombies.erase(it);
    }
  }

  void close_channel(std::uint32_t ch, Principal who, bool force) {
    ChannelBlock& c = st.channel(ch);
    if (c.state.load() == static_cast<std::uint32_t>(ChannelState::Unused)) return;
    if (who == c.principal_a) c.closed_a.store(1);
    if (who == c.principal_b) c.closed_b.store(1);
    if (force || (c.closed_a.load() != 0 && c.closed_b.load() != 0)) {
      teardown(ch);
    } else if (c.state.load() == static_cast<std::uint32_t>(ChannelState::Active)) {
      c.state.store(static_cast<std::uint32_t>(ChannelState::Draining), std::memory_order_release);
    }
  }

  // -------------------------------------------------------------------------
  // Principals

  void mark_dead(Principal p) {
    auto it = principals.find(p);
    if (it == principals.end() || !it->second.alive) return;
    it->second.alive = false;
    for (std::uint32_t ch = 0; ch < st.max_channels(); ++ch) {
      ChannelBlock& c = st.channel(ch);
      const auto s = c.state.load();
      if (s == static_cast<std::uint32_t>(ChannelState::Unused) ||
          s == static_cast<std::uint32_t>(ChannelState::Closed)) {
        continue;
      }
      if (c.principal_a != p && c.principal_b != p) continue;
      if (mine_channel(ch)) {
        close_channel(ch, p, true);
      } else {
        Msg m;
        m.type = Type::CloseChannel;
        m.channel = ch;
        m.principal = p;
        m.mode = 1;  // force
        send_to_broker(ch % brokers, m);
      }
    }
    const std::uint32_t slot = it->second.arena;
    if (slot != kNoArena && st.arena(slot).in_use.load() != 0 && st.arena(slot).owner == p) {
      Arena arena(st, slot);
      ArenaBlock& a = arena.block();
      for (std::uint32_t ch = 0; ch < st.max_channels(); ++ch) {
        for (std::uint32_t dir = 0; dir < 2; ++dir) {
          PipeBlock& pb = st.channel(ch).pipes[dir];
          if (pb.arena != slot || pb.sender != p) continue;
          if (pb.kind != static_cast<std::uint32_t>(PipeKind::Elastic)) continue;
          pb.torn_down.store(1, std::memory_order_seq_cst);
          reclaim_pipe(arena, pipe_id(ch, dir));
        }
      }
      // Uncommitted claims of a dead worker are discarded with its pipes.
      a.claim_head.store(a.claim_tail.load());
      drain_returns(arena);
      arena_destroy(arena, pool);
      it->second.arena = kNoArena;
    }
    for (auto t = tokens.begin(); t != tokens.end();) {
      if (wire::token_owner(t->first) == p) {
        t = tokens.erase(t);
      } else {
        ++t;
      }
    }
  }

  void check_liveness() {
    const auto self = static_cast<std::uint32_t>(::getpid());
    std::vector<Principal> dead;
    for (const auto& [p, info] : principals) {
      if (!info.alive || info.pid == self || info.pid == 0) continue;
      if (::kill(static_cast<pid_t>(info.pid), 0) != 0 && errno == ESRCH) dead.push_back(p);
    }
    for (Principal p : dead) mark_dead(p);
  }

  // -------------------------------------------------------------------------
  // Message dispatch

  void handle(const Msg& m, const wire::Address& from) {
    switch (m.type) {
      case Type::Register: {
        Msg r;
        const Principal p = wire::make_principal(cfg.index, next_seq++);
        PrincipalInfo info;
        info.pid = m.pid;
        info.addr = wire::reply_address(m, from);
        if (m.a > 0) {
          std::uint32_t slot = kNoArena;
          for (std::uint32_t i = 0; i < st.max_arenas(); ++i) {
            if (mine_arena(i) && st.arena(i).in_use.load() == 0) {
              slot = i;
              break;
            }
          }
          try {
            if (slot == kNoArena) throw Error(Errc::segment_exhausted, "no arena slot");
            Arena a = arena_init(st, pool, p, m.pid, st.record_size(),
                                 static_cast<std::uint32_t>(m.a), slot);
            populate(st, static_cast<RecordId>(st.arena(a.slot()).first_record),
                     st.arena(a.slot()).record_count);
            info.arena = a.slot();
          } catch (const Error& e) {
            r.type = Type::Reply;
            r.req_id = m.req_id;
            r.status = wire::Status::Error;
            r.errc = static_cast<std::uint32_t>(e.code());
            sock.send(from, r);
            return;
          }
        }
        principals[p] = info;
        r.type = Type::Reply;
        r.req_id = m.req_id;
        r.principal = p;
        r.arena = info.arena;
        // reply_to names the runtime's event socket; the reply itself goes
        // back to the calling socket.
        sock.send(from, r);
        return;
      }
      case Type::Unregister: {
        mark_dead(m.principal);
        reply(m, from, Msg{});
        return;
      }
      case Type::OpenChannel: {
        reply(m, from, open_channel(m));
        return;
      }
      case Type::Activate: {
        ChannelBlock& c = st.channel(m.channel);
        std::uint32_t expect = static_cast<std::uint32_t>(ChannelState::Handshaking);
        c.state.compare_exchange_strong(expect, static_cast<std::uint32_t>(ChannelState::Active));
        if (m.req_id != 0) reply(m, from, Msg{});
        return;
      }
      case Type::CloseChannel: {
        if (!mine_channel(m.channel)) {
          forward(m.channel % brokers, m, from);
          return;
        }
        close_channel(m.channel, m.principal, m.mode != 0);
        if (m.req_id != 0) reply(m, from, Msg{});
        return;
      }
      case Type::Abort: {
        if (!mine_channel(m.channel)) {
          forward(m.channel % brokers, m, from);
          return;
        }
        teardown(m.channel);
        if (m.req_id != 0) reply(m, from, Msg{});
        return;
      }
      case Type::Fault: handle_fault(m, from); return;
      case Type::Yield: {
        auto it = principals.find(m.principal);
        if (it != principals.end() && it->second.arena != kNoArena) commit_arena(it->second.arena);
        if (m.req_id != 0) reply(m, from, Msg{});
        return;
      }
      case Type::Commit: {
        Msg r;
        if (m.arena < st.max_arenas() && !mine_arena(m.arena)) {
          forward(m.arena % brokers, m, from);
          return;
        }
        if (m.arena < st.max_arenas()) {
          auto rep = commit_arena(m.arena);
          r.a = rep.committed.size();
          r.b = rep.rolled_back.size();
        }
        reply(m, from, r);
        return;
      }
      case Type::Arm: {
        TokenEntry& t = tokens[m.token];
        t.gen = m.gen;
        t.mask = m.mask;
        t.pipes.assign(m.pipes, m.pipes + m.count);
        t.armed = true;
        for (std::uint32_t entry : t.pipes) {
          for (std::uint32_t bit : {kMaskR, kMaskW}) {
            if ((entry & bit) && pending_status.erase({wire::entry_pipe(entry), bit}) != 0 &&
                t.armed) {
              t.armed = false;
              send_complete(m.token, t.gen, wire::Status::Ok);
            }
          }
        }
        return;
      }
      case Type::Disarm: {
        tokens.erase(m.token);
        if (m.pipe != kNoPipe && st.pipe(m.pipe).norw_token.load() == m.token) {
          restore_pipe(m.pipe, m.mask);
          st.pipe(m.pipe).norw_token.store(0);
        }
        if (m.req_id != 0) reply(m, from, Msg{});
        return;
      }
      case Type::Status: {
        stats.statuses.fetch_add(1, std::memory_order_relaxed);
        if (m.token != 0) {
          complete_token(m.token, m.status);
          return;
        }
        if (m.pipe == kNoPipe) return;
        const std::uint32_t ch = pipe_channel(m.pipe);
        const auto s = st.channel(ch).state.load();
        if (s == static_cast<std::uint32_t>(ChannelState::Closed) ||
            s == static_cast<std::uint32_t>(ChannelState::Unused)) {
          return;  // dropped
        }
        // The sender saw no waiter in the slot, but an ARM may have reached us
        // first; wake that token rather than parking the status.
        for (std::uint32_t bit : {kMaskR, kMaskW}) {
          if (!(m.mask & bit)) continue;
          if (!wake_armed_on(m.pipe, bit)) pending_status.insert({m.pipe, bit});
        }
        return;
      }
      case Type::NoRw: {
        PipeBlock& pb = st.pipe(m.pipe);
        pb.norw_token.store(m.token, std::memory_order_release);
        revoke_pipe(m.pipe, m.mask);
        reply(m, from, Msg{});
        return;
      }
      case Type::TeardownPipe: teardown_pipe(m.pipe); return;
      case Type::DeclareDead: {
        if (!mine_principal(m.principal)) {
          forward(wire::broker_of(m.principal), m, from);
          return;
        }
        mark_dead(m.principal);
        if (m.req_id != 0) reply(m, from, Msg{});
        return;
      }
      case Type::Complete:
      case Type::Reply: return;
    }
  }

  void handle_fault(const Msg& m, const wire::Address& from) {
    stats.faults.fetch_add(1, std::memory_order_relaxed);
    const RecordId r = m.record;
    Msg out;
    if (!st.valid_record(r)) {
      out.status = wire::Status::Rejected;
      out.errc = static_cast<std::uint32_t>(Errc::unknown_record);
      reply(m, from, out);
      return;
    }
    const auto kind = m.mode == static_cast<std::uint32_t>(AccessKind::Write) ? AccessKind::Write
                                                                               : AccessKind::Read;
    RecordMeta& meta = st.record(r);
    const PipeId p = meta.owner_pipe.load(std::memory_order_acquire);
    if (p != kNoPipe && pipe_channel(p) < st.max_channels()) {
      PipeBlock& pb = st.pipe(p);
      const std::uint32_t mask =
          (kind == AccessKind::Read && pb.receiver == m.principal && pb.norw_read.load() != 0
               ? kMaskR
               : 0) |
          (kind == AccessKind::Write && pb.sender == m.principal && pb.norw_write.load() != 0
               ? kMaskW
               : 0);
      if (mask != 0) {
        const TokenId t = pb.norw_token.exchange(0);
        restore_pipe(p, mask);
        complete_token(t, wire::Status::Ok);
      }
    }
    if (static_cast<RecordKind>(meta.kind.load()) == RecordKind::Arena &&
        static_cast<RecordState>(meta.state.load()) == RecordState::Claimed) {
      const std::uint32_t slot = meta.arena.load();
      if (slot < st.max_arenas()) {
        if (!mine_arena(slot)) {
          forward(slot % brokers, m, from);
          return;
        }
        commit_arena(slot);
      }
    }
    if (!pmap.get(m.principal, r).contains(kind)) {
      out.status = wire::Status::Rejected;
      const std::uint32_t e = p != kNoPipe ? st.pipe(p).error.load() : 0;
      out.errc = e != 0 ? e : static_cast<std::uint32_t>(Errc::not_owner);
    }
    reply(m, from, out);
  }

  // -------------------------------------------------------------------------
  // Loop

  void tick() {
    stats.ticks.fetch_add(1, std::memory_order_relaxed);
    commit_all();
    process_zombies();
    const auto now = std::chrono::steady_clock::now();
    if (now >= next_liveness) {
      check_liveness();
      next_liveness = now + cfg.liveness_period;
    }
  }

  void run_tasks() {
    std::uint64_t v;
    while (::read(event_fd, &v, sizeof(v)) > 0) {
    }
    std::deque<std::function<void()>> q;
    {
      std::lock_guard lk(task_mu);
      q.swap(tasks);
    }
    for (auto& f : q) f();
  }

  void step(std::chrono::milliseconds max_wait) {
    auto now = std::chrono::steady_clock::now();
    auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(next_tick - now);
    if (wait > max_wait) wait = max_wait;
    if (wait.count() < 0) wait = std::chrono::milliseconds(0);
    pollfd fds[2] = {{sock.fd(), POLLIN, 0}, {event_fd, POLLIN, 0}};
    // Sub-millisecond ticks: round the timeout up so the loop does not spin.
    int timeout = static_cast<int>(wait.count());
    if (timeout == 0 && now < next_tick) timeout = 1;
    const int rc = ::poll(fds, 2, timeout);
    if (rc > 0) {
      Msg m;
      wire::Address from;
      while (sock.recv(m, from, true)) handle(m, from);
      if (fds[1].revents & POLLIN) run_tasks();
    }
    now = std::chrono::steady_clock::now();
    if (now >= next_tick) {
      tick();
      next_tick = now + cfg.tick;
    }
  }

  void loop() {
    clockid_t cid;
    pthread_getcpuclockid(pthread_self(), &cid);
    thread_clock.store(cid);
    clock_ready.store(true);
    while (!stopping.load(std::memory_order_acquire)) step(std::chrono::milliseconds(50));
    run_tasks();
  }

  template <class F>
  auto call(F f) -> decltype(f()) {
    if (!cfg.threaded || !thread.joinable() ||
        std::this_thread::get_id() == thread.get_id()) {
      return f();
    }
    using R = decltype(f());
    auto task = std::make_shared<std::packaged_task<R()>>(std::move(f));
    auto fut = task->get_future();
    {
      std::lock_guard lk(task_mu);
      tasks.emplace_back([task] { (*task)(); });
    }
    const std::uint64_t one = 1;
    [[maybe_unused]] auto n = ::write(event_fd, &one, sizeof(one));
    return fut.get();
  }

  std::string dump() {
    std::ostringstream os;
    os << "broker " << cfg.index << " of " << brokers << "\n";
    for (std::uint32_t i = 0; i < st.max_arenas(); ++i) {
      if (!mine_arena(i)) continue;
      const ArenaBlock& a = st.arena(i);
      if (a.in_use.load() == 0) continue;
      Arena ar(st, i);
      os << "arena " << i << " owner=" << a.owner << " pid=" << a.pid
         << " records=" << a.first_record << "+" << a.record_count << " free=" << ar.free_count()
         << " committed=" << a.committed.load() << " claims=" << ar.pending_claims().size()
         << " returns=" << ar.pending_returns() << "\n  free:";
      for (RecordId r : ar.free_list()) os << " " << r;
      os << "\n";
    }
    for (std::uint32_t ch = 0; ch < st.max_channels(); ++ch) {
      if (!mine_channel(ch)) continue;
      const ChannelBlock& c = st.channel(ch);
      if (c.state.load() == static_cast<std::uint32_t>(ChannelState::Unused)) continue;
      os << "channel " << ch << " state=" << channel_state_name(c.state.load())
         << " a=" << c.principal_a << " b=" << c.principal_b << "\n";
      for (std::uint32_t dir = 0; dir < 2; ++dir) {
        const PipeId p = pipe_id(ch, dir);
        const PipeBlock& pb = st.pipe(p);
        const bool ring = pb.kind == static_cast<std::uint32_t>(PipeKind::Reserve);
        os << "  pipe " << p << " kind=" << (ring ? "reserve" : "elastic")
           << " sender=" << pb.sender << " receiver=" << pb.receiver
           << " written=" << pb.write_pos.load() << " read=" << pb.read_pos.load()
           << " committed=" << pb.committed.load() << " error=" << pb.error.load() << "\n    chain:";
        for_each_pipe_record(p, [&](RecordId r) {
          const RecordMeta& m = st.record(r);
          os << " " << r << "(" << state_name(static_cast<RecordState>(m.state.load()))
             << " w=" << m.write_cursor.load() << " r=" << m.read_cursor.load()
             << " W=" << m.writer.load() << " R=" << m.reader.load() << ")";
        });
        os << "\n";
      }
    }
    std::map<TokenId, const TokenEntry*> sorted;
    for (const auto& [id, t] : tokens) sorted[id] = &t;
    for (const auto& [id, t] : sorted) {
      os << "token " << std::hex << id << std::dec << " gen=" << t->gen << " mask=" << t->mask
         << " armed=" << (t->armed ? 1 : 0) << " pipes=";
      for (std::size_t i = 0; i < t->pipes.size(); ++i) {
        os << (i ? "," : "") << wire::entry_pipe(t->pipes[i]) << "/"
           << ((t->pipes[i] & kMaskR) ? "R" : "") << ((t->pipes[i] & kMaskW) ? "W" : "");
      }
      os << "\n";
    }
    for (const auto& [pipe, bit] : pending_status) {
      os << "pending " << pipe << "/" << (bit == kMaskR ? "R" : "W") << "\n";
    }
    return os.str();
  }
};

Broker::Broker(BrokerConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {
  if (impl_->cfg.threaded) {
    impl_->thread = std::thread([this] { impl_->loop(); });
    while (!impl_->clock_ready.load()) std::this_thread::yield();
  }
}

Broker::~Broker() { stop(); }

void Broker::stop() {
  if (!impl_) return;
  impl_->stopping.store(true);
  const std::uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(impl_->event_fd, &one, sizeof(one));
  if (impl_->thread.joinable()) impl_->thread.join();
}

const std::string& Broker::address() const { return impl_->addr_name; }
std::uint32_t Broker::index() const { return impl_->cfg.index; }

void Broker::step(std::chrono::milliseconds wait) { impl_->step(wait); }

std::string Broker::dump() {
  return impl_->call([this] { return impl_->dump(); });
}

AuditReport Broker::audit() {
  return impl_->call([this] { return hetnet::audit(impl_->st); });
}

void Broker::declare_dead(Principal p) {
  impl_->call([this, p] {
    if (impl_->mine_principal(p)) {
      impl_->mark_dead(p);
    } else {
      Msg m;
      m.type = Type::DeclareDead;
      m.principal = p;
      impl_->send_to_broker(wire::broker_of(p), m);
    }
    return 0;
  });
}

CommitReport Broker::commit_now(std::uint32_t arena_slot) {
  return impl_->call([this, arena_slot] { return impl_->commit_arena(arena_slot); });
}

std::size_t Broker::armed_tokens() {
  return impl_->call([this] {
    std::size_t n = 0;
    for (const auto& [id, t] : impl_->tokens) n += t.armed ? 1 : 0;
    return n;
  });
}

std::size_t Broker::zombie_channels() {
  return impl_->call([this] { return impl_->zombies.size(); });
}

BrokerStats Broker::stats() const {
  const auto& s = impl_->stats;
  BrokerStats out;
  out.commits = s.commits.load();
  out.records_committed = s.records_committed.load();
  out.records_rolled_back = s.records_rolled_back.load();
  out.faults = s.faults.load();
  out.statuses = s.statuses.load();
  out.completions = s.completions.load();
  out.ticks = s.ticks.load();
  out.teardowns = s.teardowns.load();
  return out;
}

std::uint64_t Broker::cpu_ns() const {
  if (!impl_->clock_ready.load()) return 0;
  timespec ts{};
  if (::clock_gettime(impl_->thread_clock.load(), &ts) != 0) return 0;
  return static_cast<std::uint64_t>(ts.tv_sec) * 1000000000ULL +
         static_cast<std::uint64_t>(ts.tv_nsec);
}

// ---------------------------------------------------------------------------
// Fabric

std::unique_ptr<Fabric> Fabric::create(const FabricConfig& cfg) {
  if (cfg.brokers == 0) throw Error(Errc::invalid_argument, "at least one broker");
  std::unique_ptr<Fabric> f(new Fabric());
  f->cfg_ = cfg;
  f->cfg_.layout.record_size = cfg.policy.record_size_bytes;
  const std::uint64_t bytes = SegmentLayout::required_bytes(f->cfg_.layout, cfg.records);
  f->segment_ = Segment::create(cfg.name, bytes);
  f->segment_.set_unlink_on_close(true);
  f->state_ = SharedState::format(f->segment_.data(), f->segment_.size(), f->cfg_.layout);
  f->state_.set_broker_count(cfg.brokers);
  for (std::uint32_t i = 0; i < cfg.brokers; ++i) {
    BrokerConfig bc;
    bc.segment = cfg.name;
    bc.index = i;
    bc.policy = cfg.policy;
    bc.tick = cfg.tick;
    bc.threaded = cfg.threaded;
    f->brokers_.push_back(std::make_unique<Broker>(bc));
  }
  return f;
}

Fabric::~Fabric() {
  for (auto& b : brokers_) b->stop();
  brokers_.clear();
}

}  // namespace hetnet

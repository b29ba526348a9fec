#include "hetnet/record_arena.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace hetnet {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Policy

void AllocationPolicy::validate() const {
  if (max_records_per_channel == 0 || max_records_per_process == 0) {
    throw Error(Errc::config, "record bounds must be positive");
  }
  if (record_size_bytes == 0 || record_size_bytes % kPageSize != 0) {
    throw Error(Errc::config, "record_size_bytes must be a positive page multiple");
  }
  if (local_record_bytes == 0 || local_record_bytes % kPageSize != 0) {
    throw Error(Errc::config, "local_record_bytes must be a positive page multiple");
  }
  if (local_record_bytes != record_size_bytes) {
    throw Error(Errc::config, "local_record_bytes must equal record_size_bytes");
  }
  if (arena_size_bytes == 0 || arena_size_bytes % record_size_bytes != 0) {
    throw Error(Errc::config, "arena_size_bytes must be a positive multiple of the record size");
  }
}

AllocationPolicy AllocationPolicy::parse(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::config, std::string("policy: ") + e.what());
  }
  if (!doc.is_object()) throw Error(Errc::config, "policy must be a JSON object");
  AllocationPolicy p;
  for (const auto& [key, value] : doc.items()) {
    if (!value.is_number_unsigned()) {
      throw Error(Errc::config, "policy key '" + key + "' must be a non-negative integer");
    }
    const auto v = value.get<std::uint64_t>();
    if (key == "max_records_per_channel") {
      p.max_records_per_channel = static_cast<std::uint32_t>(v);
    } else if (key == "max_records_per_process") {
      p.max_records_per_process = static_cast<std::uint32_t>(v);
    } else if (key == "record_size_bytes") {
      p.record_size_bytes = v;
    } else if (key == "arena_size_bytes") {
      p.arena_size_bytes = v;
    } else if (key == "local_record_bytes") {
      p.local_record_bytes = v;
    } else {
      throw Error(Errc::config, "unknown policy key '" + key + "'");
    }
  }
  p.validate();
  return p;
}

AllocationPolicy AllocationPolicy::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::config, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

// ---------------------------------------------------------------------------
// Pool

RecordPool::RecordPool(RecordId first, std::uint32_t count) {
  if (count > 0) free_.emplace(first, count);
}

std::optional<RecordId> RecordPool::allocate(std::uint32_t count) {
  if (count == 0) return std::nullopt;
  for (auto it = free_.begin(); it != free_.end(); ++it) {
    if (it->second < count) continue;
    const RecordId first = it->first;
    const std::uint32_t left = it->second - count;
    free_.erase(it);
    if (left > 0) free_.emplace(first + static_cast<RecordId>(count), left);
    return first;
  }
  return std::nullopt;
}

void RecordPool::release(RecordId first, std::uint32_t count) {
  if (count == 0) return;
  auto [it, inserted] = free_.emplace(first, count);
  if (!inserted) throw Error(Errc::invalid_argument, "double release of record range");
  auto next = std::next(it);
  if (next != free_.end() && it->first + static_cast<RecordId>(it->second) == next->first) {
    it->second += next->second;
    free_.erase(next);
  }
  if (it != free_.begin()) {
    auto prev = std::prev(it);
    if (prev->first + static_cast<RecordId>(prev->second) == it->first) {
      prev->second += it->second;
      free_.erase(it);
    }
  }
}

std::uint32_t RecordPool::free_records() const {
  std::uint32_t n = 0;
  for (const auto& [first, count] : free_) n += count;
  return n;
}

// ---------------------------------------------------------------------------
// Arena

std::vector<ClaimEntry> Arena::pending_claims() const {
  ArenaBlock& a = block();
  const ClaimEntry* slots = state_->claim_slots(a);
  std::vector<ClaimEntry> out;
  const std::uint64_t t = a.claim_tail.load(std::memory_order_acquire);
  for (std::uint64_t i = a.claim_head.load(std::memory_order_acquire); i < t; ++i) {
    out.push_back(slots[i % a.record_count]);
  }
  return out;
}

std::uint64_t Arena::pending_returns() const {
  ArenaBlock& a = block();
  return a.ret_tail.load(std::memory_order_acquire) - a.ret_head.load(std::memory_order_acquire);
}

std::vector<RecordId> Arena::free_list() const {
  std::vector<RecordId> out;
  RecordId r = head();
  const std::uint32_t limit = record_count() + 1;
  while (r != kNoRecord && out.size() < limit) {
    out.push_back(r);
    r = state_->record(r).next.load(std::memory_order_acquire);
  }
  return out;
}

namespace {

void reset_record(RecordMeta& m) {
  m.state.store(static_cast<std::uint32_t>(RecordState::Free), std::memory_order_relaxed);
  m.owner_pipe.store(kNoPipe, std::memory_order_relaxed);
  m.next.store(kNoRecord, std::memory_order_relaxed);
  m.write_cursor.store(0, std::memory_order_relaxed);
  m.read_cursor.store(0, std::memory_order_relaxed);
  m.start.store(0, std::memory_order_relaxed);
  m.reader.store(kNoPrincipal, std::memory_order_release);
}

void push_free_tail(const SharedState& st, ArenaBlock& a, RecordId r) {
  RecordMeta& m = st.record(r);
  m.next.store(kNoRecord, std::memory_order_relaxed);
  const RecordId tail = a.tail.load(std::memory_order_relaxed);
  if (tail == kNoRecord) {
    a.head.store(r, std::memory_order_relaxed);
  } else {
    st.record(tail).next.store(r, std::memory_order_relaxed);
  }
  a.tail.store(r, std::memory_order_relaxed);
  a.free_count.fetch_add(1, std::memory_order_release);
}

RecordState state_of(const RecordMeta& m) {
  return static_cast<RecordState>(m.state.load(std::memory_order_acquire));
}

}  // namespace

Arena arena_init(const SharedState& state, RecordPool& pool, Principal worker, std::uint32_t pid,
                 std::uint64_t record_size, std::uint32_t record_count, std::uint32_t slot) {
  if (record_size == 0 || record_size % kPageSize != 0) {
    throw Error(Errc::alignment, "record size " + std::to_string(record_size));
  }
  if (record_size != state.record_size()) {
    throw Error(Errc::invalid_argument, "record size differs from the segment's record size");
  }
  if (record_count == 0) throw Error(Errc::invalid_argument, "arena needs at least one record");

  if (slot == kNoArena) {
    for (std::uint32_t i = 0; i < state.max_arenas(); ++i) {
      if (state.arena(i).in_use.load(std::memory_order_acquire) == 0) {
        slot = i;
        break;
      }
    }
  } else if (slot >= state.max_arenas() || state.arena(slot).in_use.load() != 0) {
    throw Error(Errc::invalid_argument, "arena slot " + std::to_string(slot) + " unavailable");
  }
  if (slot == kNoArena) throw Error(Errc::segment_exhausted, "no free arena slot");
  const auto first = pool.allocate(record_count);
  if (!first) {
    throw Error(Errc::segment_exhausted,
                "no contiguous range of " + std::to_string(record_count) + " records");
  }

  ArenaBlock& a = state.arena(slot);
  a.owner = worker;
  a.pid = pid;
  a.first_record = static_cast<std::uint32_t>(*first);
  a.record_count = record_count;
  a.head.store(*first, std::memory_order_relaxed);
  a.tail.store(*first + static_cast<RecordId>(record_count) - 1, std::memory_order_relaxed);
  a.free_count.store(record_count, std::memory_order_relaxed);
  a.next_seq.store(1, std::memory_order_relaxed);
  a.claim_tail.store(0, std::memory_order_relaxed);
  a.claim_head.store(0, std::memory_order_relaxed);
  a.ret_head.store(0, std::memory_order_relaxed);
  a.ret_tail.store(0, std::memory_order_relaxed);
  a.teardown_seen.store(0, std::memory_order_relaxed);
  a.teardown_epoch.store(0, std::memory_order_relaxed);
  a.committed.store(0, std::memory_order_relaxed);
  a.waiter_token.store(0, std::memory_order_relaxed);

  for (std::uint32_t i = 0; i < record_count; ++i) {
    const RecordId r = *first + static_cast<RecordId>(i);
    RecordMeta& m = state.record(r);
    reset_record(m);
    m.kind.store(static_cast<std::uint32_t>(RecordKind::Arena), std::memory_order_relaxed);
    m.arena.store(slot, std::memory_order_relaxed);
    m.seq.store(0, std::memory_order_relaxed);
    m.next.store(i + 1 < record_count ? r + 1 : kNoRecord, std::memory_order_relaxed);
    m.writer.store(worker, std::memory_order_release);
  }
  a.in_use.store(1, std::memory_order_release);
  return Arena(state, slot);
}

void arena_destroy(Arena arena, RecordPool& pool) {
  const SharedState& st = arena.state();
  ArenaBlock& a = arena.block();
  for (std::uint32_t i = 0; i < a.record_count; ++i) {
    RecordMeta& m = st.record(static_cast<RecordId>(a.first_record + i));
    reset_record(m);
    m.kind.store(static_cast<std::uint32_t>(RecordKind::Unassigned), std::memory_order_relaxed);
    m.arena.store(kNoArena, std::memory_order_relaxed);
    m.writer.store(kNoPrincipal, std::memory_order_release);
  }
  pool.release(static_cast<RecordId>(a.first_record), a.record_count);
  a.owner = kNoPrincipal;
  a.record_count = 0;
  a.in_use.store(0, std::memory_order_release);
}

void pipe_init(const SharedState& state, PipeId pipe, Principal sender, Principal receiver,
               RecordId local, std::uint32_t arena_slot) {
  PipeBlock& p = state.pipe(pipe);
  p.sender = sender;
  p.receiver = receiver;
  p.local_record = local;
  p.arena = arena_slot;
  p.kind = static_cast<std::uint32_t>(PipeKind::Elastic);
  p.ring_first = kNoRecord;
  p.ring_records = 0;
  p.ring_bytes = 0;
  p.write_pos.store(0, std::memory_order_relaxed);
  p.read_pos.store(0, std::memory_order_relaxed);
  p.write_record.store(local, std::memory_order_relaxed);
  p.tail_record.store(local, std::memory_order_relaxed);
  p.reclaim_record.store(local, std::memory_order_relaxed);
  p.head_record.store(local, std::memory_order_relaxed);
  p.local_in_chain.store(local != kNoRecord ? 1 : 0, std::memory_order_relaxed);
  p.chain_records.store(0, std::memory_order_relaxed);
  p.sender_closed.store(0, std::memory_order_relaxed);
  p.receiver_closed.store(0, std::memory_order_relaxed);
  p.committed.store(0, std::memory_order_relaxed);
  p.error.store(0, std::memory_order_relaxed);
  p.torn_down.store(0, std::memory_order_relaxed);
  p.teardown_pending.store(0, std::memory_order_relaxed);
  p.norw_read.store(0, std::memory_order_relaxed);
  p.norw_write.store(0, std::memory_order_relaxed);
  p.norw_token.store(0, std::memory_order_relaxed);
  p.reader_waiter.store(0, std::memory_order_relaxed);
  p.writer_waiter.store(0, std::memory_order_relaxed);
  if (local != kNoRecord) {
    RecordMeta& m = state.record(local);
    reset_record(m);
    m.kind.store(static_cast<std::uint32_t>(RecordKind::Local), std::memory_order_relaxed);
    m.arena.store(kNoArena, std::memory_order_relaxed);
    m.owner_pipe.store(pipe, std::memory_order_relaxed);
    m.state.store(static_cast<std::uint32_t>(RecordState::Committed), std::memory_order_relaxed);
    m.writer.store(sender, std::memory_order_relaxed);
    m.reader.store(receiver, std::memory_order_release);
  }
}

void pipe_init_ring(const SharedState& state, PipeId pipe, Principal sender, Principal receiver,
                    RecordId first, std::uint32_t count) {
  pipe_init(state, pipe, sender, receiver, kNoRecord, kNoArena);
  PipeBlock& p = state.pipe(pipe);
  p.kind = static_cast<std::uint32_t>(PipeKind::Reserve);
  p.ring_first = first;
  p.ring_records = count;
  p.ring_bytes = state.record_size() * count;
  for (std::uint32_t i = 0; i < count; ++i) {
    RecordMeta& m = state.record(first + static_cast<RecordId>(i));
    reset_record(m);
    m.kind.store(static_cast<std::uint32_t>(RecordKind::Ring), std::memory_order_relaxed);
    m.arena.store(kNoArena, std::memory_order_relaxed);
    m.owner_pipe.store(pipe, std::memory_order_relaxed);
    m.state.store(static_cast<std::uint32_t>(RecordState::Committed), std::memory_order_relaxed);
    m.writer.store(sender, std::memory_order_relaxed);
    m.reader.store(receiver, std::memory_order_release);
  }
}

// ---------------------------------------------------------------------------
// Claim / commit / release

std::uint32_t committed_by_process(const SharedState& state, std::uint32_t pid) {
  std::uint32_t n = 0;
  for (std::uint32_t i = 0; i < state.max_arenas(); ++i) {
    const ArenaBlock& a = state.arena(i);
    if (a.in_use.load(std::memory_order_acquire) != 0 && a.pid == pid) {
      n += a.committed.load(std::memory_order_acquire);
    }
  }
  return n;
}

Result<RecordId> claim_one(Arena arena, PipeId pipe, const ClaimLimits& limits) {
  const SharedState& st = arena.state();
  ArenaBlock& a = arena.block();
  PipeBlock& p = st.pipe(pipe);

  if (p.chain_records.load(std::memory_order_relaxed) + 1 > limits.max_records_per_channel) {
    return Errc::rate_limited;
  }
  const std::uint32_t held = a.record_count - a.free_count.load(std::memory_order_relaxed);
  if (held + 1 > limits.max_records_per_process) return Errc::rate_limited;
  // A full claim log means the broker is behind; wait for a commit point.
  const std::uint64_t log_tail = a.claim_tail.load(std::memory_order_relaxed);
  if (log_tail - a.claim_head.load(std::memory_order_acquire) >= a.record_count) {
    return Errc::rate_limited;
  }
  if (a.free_count.load(std::memory_order_acquire) == 0) return Errc::arena_exhausted;

  const RecordId r = a.head.load(std::memory_order_relaxed);
  RecordMeta& m = st.record(r);
  const RecordId next_free = m.next.load(std::memory_order_relaxed);
  a.head.store(next_free, std::memory_order_relaxed);
  if (next_free == kNoRecord) a.tail.store(kNoRecord, std::memory_order_relaxed);
  a.free_count.fetch_sub(1, std::memory_order_release);

  const std::uint64_t seq = a.next_seq.fetch_add(1, std::memory_order_relaxed);
  const RecordId prev = p.tail_record.load(std::memory_order_relaxed);
  const std::uint64_t start =
      prev == kNoRecord ? p.write_pos.load(std::memory_order_relaxed)
                        : st.record(prev).start.load(std::memory_order_relaxed) + st.record_size();

  m.next.store(kNoRecord, std::memory_order_relaxed);
  m.write_cursor.store(0, std::memory_order_relaxed);
  m.read_cursor.store(0, std::memory_order_relaxed);
  m.start.store(start, std::memory_order_relaxed);
  m.owner_pipe.store(pipe, std::memory_order_relaxed);
  m.seq.store(seq, std::memory_order_relaxed);
  m.state.store(static_cast<std::uint32_t>(RecordState::Claimed), std::memory_order_release);

  ClaimEntry& e = st.claim_slots(a)[log_tail % a.record_count];
  e = ClaimEntry{seq, pipe, r, prev, 0};
  a.claim_tail.store(log_tail + 1, std::memory_order_release);

  p.chain_records.fetch_add(1, std::memory_order_relaxed);
  p.tail_record.store(r, std::memory_order_release);
  if (prev == kNoRecord) {
    p.reclaim_record.store(r, std::memory_order_relaxed);
    p.write_record.store(r, std::memory_order_relaxed);
    p.head_record.store(r, std::memory_order_release);
  } else {
    st.record(prev).next.store(r, std::memory_order_release);
  }
  return r;
}

Result<std::vector<RecordId>> speculative_claim(Arena arena, PipeId pipe, std::uint32_t n,
                                                const ClaimLimits& limits) {
  std::vector<RecordId> out;
  if (n == 0) return out;
  const ArenaBlock& a = arena.block();
  if (a.free_count.load(std::memory_order_acquire) < n) return Errc::arena_exhausted;
  const PipeBlock& p = arena.state().pipe(pipe);
  if (p.chain_records.load(std::memory_order_relaxed) + n > limits.max_records_per_channel) {
    return Errc::rate_limited;
  }
  if (a.record_count - a.free_count.load(std::memory_order_relaxed) + n >
      limits.max_records_per_process) {
    return Errc::rate_limited;
  }
  if (a.claim_tail.load(std::memory_order_relaxed) - a.claim_head.load(std::memory_order_acquire) +
          n >
      a.record_count) {
    return Errc::rate_limited;
  }
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    auto r = claim_one(arena, pipe, limits);
    if (!r) return r.error();
    out.push_back(*r);
  }
  return out;
}

CommitReport broker_commit(Arena arena, const AllocationPolicy& policy) {
  CommitReport report;
  const SharedState& st = arena.state();
  ArenaBlock& a = arena.block();
  const PermissionMap pmap(st);
  const ClaimEntry* slots = st.claim_slots(a);
  const std::uint64_t head = a.claim_head.load(std::memory_order_relaxed);
  const std::uint64_t tail = a.claim_tail.load(std::memory_order_acquire);
  if (head == tail) return report;
  std::uint32_t process_held = committed_by_process(st, a.pid);

  for (std::uint64_t i = head; i < tail; ++i) {
    const ClaimEntry e = slots[i % a.record_count];
    RecordMeta& m = st.record(e.record);
    if (m.seq.load(std::memory_order_acquire) != e.seq || state_of(m) != RecordState::Claimed ||
        m.owner_pipe.load(std::memory_order_acquire) != e.pipe) {
      continue;  // stale: reclaimed by a teardown and possibly reused
    }
    PipeBlock& p = st.pipe(e.pipe);
    if (p.torn_down.load(std::memory_order_acquire) != 0) continue;

    const bool over = p.error.load(std::memory_order_acquire) != 0 ||
                      p.committed.load(std::memory_order_relaxed) + 1 >
                          policy.max_records_per_channel ||
                      process_held + 1 > policy.max_records_per_process;
    if (over) {
      m.state.store(static_cast<std::uint32_t>(RecordState::Free), std::memory_order_release);
      const std::uint64_t rt = a.ret_tail.load(std::memory_order_relaxed);
      st.return_slots(a)[rt % a.record_count] = e;
      a.ret_tail.store(rt + 1, std::memory_order_release);
      p.error.store(static_cast<std::uint32_t>(Errc::rate_limit_violation),
                    std::memory_order_release);
      report.rolled_back.push_back(e.record);
      continue;
    }
    p.committed.fetch_add(1, std::memory_order_relaxed);
    a.committed.fetch_add(1, std::memory_order_relaxed);
    ++process_held;
    m.state.store(static_cast<std::uint32_t>(RecordState::Committed), std::memory_order_release);
    if (p.norw_read.load(std::memory_order_seq_cst) == 0) {
      pmap.grant(p.receiver, e.record, AccessKind::Read);
      // A NoRW revocation running on another broker may have missed this
      // record; whichever side comes second performs the revoke.
      std::atomic_thread_fence(std::memory_order_seq_cst);
      if (p.norw_read.load(std::memory_order_seq_cst) != 0) {
        const RecordId one[] = {e.record};
        pmap.revoke(p.receiver, one, AccessKind::Read);
      }
    }
    report.committed.push_back(e.record);
  }
  a.claim_head.store(tail, std::memory_order_release);
  return report;
}

namespace {

void release_one(const SharedState& st, ArenaBlock& a, PipeBlock& p, RecordId r) {
  RecordMeta& m = st.record(r);
  const RecordId next = m.next.load(std::memory_order_acquire);
  if (p.reclaim_record.load(std::memory_order_relaxed) == r) {
    p.reclaim_record.store(next, std::memory_order_relaxed);
  }
  if (p.tail_record.load(std::memory_order_relaxed) == r) {
    p.tail_record.store(kNoRecord, std::memory_order_relaxed);
    if (p.write_record.load(std::memory_order_relaxed) == r) {
      p.write_record.store(kNoRecord, std::memory_order_relaxed);
    }
    if (p.head_record.load(std::memory_order_relaxed) == r) {
      p.head_record.store(kNoRecord, std::memory_order_relaxed);
    }
  }
  if (state_of(m) == RecordState::Committed) {
    p.committed.fetch_sub(1, std::memory_order_relaxed);
    a.committed.fetch_sub(1, std::memory_order_relaxed);
  }
  p.chain_records.fetch_sub(1, std::memory_order_relaxed);
  reset_record(m);
  push_free_tail(st, a, r);
}

}  // namespace

Errc release_records(Arena arena, PipeId pipe, std::span<const RecordId> records) {
  const SharedState& st = arena.state();
  for (RecordId r : records) {
    if (!st.valid_record(r) || !arena.owns(r)) return Errc::not_owner;
    const RecordMeta& m = st.record(r);
    if (m.owner_pipe.load(std::memory_order_acquire) != pipe ||
        state_of(m) == RecordState::Free) {
      return Errc::not_owner;
    }
    if (m.read_cursor.load(std::memory_order_acquire) <
        m.write_cursor.load(std::memory_order_acquire)) {
      return Errc::release_unconsumed;
    }
  }
  ArenaBlock& a = arena.block();
  PipeBlock& p = st.pipe(pipe);
  for (RecordId r : records) release_one(st, a, p, r);
  return Errc::ok;
}

std::uint32_t drain_returns(Arena arena) {
  const SharedState& st = arena.state();
  ArenaBlock& a = arena.block();
  const std::uint64_t head = a.ret_head.load(std::memory_order_relaxed);
  const std::uint64_t tail = a.ret_tail.load(std::memory_order_acquire);
  const ClaimEntry* slots = st.return_slots(a);
  for (std::uint64_t i = head; i < tail; ++i) {
    const ClaimEntry e = slots[i % a.record_count];
    PipeBlock& p = st.pipe(e.pipe);
    // Truncate the chain right before the rolled-back record. Later claims
    // on the same pipe are rolled back too and arrive as their own entries.
    if (p.reclaim_record.load(std::memory_order_relaxed) == e.record) {
      p.tail_record.store(kNoRecord, std::memory_order_relaxed);
      p.reclaim_record.store(kNoRecord, std::memory_order_relaxed);
      p.write_record.store(kNoRecord, std::memory_order_relaxed);
      p.head_record.store(kNoRecord, std::memory_order_release);
    } else if (e.prev != kNoRecord &&
               st.record(e.prev).next.load(std::memory_order_acquire) == e.record) {
      st.record(e.prev).next.store(kNoRecord, std::memory_order_release);
      p.tail_record.store(e.prev, std::memory_order_release);
      if (p.write_record.load(std::memory_order_relaxed) == e.record) {
        p.write_record.store(e.prev, std::memory_order_relaxed);
      }
    }
    p.chain_records.fetch_sub(1, std::memory_order_relaxed);
    RecordMeta& m = st.record(e.record);
    reset_record(m);
    push_free_tail(st, a, e.record);
  }
  a.ret_head.store(tail, std::memory_order_release);
  return static_cast<std::uint32_t>(tail - head);
}

std::uint32_t reclaim_pipe(Arena arena, PipeId pipe) {
  const SharedState& st = arena.state();
  ArenaBlock& a = arena.block();
  PipeBlock& p = st.pipe(pipe);
  std::uint32_t n = 0;
  RecordId r = p.reclaim_record.load(std::memory_order_acquire);
  const std::uint32_t limit = st.record_count() + 1;
  std::uint32_t steps = 0;
  while (r != kNoRecord && steps++ < limit) {
    RecordMeta& m = st.record(r);
    const RecordId next = m.next.load(std::memory_order_acquire);
    if (arena.owns(r) && state_of(m) != RecordState::Free &&
        m.owner_pipe.load(std::memory_order_acquire) == pipe) {
      if (state_of(m) == RecordState::Committed) {
        p.committed.fetch_sub(1, std::memory_order_relaxed);
        a.committed.fetch_sub(1, std::memory_order_relaxed);
      }
      p.chain_records.fetch_sub(1, std::memory_order_relaxed);
      reset_record(m);
      push_free_tail(st, a, r);
      ++n;
    }
    r = next;
  }
  p.reclaim_record.store(kNoRecord, std::memory_order_relaxed);
  p.tail_record.store(kNoRecord, std::memory_order_relaxed);
  p.write_record.store(kNoRecord, std::memory_order_relaxed);
  p.head_record.store(kNoRecord, std::memory_order_relaxed);
  p.teardown_pending.store(0, std::memory_order_release);
  return n;
}

// ---------------------------------------------------------------------------
// Audit

AuditReport audit(const SharedState& st) {
  AuditReport rep;
  const std::uint32_t n = st.record_count();
  std::vector<std::uint32_t> chained_per_arena(st.max_arenas(), 0);
  std::vector<std::uint8_t> seen(n, 0);  // 1 = free list, 2 = chain

  for (std::uint32_t ai = 0; ai < st.max_arenas(); ++ai) {
    const ArenaBlock& a = st.arena(ai);
    if (a.in_use.load(std::memory_order_acquire) == 0) continue;
    const Arena arena(st, ai);
    std::uint32_t count = 0;
    RecordId r = arena.head();
    RecordId last = kNoRecord;
    while (r != kNoRecord && count <= a.record_count) {
      const RecordMeta& m = st.record(r);
      if (!arena.owns(r)) rep.fail("arena " + std::to_string(ai) + ": foreign record in free list");
      if (state_of(m) != RecordState::Free) {
        rep.fail("arena " + std::to_string(ai) + ": non-free record " + std::to_string(r) +
                 " in free list");
      }
      if (m.read_cursor.load() != 0 || m.write_cursor.load() != 0) {
        rep.fail("free record " + std::to_string(r) + " has non-zero cursors");
      }
      if (seen[r] != 0) rep.fail("record " + std::to_string(r) + " appears twice");
      seen[r] = 1;
      last = r;
      r = m.next.load();
      ++count;
    }
    if (count != arena.free_count()) {
      rep.fail("arena " + std::to_string(ai) + ": free list walk " + std::to_string(count) +
               " != free_count " + std::to_string(arena.free_count()));
    }
    if (last != arena.tail()) {
      rep.fail("arena " + std::to_string(ai) + ": free list does not end at tail");
    }
    // Claim log entries reference claimed records in increasing seq order.
    std::uint64_t prev_seq = 0;
    for (const ClaimEntry& e : arena.pending_claims()) {
      if (e.seq <= prev_seq) rep.fail("claim log seq not increasing");
      prev_seq = e.seq;
    }
  }

  for (std::uint32_t ci = 0; ci < st.max_channels(); ++ci) {
    const ChannelBlock& c = st.channel(ci);
    if (c.state.load(std::memory_order_acquire) == static_cast<std::uint32_t>(ChannelState::Unused)) {
      continue;
    }
    for (std::uint32_t dir = 0; dir < 2; ++dir) {
      const PipeId pid = pipe_id(ci, dir);
      const PipeBlock& p = st.pipe(pid);
      if (p.kind != static_cast<std::uint32_t>(PipeKind::Elastic) || p.sender == kNoPrincipal) {
        continue;
      }
      RecordId r = p.reclaim_record.load();
      std::uint32_t steps = 0;
      while (r != kNoRecord && steps++ <= n) {
        const RecordMeta& m = st.record(r);
        const auto kind = static_cast<RecordKind>(m.kind.load());
        const RecordState s = state_of(m);
        if (kind == RecordKind::Arena && s != RecordState::Free) {
          if (seen[r] != 0) {
            rep.fail("record " + std::to_string(r) + " reachable twice (pipe " +
                     std::to_string(pid) + ")");
          }
          seen[r] = 2;
          if (m.owner_pipe.load() != pid) {
            rep.fail("record " + std::to_string(r) + " chained on pipe " + std::to_string(pid) +
                     " but owned by " + std::to_string(m.owner_pipe.load()));
          }
          const std::uint32_t ai = m.arena.load();
          if (ai < st.max_arenas()) ++chained_per_arena[ai];
          if (m.read_cursor.load() > m.write_cursor.load() ||
              m.write_cursor.load() > st.record_size()) {
            rep.fail("record " + std::to_string(r) + " cursor order violated");
          }
          if (s == RecordState::Committed && p.norw_read.load() == 0 &&
              m.reader.load() != p.receiver) {
            rep.fail("committed record " + std::to_string(r) + " not readable by receiver");
          }
          if (s == RecordState::Claimed && m.reader.load() != kNoPrincipal) {
            rep.fail("claimed record " + std::to_string(r) + " readable before commit");
          }
          if (ai < st.max_arenas() && m.writer.load() != st.arena(ai).owner) {
            rep.fail("record " + std::to_string(r) + " writer is not the arena owner");
          }
        }
        if (r == p.tail_record.load()) break;
        r = m.next.load();
      }
    }
  }

  for (std::uint32_t ai = 0; ai < st.max_arenas(); ++ai) {
    const ArenaBlock& a = st.arena(ai);
    if (a.in_use.load(std::memory_order_acquire) == 0) continue;
    const Arena arena(st, ai);
    const std::uint32_t free = arena.free_count();
    const auto pending = static_cast<std::uint32_t>(arena.pending_returns());
    const std::uint32_t chained = chained_per_arena[ai];
    rep.records_free += free;
    rep.records_chained += chained;
    rep.records_pending += pending;
    if (free + chained + pending != a.record_count) {
      rep.fail("arena " + std::to_string(ai) + ": conservation " + std::to_string(free) + "+" +
               std::to_string(chained) + "+" + std::to_string(pending) +
               " != " + std::to_string(a.record_count));
    }
    // Every arena record is accounted for exactly once.
    for (std::uint32_t i = 0; i < a.record_count; ++i) {
      const RecordId r = static_cast<RecordId>(a.first_record + i);
      const RecordMeta& m = st.record(r);
      if (state_of(m) == RecordState::Free && seen[r] == 0) continue;  // pending return
      if (seen[r] == 0) {
        rep.fail("record " + std::to_string(r) + " in state " +
                 std::to_string(m.state.load()) + " is on no chain");
      }
      if (m.writer.load() != a.owner) {
        rep.fail("record " + std::to_string(r) + " write permission not held by owner");
      }
    }
  }
  return rep;
}

}  // namespace hetnet

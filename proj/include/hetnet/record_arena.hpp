#pragma once

// Records, per-worker shared arenas and the two-phase (speculative claim,
// broker commit) allocation protocol.
//
// Threading contract:
//   * speculative_claim, release_records, drain_returns, reclaim_pipe: only
//     the arena's owning worker (single-threaded per arena).
//   * broker_commit: broker only.
//   * The claim log is SPSC worker->broker; the return queue is SPSC
//     broker->worker and holds rolled-back records until the owner relinks
//     them at the free-list tail.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hetnet/error.hpp"
#include "hetnet/gshm.hpp"
#include "hetnet/layout.hpp"

namespace hetnet {

struct AllocationPolicy {
  std::uint32_t max_records_per_channel = 256;
  std::uint32_t max_records_per_process = 2048;
  std::uint64_t record_size_bytes = 64 * 1024;
  std::uint64_t arena_size_bytes = 128ULL * 1024 * 1024;
  std::uint64_t local_record_bytes = 64 * 1024;  // per direction

  // Throws Error(config) on non-positive bounds or misaligned sizes.
  void validate() const;

  std::uint32_t arena_records() const {
    return static_cast<std::uint32_t>(arena_size_bytes / record_size_bytes);
  }

  // One JSON object with the keys max_records_per_channel,
  // max_records_per_process, record_size_bytes, arena_size_bytes,
  // local_record_bytes. Unknown keys are rejected.
  static AllocationPolicy parse(std::string_view text);
  static AllocationPolicy load(const std::filesystem::path& path);

  bool operator==(const AllocationPolicy&) const = default;
};

// Contiguous record ranges not yet handed to an arena, a local record or a
// ring. Broker-private.
class RecordPool {
 public:
  RecordPool() = default;
  RecordPool(RecordId first, std::uint32_t count);

  std::optional<RecordId> allocate(std::uint32_t count);
  void release(RecordId first, std::uint32_t count);
  std::uint32_t free_records() const;

 private:
  std::map<RecordId, std::uint32_t> free_;
};

// Handle to an ArenaBlock in the segment.
class Arena {
 public:
  Arena() = default;
  Arena(const SharedState& state, std::uint32_t slot) : state_(&state), slot_(slot) {}

  bool valid() const { return state_ != nullptr; }
  std::uint32_t slot() const { return slot_; }
  ArenaBlock& block() const { return state_->arena(slot_); }
  const SharedState& state() const { return *state_; }

  Principal worker() const { return block().owner; }
  std::uint32_t record_count() const { return block().record_count; }
  RecordId first_record() const { return static_cast<RecordId>(block().first_record); }
  std::uint32_t free_count() const { return block().free_count.load(std::memory_order_acquire); }
  RecordId head() const { return block().head.load(std::memory_order_acquire); }
  RecordId tail() const { return block().tail.load(std::memory_order_acquire); }
  std::uint64_t capacity_bytes() const { return state_->record_size() * record_count(); }

  bool owns(RecordId r) const {
    return r >= first_record() && r < first_record() + static_cast<RecordId>(record_count());
  }

  // Uncommitted entries of the claim log, oldest first.
  std::vector<ClaimEntry> pending_claims() const;
  std::uint64_t pending_returns() const;
  // Records walked from head along next_record.
  std::vector<RecordId> free_list() const;

 private:
  const SharedState* state_ = nullptr;
  std::uint32_t slot_ = 0;
};

// Carves `record_count` contiguous records out of `pool` into a fresh free
// list owned by `worker`. Throws Error(alignment) for a record size that is
// not a page multiple, Error(invalid_argument) when it differs from the
// segment's record size and Error(segment_exhausted) when no arena slot or
// range is left. `slot` pins the arena slot; by default the first free one.
Arena arena_init(const SharedState& state, RecordPool& pool, Principal worker, std::uint32_t pid,
                 std::uint64_t record_size, std::uint32_t record_count,
                 std::uint32_t slot = kNoArena);

// Returns the arena's records to the pool and frees the slot. Broker only,
// and only once no channel chains reference the records.
void arena_destroy(Arena arena, RecordPool& pool);

// Sets up a pipe whose chain starts at `local` (kNoRecord for none) and grows
// from `arena_slot`.
void pipe_init(const SharedState& state, PipeId pipe, Principal sender, Principal receiver,
               RecordId local, std::uint32_t arena_slot);

// Sets up a fixed reservation ring of `count` contiguous records.
void pipe_init_ring(const SharedState& state, PipeId pipe, Principal sender, Principal receiver,
                    RecordId first, std::uint32_t count);

struct ClaimLimits {
  std::uint32_t max_records_per_channel = 0xffffffffU;
  std::uint32_t max_records_per_process = 0xffffffffU;

  static ClaimLimits from(const AllocationPolicy& p) {
    return {p.max_records_per_channel, p.max_records_per_process};
  }
};

// Worker-side: moves `n` records from the free-list head onto the pipe's
// chain in FIFO order and logs them for commit. No broker interaction.
// Errors: arena_exhausted when fewer than n are free; rate_limited when the
// locally known bounds would be exceeded.
Result<std::vector<RecordId>> speculative_claim(Arena arena, PipeId pipe, std::uint32_t n,
                                                const ClaimLimits& limits = {});

// Single-record fast path used by the channel data path.
Result<RecordId> claim_one(Arena arena, PipeId pipe, const ClaimLimits& limits);

struct CommitReport {
  std::vector<RecordId> committed;
  std::vector<RecordId> rolled_back;

  bool empty() const { return committed.empty() && rolled_back.empty(); }
};

// Broker-side: ratifies the claim log in seq order. Claims within policy
// become Committed and the pipe's receiver is granted Read; claims over a
// bound are marked Free, queued for return to the owner and flag the pipe
// with rate_limit_violation.
CommitReport broker_commit(Arena arena, const AllocationPolicy& policy);

// Worker-side: frees fully consumed records of `pipe` to the free-list tail.
// Errc::release_unconsumed if any record still has unread bytes,
// Errc::not_owner if a record is not chained on `pipe` from this arena.
// Nothing is released when an error is returned.
Errc release_records(Arena arena, PipeId pipe, std::span<const RecordId> records);

// Worker-side: relinks rolled-back records at the free-list tail and truncates
// the affected chains. Returns the number of records processed.
std::uint32_t drain_returns(Arena arena);

// Frees every record of this arena still chained on a torn-down pipe and
// clears its teardown_pending flag. Owner worker, or the broker once the owner
// is gone.
std::uint32_t reclaim_pipe(Arena arena, PipeId pipe);

// Records held by processes with this pid (sum of committed counters).
std::uint32_t committed_by_process(const SharedState& state, std::uint32_t pid);

struct AuditReport {
  bool ok = true;
  std::vector<std::string> problems;
  std::uint32_t records_free = 0;
  std::uint32_t records_chained = 0;
  std::uint32_t records_pending = 0;

  void fail(std::string msg) {
    ok = false;
    problems.push_back(std::move(msg));
  }
};

// Full scan of arenas, free lists and pipe chains. Must run while no worker
// or broker is mutating the segment. Checks conservation, single-chain
// membership, free-list shape and permission consistency.
AuditReport audit(const SharedState& state);

}  // namespace hetnet

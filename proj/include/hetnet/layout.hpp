#pragma once

// Shared-segment layout. Everything in here lives inside the GShm segment and
// is addressed by segment-relative offsets or record indices only, so every
// process mapping the segment sees the same structure at any base address.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <span>

namespace hetnet {

inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint64_t kSegmentMagic = 0x48455443'4e455431ULL;  // "HETCNET1"
inline constexpr std::uint32_t kLayoutVersion = 1;

using RecordId = std::int32_t;
using Principal = std::uint32_t;
using PipeId = std::uint32_t;
using ChannelId = std::uint32_t;
using TokenId = std::uint64_t;

inline constexpr RecordId kNoRecord = -1;
inline constexpr Principal kNoPrincipal = 0;
inline constexpr PipeId kNoPipe = 0xffffffffU;
inline constexpr std::uint32_t kNoArena = 0xffffffffU;

constexpr std::uint64_t page_round_up(std::uint64_t n) {
  return (n + kPageSize - 1) / kPageSize * kPageSize;
}

enum class RecordState : std::uint32_t { Free = 0, Claimed = 1, Committed = 2 };

enum class RecordKind : std::uint32_t {
  Unassigned = 0,  // in the broker's pool
  Arena = 1,
  Local = 2,
  Ring = 3,  // part of a fixed per-connection reservation
};

struct alignas(64) RecordMeta {
  std::atomic<std::uint32_t> state;
  std::atomic<std::uint32_t> kind;
  std::atomic<std::uint32_t> arena;
  std::atomic<std::uint32_t> owner_pipe;
  std::atomic<std::int32_t> next;
  std::atomic<std::uint32_t> write_cursor;
  std::atomic<std::uint32_t> read_cursor;
  std::atomic<std::uint32_t> writer;  // principal holding Write, 0 if none
  std::atomic<std::uint32_t> reader;  // principal holding Read, 0 if none
  std::uint32_t reserved;
  std::atomic<std::uint64_t> start;  // stream offset of byte 0 in this use
  std::atomic<std::uint64_t> seq;    // claim sequence number
};
static_assert(sizeof(RecordMeta) == 64);

struct ClaimEntry {
  std::uint64_t seq;
  std::uint32_t pipe;
  std::int32_t record;
  std::int32_t prev;
  std::uint32_t reserved;
};

struct alignas(64) ArenaBlock {
  // Written by the broker at registration.
  std::atomic<std::uint32_t> in_use;
  std::uint32_t owner;
  std::uint32_t pid;
  std::uint32_t first_record;
  std::uint32_t record_count;
  std::uint32_t reserved0;

  // Owner-worker side.
  alignas(64) std::atomic<std::int32_t> head;
  std::atomic<std::int32_t> tail;
  std::atomic<std::uint32_t> free_count;
  std::atomic<std::uint64_t> next_seq;
  std::atomic<std::uint64_t> claim_tail;  // producer cursor of the claim log
  std::atomic<std::uint64_t> ret_head;    // consumer cursor of the return queue
  std::atomic<std::uint64_t> teardown_seen;

  // Broker side.
  alignas(64) std::atomic<std::uint64_t> claim_head;
  std::atomic<std::uint64_t> ret_tail;
  std::atomic<std::uint32_t> committed;
  std::atomic<std::uint64_t> teardown_epoch;

  alignas(64) std::atomic<std::uint64_t> waiter_token;
};

enum class PipeKind : std::uint32_t { Elastic = 0, Reserve = 1 };

struct alignas(64) PipeBlock {
  // Fixed at channel creation.
  std::uint32_t sender;
  std::uint32_t receiver;
  std::int32_t local_record;
  std::uint32_t arena;
  std::uint32_t kind;
  std::int32_t ring_first;
  std::uint32_t ring_records;
  std::uint32_t reserved0;
  std::uint64_t ring_bytes;

  // Sender side.
  alignas(64) std::atomic<std::uint64_t> write_pos;
  std::atomic<std::int32_t> write_record;
  std::atomic<std::int32_t> tail_record;
  std::atomic<std::int32_t> reclaim_record;
  std::atomic<std::uint32_t> local_in_chain;
  std::atomic<std::uint32_t> chain_records;  // arena records linked in
  std::atomic<std::uint32_t> sender_closed;

  // Receiver side.
  alignas(64) std::atomic<std::uint64_t> read_pos;
  std::atomic<std::int32_t> head_record;
  std::atomic<std::uint32_t> receiver_closed;

  // Broker side.
  alignas(64) std::atomic<std::uint32_t> committed;
  std::atomic<std::uint32_t> error;  // Errc of a rollback, 0 if healthy
  std::atomic<std::uint32_t> torn_down;
  std::atomic<std::uint32_t> teardown_pending;
  std::atomic<std::uint32_t> norw_read;   // receiver Read revoked for NoRW
  std::atomic<std::uint32_t> norw_write;  // sender Write revoked for NoRW
  std::atomic<std::uint64_t> norw_token;

  // U-NAPI waiter slots: token ids of armed waiters, 0 when none.
  alignas(64) std::atomic<std::uint64_t> reader_waiter;
  std::atomic<std::uint64_t> writer_waiter;
};

enum class ChannelState : std::uint32_t {
  Unused = 0,
  Handshaking = 1,
  Active = 2,
  Draining = 3,
  Closed = 4,
};

struct alignas(64) ChannelBlock {
  std::atomic<std::uint32_t> state;
  std::uint32_t id;
  std::uint32_t principal_a;  // acceptor; sends on pipes[0]
  std::uint32_t principal_b;  // connector; sends on pipes[1]
  std::atomic<std::uint64_t> generation;
  std::atomic<std::uint32_t> closed_a;
  std::atomic<std::uint32_t> closed_b;
  PipeBlock pipes[2];
};

inline constexpr PipeId pipe_id(std::uint32_t channel_index, std::uint32_t dir) {
  return channel_index * 2 + dir;
}
inline constexpr std::uint32_t pipe_channel(PipeId p) { return p / 2; }
inline constexpr std::uint32_t pipe_dir(PipeId p) { return p % 2; }

struct SegmentHeader {
  std::uint64_t magic;
  std::uint32_t version;
  std::uint32_t page_size;
  std::uint64_t record_size;
  std::uint32_t record_count;
  std::uint32_t max_arenas;
  std::uint32_t max_channels;
  std::uint32_t broker_count;
  std::uint64_t records_offset;
  std::uint64_t claims_offset;
  std::uint64_t returns_offset;
  std::uint64_t arenas_offset;
  std::uint64_t channels_offset;
  std::uint64_t data_offset;
  std::uint64_t total_bytes;
};

struct LayoutParams {
  std::uint64_t record_size = 64 * 1024;
  std::uint32_t max_arenas = 16;
  std::uint32_t max_channels = 256;

  bool operator==(const LayoutParams&) const = default;
};

// Pure function of (segment size, layout params): the same inputs give the
// same offsets in every process.
struct SegmentLayout {
  LayoutParams params;
  std::uint32_t record_count = 0;
  std::uint64_t records_offset = 0;
  std::uint64_t claims_offset = 0;
  std::uint64_t returns_offset = 0;
  std::uint64_t arenas_offset = 0;
  std::uint64_t channels_offset = 0;
  std::uint64_t data_offset = 0;
  std::uint64_t total_bytes = 0;

  static SegmentLayout compute(std::uint64_t segment_bytes, const LayoutParams& params);
  static std::uint64_t required_bytes(const LayoutParams& params, std::uint32_t record_count);

  std::uint64_t record_offset(RecordId id) const {
    return data_offset + static_cast<std::uint64_t>(id) * params.record_size;
  }
};

// Typed view over a formatted segment mapping.
class SharedState {
 public:
  SharedState() = default;
  explicit SharedState(std::byte* base);

  // Writes the header and zero-initialised tables; base must be zero-filled.
  static SharedState format(std::byte* base, std::uint64_t segment_bytes,
                            const LayoutParams& params);

  bool valid() const { return base_ != nullptr; }
  const SegmentHeader& header() const { return *header_; }
  std::uint64_t record_size() const { return header_->record_size; }
  std::uint32_t record_count() const { return header_->record_count; }
  std::uint32_t max_arenas() const { return header_->max_arenas; }
  std::uint32_t max_channels() const { return header_->max_channels; }
  std::uint32_t broker_count() const { return header_->broker_count; }
  void set_broker_count(std::uint32_t n) const { header_->broker_count = n; }

  bool valid_record(RecordId id) const {
    return id >= 0 && static_cast<std::uint32_t>(id) < header_->record_count;
  }
  RecordMeta& record(RecordId id) const { return records_[id]; }
  std::byte* data(RecordId id) const {
    return base_ + header_->data_offset + static_cast<std::uint64_t>(id) * header_->record_size;
  }
  std::uint64_t data_offset_of(RecordId id) const {
    return header_->data_offset + static_cast<std::uint64_t>(id) * header_->record_size;
  }

  ArenaBlock& arena(std::uint32_t index) const { return arenas_[index]; }
  ChannelBlock& channel(std::uint32_t index) const { return channels_[index]; }
  PipeBlock& pipe(PipeId p) const { return channels_[pipe_channel(p)].pipes[pipe_dir(p)]; }

  // Claim log / return queue storage; an arena uses the slice starting at its
  // first record index with length record_count.
  ClaimEntry* claim_slots(const ArenaBlock& a) const { return claims_ + a.first_record; }
  ClaimEntry* return_slots(const ArenaBlock& a) const { return returns_ + a.first_record; }

 private:
  std::byte* base_ = nullptr;
  SegmentHeader* header_ = nullptr;
  RecordMeta* records_ = nullptr;
  ClaimEntry* claims_ = nullptr;
  ClaimEntry* returns_ = nullptr;
  ArenaBlock* arenas_ = nullptr;
  ChannelBlock* channels_ = nullptr;
};

}  // namespace hetnet

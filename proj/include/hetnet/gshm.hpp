#pragma once

// Global shared memory (GShm): the named segment every participant maps, and
// the per-record permission map that stands in for page protection.

#include <chrono>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>

#include "hetnet/error.hpp"
#include "hetnet/layout.hpp"

namespace hetnet {

inline constexpr std::string_view kAppPrefix = "hetnet";

// "<app-prefix>.<segment-name>", as passed to shm_open (with leading '/').
std::string shm_object_name(std::string_view segment_name);

// RAII handle to a named shared-memory object mapped read-write.
class Segment {
 public:
  Segment() = default;
  ~Segment();
  Segment(const Segment&) = delete;
  Segment& operator=(const Segment&) = delete;
  Segment(Segment&& other) noexcept;
  Segment& operator=(Segment&& other) noexcept;

  // Creates a zero-filled object. Throws Error(alignment) when size is not a
  // page multiple, Error(name_collision) when the name exists and
  // Error(out_of_memory) when the host cannot back it.
  static Segment create(std::string_view name, std::uint64_t size_bytes);
  static Segment open(std::string_view name);

  // Removes the name; existing mappings stay valid.
  void unlink();
  // When set, the destructor also unlinks the name.
  void set_unlink_on_close(bool v) { unlink_on_close_ = v; }

  std::byte* data() const { return data_; }
  std::uint64_t size() const { return size_; }
  std::uint64_t page_size() const { return kPageSize; }
  const std::string& name() const { return name_; }
  bool is_open() const { return data_ != nullptr; }

 private:
  void reset() noexcept;

  std::byte* data_ = nullptr;
  std::uint64_t size_ = 0;
  std::string name_;
  int fd_ = -1;
  bool unlink_on_close_ = false;
};

enum class AccessKind : std::uint8_t { Read = 1, Write = 2 };

struct PermissionSet {
  bool read = false;
  bool write = false;

  bool contains(AccessKind k) const { return k == AccessKind::Read ? read : write; }
  bool operator==(const PermissionSet&) const = default;
};

struct FaultEvent {
  Principal principal = kNoPrincipal;
  RecordId record = kNoRecord;
  AccessKind access = AccessKind::Read;
  std::uint64_t timestamp_ns = 0;
};

struct Allowed {};
using AccessResult = std::variant<Allowed, FaultEvent>;

inline bool is_allowed(const AccessResult& r) { return std::holds_alternative<Allowed>(r); }

// Per-record permissions stored in the segment. Each record carries one
// writer slot and one reader slot, so at most one principal can ever hold
// Write on a record.
class PermissionMap {
 public:
  explicit PermissionMap(const SharedState& state) : state_(&state) {}

  PermissionSet get(Principal who, RecordId record) const;

  // Broker-side mutations.
  void grant(Principal who, RecordId record, AccessKind kind) const;
  void revoke(Principal who, std::span<const RecordId> records, AccessKind kind) const;
  void clear(RecordId record) const;

  const SharedState& state() const { return *state_; }

 private:
  const SharedState* state_;
};

// Gate for every data-path access. Returns a FaultEvent (and bumps the fault
// counter) instead of Allowed when the principal lacks `kind` on `record`.
// Throws Error(unknown_record) for ids outside the layout.
AccessResult check_access(const PermissionMap& pmap, Principal who, RecordId record,
                          AccessKind kind);

std::uint64_t monotonic_ns();

// Process-wide instrumentation counters.
struct Counters {
  std::atomic<std::uint64_t> faults_raised{0};
  // Messages sent by runtimes to brokers, split by purpose. Data-path code
  // only ever sends fault and notify messages.
  std::atomic<std::uint64_t> fault_messages{0};
  std::atomic<std::uint64_t> notify_messages{0};
  std::atomic<std::uint64_t> control_messages{0};

  std::uint64_t messaging_syscalls() const {
    return fault_messages.load() + notify_messages.load() + control_messages.load();
  }
};
Counters& counters();

}  // namespace hetnet

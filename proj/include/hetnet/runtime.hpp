#pragma once

// Process-side runtime: maps the segment, talks to the broker and delivers
// notification completions. A Worker is one principal with its own arena.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "hetnet/gshm.hpp"
#include "hetnet/layout.hpp"
#include "hetnet/record_arena.hpp"
#include "hetnet/wire.hpp"

namespace hetnet {

inline constexpr std::uint32_t kNotifyRead = 1;
inline constexpr std::uint32_t kNotifyWrite = 2;

enum class NotifyMode : std::uint8_t { Sync, Async };
enum class TokenState : std::uint32_t { Disabled = 0, Armed = 1, Fired = 2, Closed = 3 };
enum class NotifyEvent : std::uint8_t { Ready, Closed };

using NotifyCallback = std::function<void(NotifyEvent)>;

class Runtime;

// One waiter registration. Re-armable; each arming has its own generation and
// produces at most one delivery.
class NotifyToken {
 public:
  TokenId id() const { return id_; }
  NotifyMode mode() const { return mode_; }
  std::uint32_t mask() const { return mask_; }
  TokenState state() const { return static_cast<TokenState>(state_.load()); }
  std::uint64_t generation() const { return gen_.load(); }
  std::uint64_t deliveries() const { return deliveries_.load(); }
  NotifyEvent last_event() const { return static_cast<NotifyEvent>(event_.load()); }
  Runtime& runtime() const { return *rt_; }

  // Blocks until the current arming fires. False on timeout.
  bool wait(std::chrono::milliseconds timeout = std::chrono::hours(24));

 private:
  friend class Runtime;
  struct Slot {
    std::atomic<std::uint64_t>* word;
  };

  Runtime* rt_ = nullptr;
  TokenId id_ = 0;
  NotifyMode mode_ = NotifyMode::Sync;
  std::uint32_t mask_ = 0;
  NotifyCallback callback_;
  std::atomic<std::uint32_t> state_{0};
  std::atomic<std::uint64_t> gen_{0};
  std::atomic<std::uint64_t> deliveries_{0};
  std::atomic<std::uint32_t> event_{0};
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<Slot> slots_;
  std::vector<std::uint32_t> entries_;
  // NoRW registration: pipe whose peer access was revoked.
  PipeId norw_pipe_ = kNoPipe;
  std::uint32_t norw_mask_ = 0;
};

struct RuntimeOptions {
  std::uint32_t broker = 0;  // index of this runtime's broker
  std::chrono::milliseconds call_timeout{5000};
};

class Runtime : public std::enable_shared_from_this<Runtime> {
 public:
  static std::shared_ptr<Runtime> attach(const std::string& segment, RuntimeOptions opts = {});
  ~Runtime();
  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  const std::string& segment_name() const { return segment_name_; }
  const SharedState& state() const { return state_; }
  const PermissionMap& pmap() const { return pmap_; }
  std::uint32_t broker() const { return opts_.broker; }
  std::uint32_t broker_count() const { return broker_count_; }

  // Request/reply with a broker. Throws Error(io) on timeout.
  wire::Msg call(wire::Msg m, std::uint32_t broker);
  wire::Msg call(wire::Msg m) { return call(std::move(m), opts_.broker); }
  // Fire-and-forget to a broker; `counter` is bumped once.
  void send(const wire::Msg& m, std::uint32_t broker, std::atomic<std::uint64_t>& counter);

  // Data-path fault: asks the broker to resolve an access fault. Returns ok
  // when the access may be retried, else the rejection code.
  Errc fault(Principal who, RecordId record, AccessKind kind);

  // Signals the waiter whose token id is in `slot`, if any (peer side of a
  // state change). Consumes the slot.
  void signal_slot(std::atomic<std::uint64_t>& slot, wire::Status status = wire::Status::Ok);

  // Token plumbing used by unapi and the channel.
  std::shared_ptr<NotifyToken> make_token(Principal owner, NotifyMode mode,
                                          NotifyCallback cb = {});
  // Publishes the token in `slots`, registers it with the broker, then
  // re-checks `ready`; fires immediately when it already holds. Returns
  // conflicting_token when a slot holds another armed token.
  Errc arm(NotifyToken& t, std::uint32_t mask, const std::vector<std::uint32_t>& entries,
           const std::vector<std::atomic<std::uint64_t>*>& slots,
           const std::function<bool()>& ready);
  // NoRW: arms `t` and asks the broker to revoke the peer's access on `pipe`.
  Errc arm_norw(NotifyToken& t, PipeId pipe, std::uint32_t mask);
  void disarm(NotifyToken& t);
  // Fires the current arming locally (condition observed true).
  bool fire(NotifyToken& t, std::uint64_t gen, NotifyEvent ev);

  void release_token(TokenId id);
  std::shared_ptr<NotifyToken> find_token(TokenId id) const;
  std::size_t live_tokens() const;

  std::uint64_t dispatcher_cpu_ns() const;
  const wire::Address& events_address() const { return events_addr_; }

 private:
  Runtime() = default;
  void dispatch_loop();
  std::uint32_t token_broker(TokenId id) const;
  void deliver(const std::shared_ptr<NotifyToken>& t, NotifyEvent ev);
  std::unique_ptr<wire::Socket> take_call_socket();
  void put_call_socket(std::unique_ptr<wire::Socket> s);

  RuntimeOptions opts_;
  std::string segment_name_;
  std::string base_name_;
  Segment segment_;
  SharedState state_;
  PermissionMap pmap_{state_};
  std::uint32_t broker_count_ = 1;
  std::vector<wire::Address> brokers_;

  wire::Socket events_;
  wire::Address events_addr_;
  int wake_fd_ = -1;
  std::thread dispatcher_;
  std::atomic<bool> stopping_{false};
  std::atomic<clockid_t> dispatcher_clock_{0};
  std::atomic<bool> dispatcher_ready_{false};

  std::mutex call_mu_;
  std::vector<std::unique_ptr<wire::Socket>> call_pool_;
  std::uint32_t call_sockets_ = 0;
  std::atomic<std::uint32_t> next_req_{1};

  mutable std::mutex tokens_mu_;
  std::unordered_map<TokenId, std::weak_ptr<NotifyToken>> tokens_;
  std::atomic<std::uint32_t> next_token_{1};

  std::mutex local_mu_;
  std::deque<std::pair<std::weak_ptr<NotifyToken>, NotifyEvent>> local_;
};

struct WorkerOptions {
  std::uint32_t arena_records = 0;  // 0: no arena (receive-only worker)
  ClaimLimits limits;
};

// One principal. Owns its arena's worker side: claims, releases, draining
// returned records and reclaiming torn-down pipes all happen on the thread
// that writes on this worker's channels.
class Worker {
 public:
  Worker(std::shared_ptr<Runtime> rt, WorkerOptions opts = {});
  ~Worker();
  Worker(const Worker&) = delete;
  Worker& operator=(const Worker&) = delete;

  Runtime& runtime() const { return *rt_; }
  const std::shared_ptr<Runtime>& runtime_ptr() const { return rt_; }
  Principal principal() const { return principal_; }
  bool has_arena() const { return arena_.valid(); }
  Arena arena() const { return arena_; }
  const ClaimLimits& limits() const { return opts_.limits; }

  // Drains rolled-back records and reclaims pipes torn down by the broker.
  void maintain();
  // Commit point: asks the broker to commit this worker's pending claims.
  void yield();
  // Synchronous commit (tests).
  void commit();

  // Releases consumed records of every outgoing pipe of this worker.
  std::uint32_t reclaim_consumed();
  bool reclaimable() const;

  void add_tx_pipe(PipeId p);
  void remove_tx_pipe(PipeId p);

 private:
  std::shared_ptr<Runtime> rt_;
  WorkerOptions opts_;
  Principal principal_ = kNoPrincipal;
  Arena arena_;
  std::vector<PipeId> tx_pipes_;
};

// Releases the records of `pipe` that the receiver has moved past. Sender
// side of the elastic data path; returns the number of arena records freed.
std::uint32_t reclaim_consumed_pipe(const SharedState& st, Arena arena, PipeId pipe);

}  // namespace hetnet

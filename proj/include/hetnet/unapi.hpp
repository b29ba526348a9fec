#pragma once

// User-mode notification API over channels: readiness tokens (blocking or
// callback), proactive status messages, notify-on-access via permission
// revocation, and an adaptive poll/interrupt controller.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string_view>

#include "hetnet/channel.hpp"
#include "hetnet/error.hpp"
#include "hetnet/runtime.hpp"

namespace hetnet::unapi {

// Arms a token on `ch` for `mask` (kNotifyRead: unread bytes exist,
// kNotifyWrite: space to write exists). Sync blocks the caller until the
// condition holds or the channel closes and returns the fired token; Async
// returns the armed token and `cb` later runs once on the dispatcher thread.
// Fails with conflicting_token when another armed token covers the same
// condition.
Result<std::shared_ptr<NotifyToken>> enable_notify(Channel& ch, NotifyMode mode,
                                                   std::uint32_t mask, NotifyCallback cb = {});

// Arms an existing token again with its previous mask.
Errc rearm(Channel& ch, NotifyToken& t);

// No delivery happens after this returns. Idempotent.
void disable_notify(NotifyToken& t);

// Tells the peer's broker about a state change on `ch`: kNotifyRead when
// this side wrote (peer may read), kNotifyWrite when it consumed (peer may
// write). Wakes an armed peer token, otherwise the broker remembers it for
// the next arming. Dropped on closed channels.
void proactive_notify(Channel& ch, std::uint32_t what);

// Revokes the peer's access so that its next access faults and fires the
// returned token. kNotifyRead watches the peer reading this side's data,
// kNotifyWrite watches it writing. Exactly one bit.
Result<std::shared_ptr<NotifyToken>> notify_on_rw(Channel& ch, std::uint32_t mask,
                                                  NotifyMode mode = NotifyMode::Async,
                                                  NotifyCallback cb = {});

// Blocks until one of `chans` is ready for `mask`; returns its index.
// Accelerated channels share one token; socket channels use poll(2).
// Mixing the two is rejected.
Result<std::size_t> wait_any(std::span<Channel* const> chans, std::uint32_t mask);

// ---------------------------------------------------------------------------

enum class PollMode : std::uint8_t { Interrupt, Polling };

std::string_view to_string(PollMode m);

struct PollConfig {
  std::uint64_t spin_budget = 4096;
  std::uint32_t burst_threshold = 8;
  std::chrono::microseconds burst_window{1000};
  std::optional<PollMode> forced;

  // JSON object with optional keys spin_budget, burst_threshold,
  // burst_window_us. Throws Error(config).
  static PollConfig parse(std::string_view json);
  static PollConfig load(const std::filesystem::path& path);
  // Applies UNAPI_FORCE_MODE=poll|interrupt if set. Throws Error(config).
  PollConfig& apply_env();
};

class PollController {
 public:
  using Clock = std::chrono::steady_clock;

  explicit PollController(PollConfig cfg = {}, PollMode initial = PollMode::Polling);

  // One poll iteration or delivered event.
  PollMode step(bool event_observed, Clock::time_point now = Clock::now());

  PollMode mode() const { return mode_; }
  std::uint64_t idle_spins() const { return idle_spins_; }
  std::uint32_t burst_count() const { return burst_count_; }
  std::uint64_t transitions() const { return transitions_; }
  const PollConfig& config() const { return cfg_; }

 private:
  PollConfig cfg_;
  PollMode mode_;
  std::uint64_t idle_spins_ = 0;
  std::uint32_t burst_count_ = 0;
  Clock::time_point window_start_{};
  std::uint64_t transitions_ = 0;
};

// Waits until `ch` is ready for `mask`, spinning with sched_yield while the
// controller is polling and blocking on a Sync token once it has switched
// to interrupt mode.
void adaptive_wait(Channel& ch, std::uint32_t mask, PollController& pc);

}  // namespace hetnet::unapi

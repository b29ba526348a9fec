#include "hetnet/unapi.hpp"

#include <poll.h>
#include <sched.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "hetnet/wire.hpp"

namespace hetnet::unapi {

namespace {

bool ready_for(const Channel& ch, std::uint32_t mask) {
  return ((mask & kNotifyRead) && ch.readable()) || ((mask & kNotifyWrite) && ch.writable());
}

struct ArmSpec {
  std::vector<std::uint32_t> entries;
  std::vector<std::atomic<std::uint64_t>*> slots;
};

void add_arm_spec(const Channel& ch, std::uint32_t mask, ArmSpec& s) {
  if (mask & kNotifyRead) {
    s.entries.push_back(wire::arm_entry(ch.rx_pipe(), kNotifyRead));
    s.slots.push_back(ch.reader_slot());
  }
  if (mask & kNotifyWrite) {
    s.entries.push_back(wire::arm_entry(ch.tx_pipe(), kNotifyWrite));
    s.slots.push_back(ch.writer_slot());
    if (auto* a = ch.arena_slot()) s.slots.push_back(a);
  }
}

short poll_events(std::uint32_t mask) {
  short ev = 0;
  if (mask & kNotifyRead) ev |= POLLIN;
  if (mask & kNotifyWrite) ev |= POLLOUT;
  return ev;
}

// Socket channels have no shared-memory slots; a short-lived watcher polls
// the descriptor and fires the arming it was started for.
void watch_socket(std::shared_ptr<Runtime> rt, std::weak_ptr<NotifyToken> weak, int fd,
                  std::uint32_t mask, std::uint64_t gen) {
  std::thread([rt = std::move(rt), weak, fd, mask, gen] {
    for (;;) {
      auto t = weak.lock();
      if (!t || t->state() != TokenState::Armed || t->generation() != gen) return;
      pollfd p{fd, poll_events(mask), 0};
      const int rc = ::poll(&p, 1, 20);
      if (rc > 0) {
        const bool hup = (p.revents & (POLLHUP | POLLERR)) != 0;
        rt->fire(*t, gen, hup ? NotifyEvent::Closed : NotifyEvent::Ready);
        return;
      }
    }
  }).detach();
}

Errc arm_on(Channel& ch, NotifyToken& t, std::uint32_t mask) {
  Runtime& rt = ch.worker().runtime();
  if (!ch.accelerated()) {
    const Errc e = rt.arm(t, mask, {}, {}, [&] { return ready_for(ch, mask); });
    if (e != Errc::ok) return e;
    if (t.state() != TokenState::Armed) return Errc::ok;
    if (t.mode() == NotifyMode::Sync) {
      pollfd p{ch.fd(), poll_events(mask), 0};
      while (::poll(&p, 1, -1) < 0 && errno == EINTR) {
      }
      rt.fire(t, t.generation(),
              (p.revents & (POLLHUP | POLLERR)) ? NotifyEvent::Closed : NotifyEvent::Ready);
      return Errc::ok;
    }
    auto sp = rt.find_token(t.id());
    if (sp) watch_socket(ch.worker().runtime_ptr(), sp, ch.fd(), mask, t.generation());
    return Errc::ok;
  }
  ArmSpec s;
  add_arm_spec(ch, mask, s);
  const Errc e = rt.arm(t, mask, s.entries, s.slots, [&] { return ready_for(ch, mask); });
  if (e != Errc::ok) return e;
  if (t.mode() == NotifyMode::Sync) t.wait();
  return Errc::ok;
}

}  // namespace

Result<std::shared_ptr<NotifyToken>> enable_notify(Channel& ch, NotifyMode mode,
                                                   std::uint32_t mask, NotifyCallback cb) {
  if (mask == 0 || (mask & ~(kNotifyRead | kNotifyWrite)) != 0) return Errc::invalid_argument;
  auto t = ch.worker().runtime().make_token(ch.worker().principal(), mode, std::move(cb));
  const Errc e = arm_on(ch, *t, mask);
  if (e != Errc::ok) return e;
  return t;
}

Errc rearm(Channel& ch, NotifyToken& t) {
  if (t.mask() == 0) return Errc::invalid_argument;
  return arm_on(ch, t, t.mask());
}

void disable_notify(NotifyToken& t) {
  if (t.state() == TokenState::Disabled) return;
  t.runtime().disarm(t);
}

void proactive_notify(Channel& ch, std::uint32_t what) {
  if (!ch.accelerated()) return;
  Runtime& rt = ch.worker().runtime();
  // Always addressed by pipe: the broker wakes whichever token is armed
  // there when the status arrives, or parks it for the next arming. A slot
  // read here could be stale or not yet published.
  auto send_status = [&](PipeId pipe, std::uint32_t bit) {
    wire::Msg m;
    m.type = wire::Type::Status;
    m.token = 0;
    m.pipe = pipe;
    m.mask = bit;
    m.principal = ch.worker().principal();
    rt.send(m, wire::broker_of(ch.peer()) % rt.broker_count(), counters().notify_messages);
  };
  if (what & kNotifyRead) send_status(ch.tx_pipe(), kNotifyRead);
  if (what & kNotifyWrite) send_status(ch.rx_pipe(), kNotifyWrite);
}

Result<std::shared_ptr<NotifyToken>> notify_on_rw(Channel& ch, std::uint32_t mask,
                                                  NotifyMode mode, NotifyCallback cb) {
  if (mask != kNotifyRead && mask != kNotifyWrite) return Errc::invalid_argument;
  if (!ch.accelerated()) return Errc::invalid_argument;
  Runtime& rt = ch.worker().runtime();
  auto t = rt.make_token(ch.worker().principal(), mode, std::move(cb));
  const PipeId pipe = mask == kNotifyRead ? ch.tx_pipe() : ch.rx_pipe();
  const Errc e = rt.arm_norw(*t, pipe, mask);
  if (e != Errc::ok) return e;
  if (mode == NotifyMode::Sync) t->wait();
  return t;
}

Result<std::size_t> wait_any(std::span<Channel* const> chans, std::uint32_t mask) {
  if (chans.empty() || mask == 0) return Errc::invalid_argument;
  const bool accel = chans.front()->accelerated();
  for (Channel* c : chans) {
    if (c->accelerated() != accel) return Errc::invalid_argument;
  }
  auto first_ready = [&]() -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < chans.size(); ++i) {
      if (ready_for(*chans[i], mask)) return i;
    }
    return std::nullopt;
  };
  if (auto i = first_ready()) return *i;
  if (!accel) {
    std::vector<pollfd> fds;
    for (Channel* c : chans) fds.push_back(pollfd{c->fd(), poll_events(mask), 0});
    for (;;) {
      const int rc = ::poll(fds.data(), fds.size(), -1);
      if (rc < 0 && errno == EINTR) continue;
      if (rc < 0) return Errc::io;
      for (std::size_t i = 0; i < fds.size(); ++i) {
        if (fds[i].revents != 0) return i;
      }
    }
  }
  Worker& w = chans.front()->worker();
  Runtime& rt = w.runtime();
  ArmSpec s;
  for (Channel* c : chans) add_arm_spec(*c, mask, s);
  if (s.entries.size() > wire::kMaxPipes) return Errc::invalid_argument;
  auto t = rt.make_token(w.principal(), NotifyMode::Sync);
  for (;;) {
    const Errc e = rt.arm(*t, mask, s.entries, s.slots, [&] { return first_ready().has_value(); });
    if (e != Errc::ok) return e;
    t->wait();
    if (auto i = first_ready()) return *i;
  }
}

// ---------------------------------------------------------------------------

std::string_view to_string(PollMode m) {
  return m == PollMode::Polling ? "poll" : "interrupt";
}

PollConfig PollConfig::parse(std::string_view text) {
  PollConfig c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config, std::string("notify config: ") + e.what());
  }
  if (!j.is_object()) throw Error(Errc::config, "notify config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (!v.is_number_unsigned()) throw Error(Errc::config, "'" + key + "' must be a non-negative integer");
    if (key == "spin_budget") {
      c.spin_budget = v.get<std::uint64_t>();
    } else if (key == "burst_threshold") {
      c.burst_threshold = v.get<std::uint32_t>();
      if (c.burst_threshold == 0) throw Error(Errc::config, "burst_threshold must be positive");
    } else if (key == "burst_window_us") {
      c.burst_window = std::chrono::microseconds(v.get<std::uint64_t>());
    } else {
      throw Error(Errc::config, "unknown notify config key '" + key + "'");
    }
  }
  return c;
}

PollConfig PollConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::config, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

PollConfig& PollConfig::apply_env() {
  const char* v = std::getenv("UNAPI_FORCE_MODE");
  if (v == nullptr || *v == '\0') return *this;
  const std::string_view s(v);
  if (s == "poll") {
    forced = PollMode::Polling;
  } else if (s == "interrupt") {
    forced = PollMode::Interrupt;
  } else {
    throw Error(Errc::config, "UNAPI_FORCE_MODE must be poll or interrupt");
  }
  return *this;
}

PollController::PollController(PollConfig cfg, PollMode initial)
    : cfg_(cfg), mode_(cfg.forced.value_or(initial)) {}

PollMode PollController::step(bool event_observed, Clock::time_point now) {
  if (cfg_.forced) return mode_;
  if (mode_ == PollMode::Polling) {
    if (event_observed) {
      idle_spins_ = 0;
    } else if (++idle_spins_ > cfg_.spin_budget) {
      mode_ = PollMode::Interrupt;
      idle_spins_ = 0;
      burst_count_ = 0;
      ++transitions_;
    }
    return mode_;
  }
  if (!event_observed) return mode_;
  if (burst_count_ == 0 || now - window_start_ > cfg_.burst_window) {
    window_start_ = now;
    burst_count_ = 1;
  } else {
    ++burst_count_;
  }
  if (burst_count_ >= cfg_.burst_threshold) {
    mode_ = PollMode::Polling;
    burst_count_ = 0;
    idle_spins_ = 0;
    ++transitions_;
  }
  return mode_;
}

void adaptive_wait(Channel& ch, std::uint32_t mask, PollController& pc) {
  for (;;) {
    if (ready_for(ch, mask)) {
      pc.step(true);
      return;
    }
    if (pc.mode() == PollMode::Polling) {
      pc.step(false);
      ::sched_yield();
      continue;
    }
    if (mask & kNotifyRead) {
      ch.wait_readable();
    } else {
      ch.wait_writable();
    }
    if (ready_for(ch, mask)) {
      pc.step(true);
      return;
    }
  }
}

}  // namespace hetnet::unapi

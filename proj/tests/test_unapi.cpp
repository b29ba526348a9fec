#include <gtest/gtest.h>

#include <time.h>

#include <cstdlib>
#include <deque>
#include <future>
#include <random>

#include "hetnet/unapi.hpp"
#include "hetnet/wire.hpp"
#include "support.hpp"

using namespace hetnet;
using namespace hetnet::unapi;
using hetnet::testing::ChannelPair;
using hetnet::testing::PairOptions;

namespace {

PairOptions small(Transport t = Transport::Elastic) {
  PairOptions o;
  o.arena_records = 2;
  o.records = 128;
  o.channel.transport = t;
  o.channel.blocking = false;
  o.channel.reserve_bytes = 2 * o.record_size;
  return o;
}

// Writes until the channel refuses more; returns the byte count.
std::size_t fill(Channel& ch) {
  std::vector<std::byte> chunk(1000, std::byte{7});
  std::size_t total = 0;
  for (;;) {
    auto r = ch.try_write(chunk.data(), chunk.size());
    if (!r) break;
    total += *r;
  }
  return total;
}

std::uint64_t thread_cpu_ns() {
  timespec ts{};
  ::clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<std::uint64_t>(ts.tv_sec) * 1'000'000'000ULL +
         static_cast<std::uint64_t>(ts.tv_nsec);
}

// Aborts the process if an iteration makes no progress for 5 s.
class Watchdog {
 public:
  explicit Watchdog(const char* what) : what_(what) {
    t_ = std::thread([this] {
      std::uint64_t last = beat_.load();
      auto since = std::chrono::steady_clock::now();
      while (!stop_.load()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
        const std::uint64_t b = beat_.load();
        if (b != last) {
          last = b;
          since = std::chrono::steady_clock::now();
        } else if (std::chrono::steady_clock::now() - since > std::chrono::seconds(5)) {
          std::fprintf(stderr, "watchdog: %s stalled at iteration %llu\n", what_,
                       static_cast<unsigned long long>(b));
          std::abort();
        }
      }
    });
  }
  ~Watchdog() {
    stop_.store(true);
    t_.join();
  }
  void beat() { beat_.fetch_add(1, std::memory_order_relaxed); }

 private:
  const char* what_;
  std::atomic<std::uint64_t> beat_{0};
  std::atomic<bool> stop_{false};
  std::thread t_;
};

template <class Pred>
bool eventually(Pred p, std::chrono::milliseconds limit = std::chrono::seconds(3)) {
  const auto end = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < end) {
    if (p()) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  return p();
}

}  // namespace

// --- enable / disable -------------------------------------------------------

TEST(EnableNotify, SyncReadOnNonEmptyChannelReturnsAtOnce) {
  for (Transport t : {Transport::Elastic, Transport::Reserve, Transport::Socket}) {
    ChannelPair p(small(t));
    const char x = 'x';
    ASSERT_TRUE(p.b->try_write(&x, 1));
    if (t == Transport::Socket) ASSERT_TRUE(eventually([&] { return p.a->readable(); }));
    auto tok = enable_notify(*p.a, NotifyMode::Sync, kNotifyRead);
    ASSERT_TRUE(tok) << to_string(t);
    EXPECT_EQ((*tok)->state(), TokenState::Fired);
    EXPECT_EQ((*tok)->deliveries(), 1u);
  }
}

TEST(EnableNotify, SyncWriteOnFullChannelWakesWhenPeerReads) {
  for (Transport t : {Transport::Elastic, Transport::Reserve}) {
    ChannelPair p(small(t));
    const std::size_t filled = fill(*p.b);
    ASSERT_GT(filled, 0u);
    ASSERT_FALSE(p.b->writable());
    std::atomic<bool> peer_read{false};
    std::thread reader([&] {
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
      std::vector<std::byte> buf(filled);
      peer_read = true;
      ASSERT_TRUE(p.a->try_read(buf.data(), buf.size()));
    });
    auto tok = enable_notify(*p.b, NotifyMode::Sync, kNotifyWrite);
    EXPECT_TRUE(peer_read.load());
    ASSERT_TRUE(tok);
    EXPECT_EQ((*tok)->state(), TokenState::Fired);
    EXPECT_EQ((*tok)->last_event(), NotifyEvent::Ready);
    reader.join();
    EXPECT_TRUE(p.b->writable());
  }
}

TEST(EnableNotify, ConflictingArmedTokenIsRejected) {
  ChannelPair p(small());
  auto t1 = enable_notify(*p.a, NotifyMode::Async, kNotifyRead, [](NotifyEvent) {});
  ASSERT_TRUE(t1);
  auto t2 = enable_notify(*p.a, NotifyMode::Async, kNotifyRead, [](NotifyEvent) {});
  ASSERT_FALSE(t2);
  EXPECT_EQ(t2.error(), Errc::conflicting_token);
  disable_notify(**t1);
  auto t3 = enable_notify(*p.a, NotifyMode::Async, kNotifyRead, [](NotifyEvent) {});
  EXPECT_TRUE(t3);
}

TEST(EnableNotify, CloseWhileArmedDeliversClosed) {
  ChannelPair p(small());
  std::atomic<int> closed{0};
  auto tok = enable_notify(*p.a, NotifyMode::Async, kNotifyRead, [&](NotifyEvent ev) {
    if (ev == NotifyEvent::Closed) ++closed;
  });
  ASSERT_TRUE(tok);
  std::thread t([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    p.b->close();
  });
  auto sync = enable_notify(*p.b, NotifyMode::Sync, kNotifyWrite);  // writable: returns
  ASSERT_TRUE(sync);
  t.join();
  ASSERT_TRUE(eventually([&] { return (*tok)->state() != TokenState::Armed; }));
  // End of stream counts as readable; the callback ran exactly once.
  EXPECT_TRUE(eventually([&] { return (*tok)->deliveries() == 1; }));
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  EXPECT_EQ((*tok)->deliveries(), 1u);
  EXPECT_LE(closed.load(), 1);
}

TEST(EnableNotify, AsyncReadRacesDeliverExactlyOnce) {
  PairOptions o = small();
  o.arena_records = 4;
  ChannelPair p(o);
  constexpr int kIterations = 100000;
  std::atomic<int> callbacks{0};
  std::atomic<int> go{0};
  std::atomic<bool> stop{false};
  std::thread writer([&] {
    std::mt19937 rng(11);
    int seen = 0;
    while (!stop.load()) {
      const int g = go.load(std::memory_order_acquire);
      if (g == seen) {
        std::this_thread::yield();
        continue;
      }
      seen = g;
      for (unsigned k = rng() % 3; k > 0; --k) std::this_thread::yield();
      const char x = 1;
      ASSERT_TRUE(p.b->try_write(&x, 1));
    }
  });
  auto tok = enable_notify(*p.a, NotifyMode::Async, kNotifyRead, [&](NotifyEvent) { ++callbacks; });
  ASSERT_TRUE(tok);
  disable_notify(**tok);
  callbacks = 0;
  const auto base = (*tok)->deliveries();
  std::mt19937 rng(12);
  Watchdog dog("async race");
  for (int i = 0; i < kIterations; ++i) {
    go.store(i + 1, std::memory_order_release);
    for (unsigned k = rng() % 3; k > 0; --k) std::this_thread::yield();
    ASSERT_EQ(rearm(*p.a, **tok), Errc::ok);
    while (callbacks.load() < i + 1) std::this_thread::yield();
    char c = 0;
    while (!p.a->try_read(&c, 1)) std::this_thread::yield();
    ASSERT_EQ((*tok)->deliveries() - base, static_cast<std::uint64_t>(i + 1));
    dog.beat();
  }
  stop = true;
  writer.join();
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  EXPECT_EQ(callbacks.load(), kIterations);
}

TEST(EnableNotify, SyncRacesNeverLoseWakeups) {
  PairOptions o = small();
  o.arena_records = 4;
  ChannelPair p(o);
  constexpr int kIterations = 100000;
  std::atomic<int> go{0};
  std::atomic<bool> stop{false};
  std::thread writer([&] {
    std::mt19937 rng(21);
    int seen = 0;
    while (!stop.load()) {
      const int g = go.load(std::memory_order_acquire);
      if (g == seen) {
        std::this_thread::yield();
        continue;
      }
      seen = g;
      for (unsigned k = rng() % 3; k > 0; --k) std::this_thread::yield();
      const char x = 2;
      ASSERT_TRUE(p.b->try_write(&x, 1));
    }
  });
  auto tok = p.rt_a->make_token(p.wa->principal(), NotifyMode::Sync);
  std::mt19937 rng(22);
  Watchdog dog("sync race");
  for (int i = 0; i < kIterations; ++i) {
    go.store(i + 1, std::memory_order_release);
    for (unsigned k = rng() % 3; k > 0; --k) std::this_thread::yield();
    if (i == 0) {
      auto first = enable_notify(*p.a, NotifyMode::Sync, kNotifyRead);
      ASSERT_TRUE(first);
      tok = *first;
    } else {
      ASSERT_EQ(rearm(*p.a, *tok), Errc::ok);
    }
    ASSERT_EQ(tok->state(), TokenState::Fired);
    char c = 0;
    while (!p.a->try_read(&c, 1)) std::this_thread::yield();
    dog.beat();
  }
  stop = true;
  writer.join();
  EXPECT_EQ(tok->deliveries(), static_cast<std::uint64_t>(kIterations));
}

TEST(DisableNotify, NoCallbackAfterDisable) {
  ChannelPair p(small());
  std::atomic<int> n{0};
  auto tok = enable_notify(*p.a, NotifyMode::Async, kNotifyRead, [&](NotifyEvent) { ++n; });
  ASSERT_TRUE(tok);
  disable_notify(**tok);
  disable_notify(**tok);  // idempotent
  EXPECT_EQ((*tok)->state(), TokenState::Disabled);
  const char x = 3;
  ASSERT_TRUE(p.b->try_write(&x, 1));
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  EXPECT_EQ(n.load(), 0);
}

TEST(DisableNotify, RaceWithFiringDeliversAtMostOnce) {
  ChannelPair p(small());
  std::atomic<int> n{0};
  auto tok = enable_notify(*p.a, NotifyMode::Async, kNotifyRead, [&](NotifyEvent) { ++n; });
  ASSERT_TRUE(tok);
  disable_notify(**tok);
  std::mt19937 rng(31);
  const std::uint64_t base = (*tok)->deliveries();
  for (int i = 0; i < 10000; ++i) {
    const std::uint64_t d0 = (*tok)->deliveries();
    ASSERT_EQ(rearm(*p.a, **tok), Errc::ok);
    std::thread w([&] {
      const char x = 4;
      (void)p.b->try_write(&x, 1);
    });
    for (unsigned k = rng() % 3; k > 0; --k) std::this_thread::yield();
    disable_notify(**tok);
    w.join();
    // Deliveries are counted when the arming is consumed, so once disabled
    // this arming's count is final.
    ASSERT_LE((*tok)->deliveries() - d0, 1u) << "iteration " << i;
    char c;
    while (!p.a->try_read(&c, 1)) std::this_thread::yield();
  }
  const std::uint64_t delivered = (*tok)->deliveries() - base;
  ASSERT_TRUE(eventually([&] { return static_cast<std::uint64_t>(n.load()) == delivered; }));
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  EXPECT_EQ(static_cast<std::uint64_t>(n.load()), delivered);
  RecordProperty("fired_before_disable", std::to_string(delivered));
}

// --- proactive notification ------------------------------------------------

TEST(ProactiveNotify, WakesBlockedSender) {
  ChannelPair p(small());
  const std::size_t filled = fill(*p.b);
  std::atomic<int> woke{0};
  auto tok = enable_notify(*p.b, NotifyMode::Async, kNotifyWrite, [&](NotifyEvent) { ++woke; });
  ASSERT_TRUE(tok);
  EXPECT_EQ((*tok)->state(), TokenState::Armed);
  std::vector<std::byte> buf(filled);
  ASSERT_TRUE(p.a->try_read(buf.data(), buf.size()));
  proactive_notify(*p.a, kNotifyWrite);
  ASSERT_TRUE(eventually([&] { return woke.load() == 1; }));
}

TEST(ProactiveNotify, RecordedWhenNothingArmed) {
  ChannelPair p(small());
  ASSERT_FALSE(p.a->readable());
  proactive_notify(*p.b, kNotifyRead);
  ASSERT_TRUE(eventually([&] {
    return p.fabric->broker().dump().find("pending " + std::to_string(p.b->tx_pipe()) + "/R") !=
           std::string::npos;
  }));
  // The channel is still empty, but the recorded status completes the arming.
  std::atomic<int> n{0};
  auto tok = enable_notify(*p.a, NotifyMode::Async, kNotifyRead, [&](NotifyEvent) { ++n; });
  ASSERT_TRUE(tok);
  ASSERT_TRUE(eventually([&] { return n.load() == 1; }));
  EXPECT_EQ(p.fabric->broker().dump().find("pending"), std::string::npos);
}

TEST(ProactiveNotify, StatusArrivingAfterArmWakesTheToken) {
  ChannelPair p(small());
  fill(*p.b);
  std::atomic<int> woke{0};
  auto tok = enable_notify(*p.b, NotifyMode::Async, kNotifyWrite, [&](NotifyEvent) { ++woke; });
  ASSERT_TRUE(tok);
  ASSERT_EQ((*tok)->state(), TokenState::Armed);
  // The notifier looked at the slot before the arming published it.
  p.fabric->state().pipe(p.b->tx_pipe()).writer_waiter.store(0);
  proactive_notify(*p.a, kNotifyWrite);
  ASSERT_TRUE(eventually([&] { return woke.load() == 1; }));
  EXPECT_EQ(p.fabric->broker().dump().find("pending"), std::string::npos);
}

TEST(ProactiveNotify, DroppedOnClosedChannel) {
  ChannelPair p(small());
  p.a->close();
  p.b->close();
  ASSERT_TRUE(eventually([&] {
    p.wa->maintain();
    p.wb->maintain();
    return p.fabric->broker().zombie_channels() == 0;
  }));
  const auto statuses = p.fabric->broker().stats().statuses;
  proactive_notify(*p.b, kNotifyRead);
  ASSERT_TRUE(eventually([&] { return p.fabric->broker().stats().statuses > statuses; }));
  EXPECT_EQ(p.fabric->broker().dump().find("pending"), std::string::npos);
}

// --- notify on access -----------------------------------------------------------

namespace {

std::vector<std::pair<std::uint64_t, std::uint64_t>> chain_perms(const ChannelPair& p, PipeId pipe) {
  const SharedState& st = p.fabric->state();
  std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
  RecordId r = st.pipe(pipe).head_record.load();
  while (r != kNoRecord) {
    out.emplace_back(st.record(r).writer.load(), st.record(r).reader.load());
    r = st.record(r).next.load();
  }
  return out;
}

}  // namespace

TEST(NotifyOnRw, ReceiverReadFaultsAndNotifiesSender) {
  ChannelPair p(small());
  std::vector<std::byte> msg(6000);
  for (std::size_t i = 0; i < msg.size(); ++i) msg[i] = static_cast<std::byte>(i % 251);
  ASSERT_EQ(*p.b->write(msg.data(), msg.size()), msg.size());
  p.wb->commit();
  std::atomic<int> n{0};
  auto tok = notify_on_rw(*p.b, kNotifyRead, NotifyMode::Async, [&](NotifyEvent) { ++n; });
  ASSERT_TRUE(tok);
  const auto faults0 = counters().fault_messages.load();
  std::vector<std::byte> buf(msg.size());
  ASSERT_EQ(p.a->read_exact(buf), Errc::ok);
  EXPECT_EQ(buf, msg);
  EXPECT_EQ(counters().fault_messages.load() - faults0, 1u);
  ASSERT_TRUE(eventually([&] { return n.load() == 1; }));
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  EXPECT_EQ(n.load(), 1);
}

TEST(NotifyOnRw, WriterFaultNotifiesReceiver) {
  ChannelPair p(small());
  std::atomic<int> n{0};
  auto tok = notify_on_rw(*p.a, kNotifyWrite, NotifyMode::Async, [&](NotifyEvent) { ++n; });
  ASSERT_TRUE(tok);
  const char x = 5;
  ASSERT_TRUE(p.b->try_write(&x, 1));
  ASSERT_TRUE(eventually([&] { return n.load() == 1; }));
  char c = 0;
  ASSERT_TRUE(p.a->try_read(&c, 1));
  EXPECT_EQ(c, 5);
}

TEST(NotifyOnRw, NoAccessNoNotification) {
  ChannelPair p(small());
  const char x = 6;
  ASSERT_TRUE(p.b->try_write(&x, 1));
  std::atomic<int> n{0};
  auto tok = notify_on_rw(*p.b, kNotifyRead, NotifyMode::Async, [&](NotifyEvent) { ++n; });
  ASSERT_TRUE(tok);
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  EXPECT_EQ(n.load(), 0);
  EXPECT_EQ((*tok)->state(), TokenState::Armed);
}

TEST(NotifyOnRw, DisableRestoresPermissionsWithoutFault) {
  ChannelPair p(small());
  std::vector<std::byte> msg(5000, std::byte{9});
  ASSERT_EQ(*p.b->write(msg.data(), msg.size()), msg.size());
  p.wb->commit();
  const auto before = chain_perms(p, p.b->tx_pipe());
  auto tok = notify_on_rw(*p.b, kNotifyRead, NotifyMode::Async, [](NotifyEvent) {});
  ASSERT_TRUE(tok);
  EXPECT_NE(chain_perms(p, p.b->tx_pipe()), before);
  disable_notify(**tok);
  EXPECT_EQ(chain_perms(p, p.b->tx_pipe()), before);
  const auto faults0 = counters().fault_messages.load();
  std::vector<std::byte> buf(msg.size());
  ASSERT_EQ(p.a->read_exact(buf), Errc::ok);
  EXPECT_EQ(counters().fault_messages.load(), faults0);
}

TEST(NotifyOnRw, RejectsBothBitsAndSockets) {
  ChannelPair p(small());
  EXPECT_EQ(notify_on_rw(*p.a, kNotifyRead | kNotifyWrite).error(), Errc::invalid_argument);
  ChannelPair s(small(Transport::Socket));
  EXPECT_EQ(notify_on_rw(*s.a, kNotifyRead).error(), Errc::invalid_argument);
}

// --- wait_any -------------------------------------------------------------------

TEST(WaitAny, ReturnsTheChannelThatBecameReadable) {
  PairOptions o = small();
  auto fabric = hetnet::testing::make_fabric(o, "any");
  auto rt_a = Runtime::attach(fabric->name());
  auto rt_b = Runtime::attach(fabric->name());
  Worker wa(rt_a, WorkerOptions{4, {}});
  Worker wb(rt_b, WorkerOptions{4, {}});
  auto listener = Listener::listen(wa, "127.0.0.1", 0, o.channel);
  std::vector<std::unique_ptr<Channel>> rx;
  std::vector<std::unique_ptr<Channel>> tx;
  for (int i = 0; i < 4; ++i) {
    std::unique_ptr<Channel> c;
    std::thread t([&] { c = connect(wb, "127.0.0.1", listener->port(), o.channel); });
    rx.push_back(listener->accept());
    t.join();
    tx.push_back(std::move(c));
  }
  std::vector<Channel*> set;
  for (auto& c : rx) set.push_back(c.get());
  for (std::size_t target : {2u, 0u, 3u, 1u}) {
    std::thread w([&] {
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
      const char x = 1;
      ASSERT_TRUE(tx[target]->try_write(&x, 1));
    });
    auto r = wait_any(set, kNotifyRead);
    w.join();
    ASSERT_TRUE(r);
    EXPECT_EQ(*r, target);
    char c;
    ASSERT_TRUE(rx[target]->try_read(&c, 1));
  }
  rx.clear();
  tx.clear();
}

// --- controller ----------------------------------------------------------------

TEST(PollController, SpinBudgetExhaustionSwitchesToInterrupt) {
  PollConfig cfg;
  cfg.spin_budget = 1000;
  PollController pc(cfg);
  for (int i = 0; i < 1000; ++i) pc.step(false);
  EXPECT_EQ(pc.mode(), PollMode::Polling);
  EXPECT_EQ(pc.idle_spins(), 1000u);
  pc.step(false);
  EXPECT_EQ(pc.mode(), PollMode::Interrupt);
  EXPECT_EQ(pc.transitions(), 1u);
}

TEST(PollController, EventResetsIdleSpins) {
  PollConfig cfg;
  cfg.spin_budget = 10;
  PollController pc(cfg);
  for (int round = 0; round < 50; ++round) {
    for (int i = 0; i < 10; ++i) pc.step(false);
    pc.step(true);
  }
  EXPECT_EQ(pc.mode(), PollMode::Polling);
}

TEST(PollController, SteadyStreamReturnsToPollingWithinOneWindow) {
  PollConfig cfg;  // 8 events per 1000 us
  PollController pc(cfg, PollMode::Interrupt);
  auto t = PollController::Clock::time_point{} + std::chrono::seconds(1);
  int events = 0;
  while (pc.mode() == PollMode::Interrupt && events < 100) {
    pc.step(true, t);
    t += std::chrono::microseconds(100);
    ++events;
  }
  EXPECT_EQ(pc.mode(), PollMode::Polling);
  EXPECT_EQ(events, 8);
  EXPECT_LE((events - 1) * 100, 1000);
}

TEST(PollController, SparseEventsStayInInterrupt) {
  PollController pc(PollConfig{}, PollMode::Interrupt);
  auto t = PollController::Clock::time_point{} + std::chrono::seconds(1);
  pc.step(true, t);
  for (int i = 0; i < 100; ++i) pc.step(false, t);
  EXPECT_EQ(pc.mode(), PollMode::Interrupt);
  // Events 2 ms apart never form a burst.
  for (int i = 0; i < 100; ++i) {
    t += std::chrono::milliseconds(2);
    pc.step(true, t);
  }
  EXPECT_EQ(pc.mode(), PollMode::Interrupt);
}

TEST(PollController, ForcedModeNeverChanges) {
  PollConfig cfg;
  cfg.spin_budget = 1;
  cfg.forced = PollMode::Polling;
  PollController pc(cfg, PollMode::Interrupt);
  EXPECT_EQ(pc.mode(), PollMode::Polling);
  for (int i = 0; i < 100; ++i) pc.step(false);
  EXPECT_EQ(pc.mode(), PollMode::Polling);
}

TEST(PollConfig, ParseAndEnv) {
  const PollConfig c =
      PollConfig::parse(R"({"spin_budget": 100, "burst_threshold": 3, "burst_window_us": 250})");
  EXPECT_EQ(c.spin_budget, 100u);
  EXPECT_EQ(c.burst_threshold, 3u);
  EXPECT_EQ(c.burst_window, std::chrono::microseconds(250));
  const PollConfig d = PollConfig::parse("{}");
  EXPECT_EQ(d.spin_budget, 4096u);
  EXPECT_EQ(d.burst_threshold, 8u);
  EXPECT_EQ(d.burst_window, std::chrono::microseconds(1000));
  EXPECT_THROW(PollConfig::parse(R"({"spin": 1})"), Error);
  EXPECT_THROW(PollConfig::parse(R"({"spin_budget": -1})"), Error);
  EXPECT_THROW(PollConfig::parse("[1]"), Error);

  ::setenv("UNAPI_FORCE_MODE", "interrupt", 1);
  PollConfig e;
  e.apply_env();
  EXPECT_EQ(e.forced, PollMode::Interrupt);
  ::setenv("UNAPI_FORCE_MODE", "poll", 1);
  e.apply_env();
  EXPECT_EQ(e.forced, PollMode::Polling);
  ::setenv("UNAPI_FORCE_MODE", "sometimes", 1);
  EXPECT_THROW(e.apply_env(), Error);
  ::unsetenv("UNAPI_FORCE_MODE");
}

TEST(PollMode, BusyPollingObservesEveryByte) {
  PairOptions o = small();
  o.arena_records = 8;
  ChannelPair p(o);
  constexpr std::size_t kTotal = 1 << 20;
  std::vector<std::byte> sent(kTotal);
  std::mt19937 rng(41);
  for (auto& b : sent) b = static_cast<std::byte>(rng() & 0xff);
  std::thread writer([&] {
    std::size_t off = 0;
    std::mt19937 r(42);
    while (off < kTotal) {
      const std::size_t n = std::min<std::size_t>(1 + r() % 9000, kTotal - off);
      auto w = p.b->try_write(sent.data() + off, n);
      if (w) {
        off += *w;
      } else {
        std::this_thread::yield();
      }
    }
  });
  PollConfig cfg;
  cfg.forced = PollMode::Polling;
  PollController pc(cfg);
  std::vector<std::byte> got;
  std::vector<std::byte> buf(7000);
  while (got.size() < kTotal) {
    adaptive_wait(*p.a, kNotifyRead, pc);
    auto r = p.a->try_read(buf.data(), buf.size());
    ASSERT_TRUE(r);
    got.insert(got.end(), buf.begin(), buf.begin() + static_cast<long>(*r));
  }
  writer.join();
  EXPECT_EQ(got, sent);
}

TEST(PollMode, IdleInterruptCostsUnderFivePercentOfPolling) {
  ChannelPair p(small());
  constexpr auto kWindow = std::chrono::milliseconds(300);
  auto measure = [&](PollMode mode) {
    PollConfig cfg;
    cfg.forced = mode;
    const std::uint64_t broker0 = p.fabric->broker().cpu_ns();
    const std::uint64_t disp0 = p.rt_a->dispatcher_cpu_ns();
    std::atomic<std::uint64_t> waiter_ns{0};
    std::thread waiter([&] {
      PollController pc(cfg);
      const std::uint64_t c0 = thread_cpu_ns();
      adaptive_wait(*p.a, kNotifyRead, pc);
      waiter_ns = thread_cpu_ns() - c0;
    });
    std::this_thread::sleep_for(kWindow);
    const char x = 1;
    EXPECT_TRUE(p.b->try_write(&x, 1));
    waiter.join();
    char c;
    EXPECT_TRUE(p.a->try_read(&c, 1));
    return waiter_ns.load() + (p.fabric->broker().cpu_ns() - broker0) +
           (p.rt_a->dispatcher_cpu_ns() - disp0);
  };
  const std::uint64_t poll_ns = measure(PollMode::Polling);
  const std::uint64_t intr_ns = measure(PollMode::Interrupt);
  RecordProperty("poll_ns", std::to_string(poll_ns));
  RecordProperty("intr_ns", std::to_string(intr_ns));
  EXPECT_LT(static_cast<double>(intr_ns), 0.05 * static_cast<double>(poll_ns))
      << "poll " << poll_ns << " ns, interrupt " << intr_ns << " ns";
}

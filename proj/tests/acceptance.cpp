// Acceptance runner. Prints one PASS/FAIL line per criterion.
//
//   acceptance            all criteria
//   acceptance 3 7        selected criteria
//
// Exit status is 0 when every selected criterion passes or is marked
// host-limited (single-CPU hosts only, with the supporting measurement
// printed next to the verdict).

#include <sched.h>
#include <sys/mman.h>
#include <sys/wait.h>
#include <time.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hetnet/bench.hpp"
#include "hetnet/netns.hpp"
#include "hetnet/unapi.hpp"
#include "ref_allocator.hpp"
#include "support.hpp"

using namespace hetnet;
using hetnet::testing::ChannelPair;
using hetnet::testing::PairOptions;
using Clock = std::chrono::steady_clock;

namespace {

// --- tolerances and sizes ------------------------------------------------------

constexpr int kStreamTraces = 10000;
constexpr std::size_t kMaxChunk = 1 << 20;
constexpr double kStreamBudgetS = 60;

constexpr int kArenaTraces = 10000;
constexpr double kArenaBudgetS = 60;

constexpr std::size_t kMinPackets = 16;
constexpr std::size_t kPlacements = 4;
constexpr double kNetnsBudgetS = 10;

constexpr int kPortOps = 10000;
constexpr double kPortBudgetS = 5;

constexpr std::uint32_t kBwConns = 100;
constexpr std::uint64_t kBwMsg = 64 * 1024;
constexpr std::chrono::milliseconds kBwDuration{3000};
constexpr double kBwThroughputFloor = 0.90;  // Elastic / Reserve(16 MiB)
constexpr double kBwPinnedRatio = 16;        // Reserve(16 MiB) / Elastic
constexpr double kBwBudgetS = 120;

constexpr std::uint64_t kLatMsg = 16;
constexpr std::uint64_t kLatIters = 20000;
constexpr int kLatRounds = 5;
constexpr double kLatRatio = 5;  // Baseline p50 / Elastic p50
constexpr double kLatBudgetS = 60;

constexpr int kRaces = 100000;
constexpr auto kWatchdog = std::chrono::seconds(5);
constexpr double kRaceBudgetS = 120;

constexpr auto kIdleWindow = std::chrono::milliseconds(2000);
constexpr double kIdleShare = 0.05;  // Interrupt CPU / Polling CPU
constexpr int kControllerConfigs = 2000;
constexpr double kIdleBudgetS = 30;

constexpr std::uint64_t kSmallRing = 256 * 1024;
constexpr std::uint64_t kLargeRing = 16ULL << 20;
constexpr std::uint64_t kDegradeMsg = 256 * 1024;
constexpr std::chrono::milliseconds kDegradeDuration{2000};
constexpr int kDegradeRuns = 5;
constexpr double kDegradeRatio = 0.60;  // Reserve(256 KiB) / Reserve(16 MiB)
constexpr double kDegradeBudgetS = 60;

// --- reporting -----------------------------------------------------------------

struct Outcome {
  bool pass = false;
  bool host_limited = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

std::uint64_t thread_cpu_ns() {
  timespec ts{};
  ::clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<std::uint64_t>(ts.tv_sec) * 1'000'000'000ULL +
         static_cast<std::uint64_t>(ts.tv_nsec);
}

bool single_cpu() { return std::thread::hardware_concurrency() < 2; }

// Ends the process with a FAIL line when no progress is made for 5 s.
class Watchdog {
 public:
  explicit Watchdog(int criterion) : criterion_(criterion) {
    t_ = std::thread([this] {
      std::uint64_t last = beat_.load();
      auto since = Clock::now();
      while (!stop_.load()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
        const std::uint64_t b = beat_.load();
        if (b != last) {
          last = b;
          since = Clock::now();
        } else if (Clock::now() - since > kWatchdog) {
          std::printf("criterion %d FAIL: no progress for 5 s at iteration %llu (%s)\n", criterion_,
                      static_cast<unsigned long long>(b), what_.load());
          std::fflush(stdout);
          ::_exit(1);
        }
      }
    });
  }
  ~Watchdog() {
    stop_.store(true);
    t_.join();
  }
  void beat(const char* what) {
    what_.store(what);
    beat_.fetch_add(1, std::memory_order_relaxed);
  }

 private:
  int criterion_;
  std::atomic<std::uint64_t> beat_{0};
  std::atomic<const char*> what_{"start"};
  std::atomic<bool> stop_{false};
  std::thread t_;
};

// --- 1: stream fidelity --------------------------------------------------------

// Log-uniform in [1, hi].
std::size_t log_uniform(std::mt19937& rng, std::size_t hi) {
  std::uniform_real_distribution<double> d(0.0, std::log(static_cast<double>(hi) + 1));
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::exp(d(rng))), 1, hi);
}

Outcome stream_fidelity() {
  const auto t0 = Clock::now();
  std::vector<std::byte> pool(2 * kMaxChunk);
  std::mt19937 prng(1);
  for (auto& b : pool) b = static_cast<std::byte>(prng() & 0xff);

  std::uint64_t bytes = 0;
  std::uint64_t max_chunk = 0;
  std::uint64_t min_chunk = kMaxChunk;
  int traces = 0;
  for (Transport t : {Transport::Elastic, Transport::Reserve, Transport::Socket}) {
    PairOptions o;
    o.record_size = 64 * 1024;
    o.arena_records = 32;
    o.records = 512;
    o.channel.transport = t;
    o.channel.blocking = false;
    o.channel.reserve_bytes = kMaxChunk;
    ChannelPair p(o, "accept1");
    std::mt19937 rng(100 + static_cast<std::uint32_t>(t));
    std::vector<std::byte> buf(kMaxChunk);
    const int n = kStreamTraces / 3 + (t == Transport::Elastic ? kStreamTraces % 3 : 0);
    for (int trace = 0; trace < n; ++trace, ++traces) {
      // The byte-queue oracle: everything written, consumed from `head`.
      std::vector<std::byte> queue;
      std::size_t head = 0;
      auto check_read = [&](std::size_t got) -> bool {
        if (got > queue.size() - head) return false;
        if (std::memcmp(buf.data(), queue.data() + head, got) != 0) return false;
        head += got;
        return true;
      };
      const int ops = 1 + static_cast<int>(rng() % 24);
      for (int op = 0; op < ops; ++op) {
        if (rng() % 2 == 0) {
          const std::size_t len = op == 0 && trace % 97 == 0 ? kMaxChunk : log_uniform(rng, kMaxChunk);
          min_chunk = std::min<std::uint64_t>(min_chunk, len);
          max_chunk = std::max<std::uint64_t>(max_chunk, len);
          const std::byte* src = pool.data() + rng() % (pool.size() - len + 1);
          auto r = p.b->try_write(src, len);
          if (r) {
            queue.insert(queue.end(), src, src + *r);
          } else if (r.error() != Errc::would_block) {
            return {false, false, fmt("%s trace %d: write error %s", std::string(to_string(t)).c_str(),
                                      trace, std::string(to_string(r.error())).c_str())};
          }
        } else {
          const std::size_t len = log_uniform(rng, kMaxChunk);
          auto r = p.a->try_read(buf.data(), len);
          if (r) {
            if (!check_read(*r)) {
              return {false, false, fmt("%s trace %d: stream differs from oracle",
                                        std::string(to_string(t)).c_str(), trace)};
            }
          } else if (r.error() != Errc::would_block) {
            return {false, false, fmt("%s trace %d: read error %s", std::string(to_string(t)).c_str(),
                                      trace, std::string(to_string(r.error())).c_str())};
          }
        }
      }
      // Drain what is left so the next trace starts empty.
      const auto deadline = Clock::now() + std::chrono::seconds(10);
      while (head < queue.size()) {
        auto r = p.a->try_read(buf.data(), buf.size());
        if (r) {
          if (!check_read(*r)) {
            return {false, false, fmt("%s trace %d: stream differs from oracle while draining",
                                      std::string(to_string(t)).c_str(), trace)};
          }
        } else if (r.error() != Errc::would_block || Clock::now() > deadline) {
          return {false, false, fmt("%s trace %d: %zu bytes never arrived", std::string(to_string(t)).c_str(),
                                    trace, queue.size() - head)};
        } else {
          std::this_thread::yield();
        }
      }
      bytes += queue.size();
    }
  }
  const double s = seconds_since(t0);
  return {s <= kStreamBudgetS, false,
          fmt("%d traces over elastic, reserve and socket, chunks %llu B..%llu B, %.1f MiB compared "
              "exactly (%.1f s, limit %.0f s)",
              traces, static_cast<unsigned long long>(min_chunk), static_cast<unsigned long long>(max_chunk),
              static_cast<double>(bytes) / (1 << 20), s, kStreamBudgetS)};
}

// --- 2: allocator conservation -------------------------------------------------

Outcome allocator_traces() {
  const auto t0 = Clock::now();
  std::mt19937 rng(77);
  for (int trace = 0; trace < kArenaTraces; ++trace) {
    const std::string err = hetnet::testing::run_arena_trace(rng);
    if (!err.empty()) return {false, false, fmt("trace %d %s", trace, err.c_str())};
  }
  const double s = seconds_since(t0);
  return {s <= kArenaBudgetS, false,
          fmt("%d claim/commit/release/crash traces, audit after every step, final state equals the "
              "reference allocator (%.1f s, limit %.0f s)",
              kArenaTraces, s, kArenaBudgetS)};
}

// --- 3: rule-split equivalence -------------------------------------------------

std::string scenario_path(const char* name) {
  return std::string(HETNET_TEST_DIR) + "/../configs/netns/" + name;
}

Outcome netns_grid() {
  using namespace hetnet::netns;
  const auto t0 = Clock::now();
  Scenario s = Scenario::load(scenario_path("sidecar.json"));
  if (s.placements.size() != kPlacements || s.packets.size() < kMinPackets) {
    return {false, false, fmt("scenario has %zu placements and %zu packets", s.placements.size(),
                              s.packets.size())};
  }
  const FilterRule base = s.rule;
  std::vector<std::pair<std::string, FilterRule>> family;
  FilterRule r = base;
  r.action = Action::redirect(base.action.port, true);
  family.emplace_back("redirect+orig_dst", r);
  r.action = Action::redirect(base.action.port, false);
  family.emplace_back("redirect", r);
  r = base;
  r.action = Action::accept();
  family.emplace_back("accept", r);
  r = base;
  r.match.proto = Protocol::Udp;
  family.emplace_back("redirect/udp", r);

  std::size_t checked = 0;
  for (const auto& [name, rule] : family) {
    s.rule = rule;
    const Verdict v = equivalence_check(s);
    for (const auto& pv : v.placements) checked += pv.packets;
    if (!v.pass) return {false, false, fmt("%s failed:\n%s", name.c_str(), format_verdict(s, v).c_str())};
  }
  // Negative control: the original destination recorded on the sender.
  const Scenario bad = Scenario::load(scenario_path("sidecar_save_on_sender.json"));
  const Verdict bv = equivalence_check(bad);
  bool caught = false;
  for (const auto& pv : bv.placements) {
    if (!pv.pass && pv.detail.find("orig") != std::string::npos) caught = true;
  }
  if (bv.pass || !caught) return {false, false, "save-on-sender mutation was not caught on orig_dst"};
  const double s_el = seconds_since(t0);
  return {s_el <= kNetnsBudgetS, false,
          fmt("%zu rule kinds x %zu placements x %zu packets: %zu/%zu match (receiver, final dst, "
              "orig_dst); save-on-sender mutation fails on orig_dst (%.2f s, limit %.0f s)",
              family.size(), kPlacements, s.packets.size(), checked, checked, s_el, kNetnsBudgetS)};
}

// --- 4: port exclusivity -------------------------------------------------------

Outcome port_exclusivity() {
  using namespace hetnet::netns;
  const auto t0 = Clock::now();
  PortTable t;
  std::map<PortKey, PuId> shadow;
  std::mt19937 rng(5);
  const std::vector<std::string> namespaces{"ns-a", "ns-b", "ns-c"};
  std::uint64_t conflicts = 0;
  for (int step = 0; step < kPortOps; ++step) {
    PortKey k{namespaces[rng() % namespaces.size()], rng() % 2 ? Protocol::Tcp : Protocol::Udp,
              static_cast<std::uint16_t>(8000 + rng() % 64)};
    const PuId pu = rng() % 4;
    if (rng() % 3 != 0) {
      const Errc e = t.register_port(k, pu);
      const bool bound = shadow.count(k) != 0;
      if (bound ? e != Errc::conflict : e != Errc::ok) return {false, false, fmt("step %d: wrong result", step)};
      if (bound) {
        ++conflicts;
      } else {
        shadow[k] = pu;
      }
    } else if (t.unregister_port(k) != (shadow.erase(k) == 1)) {
      return {false, false, fmt("step %d: unregister disagrees", step)};
    }
    // Full audit: each key bound at most once, to the PU that claimed it.
    if (t.bindings().size() != shadow.size()) return {false, false, fmt("step %d: binding count", step)};
    for (const auto& [key, owner] : shadow) {
      if (t.lookup(key) != owner) return {false, false, fmt("step %d: double binding", step)};
    }
  }
  const double s = seconds_since(t0);
  return {s <= kPortBudgetS, false,
          fmt("%d register/unregister ops, %llu conflicts refused, 0 double bindings (%.2f s, limit %.0f s)",
              kPortOps, static_cast<unsigned long long>(conflicts), s, kPortBudgetS)};
}

// --- 5, 6, 9: benchmarks -------------------------------------------------------

bench::Scenario bw(const std::string& id, Transport t, std::uint64_t reserve, std::uint64_t msg,
                   std::uint32_t conns, std::chrono::milliseconds d,
                   bench::NotifyChoice n = bench::NotifyChoice::Auto) {
  bench::Scenario s;
  s.id = id;
  s.op = bench::Op::Throughput;
  s.transport = t;
  s.reserve_bytes = reserve;
  s.msg_size = msg;
  s.conns = conns;
  s.duration = d;
  s.notify = n;
  return s;
}

Outcome elastic_memory() {
  const auto t0 = Clock::now();
  const auto reserve =
      bench::run(bw("reserve16M", Transport::Reserve, kLargeRing, kBwMsg, kBwConns, kBwDuration));
  const auto elastic =
      bench::run(bw("elastic", Transport::Elastic, kLargeRing, kBwMsg, kBwConns, kBwDuration));
  const double tput = elastic.bytes_per_s / reserve.bytes_per_s;
  const double pinned = static_cast<double>(reserve.pinned_bytes) / static_cast<double>(elastic.pinned_bytes);
  const double s = seconds_since(t0);
  return {tput >= kBwThroughputFloor && pinned >= kBwPinnedRatio && s <= kBwBudgetS, false,
          fmt("%u conns, %llu B msgs: elastic %.2f GiB/s vs reserve16M %.2f GiB/s = %.3f (>= %.2f); "
              "pinned %llu vs %llu B = %.1fx saving (>= %.0fx) (%.1f s, limit %.0f s)",
              kBwConns, static_cast<unsigned long long>(kBwMsg), elastic.bytes_per_s / (1 << 30),
              reserve.bytes_per_s / (1 << 30), tput, kBwThroughputFloor,
              static_cast<unsigned long long>(elastic.pinned_bytes),
              static_cast<unsigned long long>(reserve.pinned_bytes), pinned, kBwPinnedRatio, s,
              kBwBudgetS)};
}

// Median round trip of two processes handing a flag back and forth through
// shared memory with sched_yield: the fastest any cross-process wakeup path
// can go on this host.
std::uint64_t yield_pingpong_floor_ns(std::uint64_t iters) {
  void* m = ::mmap(nullptr, 64, PROT_READ | PROT_WRITE, MAP_SHARED | MAP_ANONYMOUS, -1, 0);
  if (m == MAP_FAILED) return 0;
  auto* flag = new (m) std::atomic<std::uint64_t>(0);
  const std::uint64_t total = iters + 1000;
  const pid_t pid = ::fork();
  if (pid == 0) {
    for (std::uint64_t i = 0; i < total; ++i) {
      while (flag->load(std::memory_order_acquire) != 2 * i + 1) ::sched_yield();
      flag->store(2 * i + 2, std::memory_order_release);
    }
    ::_exit(0);
  }
  std::vector<std::uint64_t> rtt;
  rtt.reserve(iters);
  for (std::uint64_t i = 0; i < total; ++i) {
    const auto a = Clock::now();
    flag->store(2 * i + 1, std::memory_order_release);
    while (flag->load(std::memory_order_acquire) != 2 * i + 2) ::sched_yield();
    if (i >= 1000) rtt.push_back(static_cast<std::uint64_t>((Clock::now() - a).count()));
  }
  int st = 0;
  ::waitpid(pid, &st, 0);
  ::munmap(m, 64);
  return bench::percentile(std::move(rtt), 50);
}

std::uint64_t median(std::vector<std::uint64_t> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome latency_ordering() {
  const auto t0 = Clock::now();
  auto lat = [](const std::string& id, Transport t) {
    bench::Scenario s;
    s.id = id;
    s.op = bench::Op::Latency;
    s.transport = t;
    s.msg_size = kLatMsg;
    s.iterations = kLatIters;
    return bench::run(s).p50_ns;
  };
  // Interleaved rounds; each side is summarized by the median of its p50s.
  // On one CPU the floor is sampled in the same rounds: the host drifts.
  std::vector<std::uint64_t> base;
  std::vector<std::uint64_t> el;
  std::vector<std::uint64_t> floors;
  for (int i = 0; i < kLatRounds; ++i) {
    base.push_back(lat("baseline", Transport::Socket));
    el.push_back(lat("elastic", Transport::Elastic));
    if (single_cpu()) floors.push_back(yield_pingpong_floor_ns(kLatIters));
  }
  const std::uint64_t base_p50 = median(base);
  const std::uint64_t el_p50 = median(el);
  const double ratio = static_cast<double>(base_p50) / static_cast<double>(el_p50);
  auto list = [](const std::vector<std::uint64_t>& v) {
    std::string out;
    for (auto x : v) out += fmt("%s%.2f", out.empty() ? "" : "/", x / 1e3);
    return out;
  };
  Outcome o;
  o.pass = ratio >= kLatRatio;
  o.detail = fmt("16 B ping-pong p50 over %d rounds: baseline %s us, elastic %s us; medians %.2f vs "
                 "%.2f us, ratio %.2fx (>= %.0fx)",
                 kLatRounds, list(base).c_str(), list(el).c_str(), base_p50 / 1e3, el_p50 / 1e3, ratio,
                 kLatRatio);
  if (!floors.empty()) {
    const std::uint64_t floor_ns = median(floors);
    const double best = static_cast<double>(base_p50) / static_cast<double>(floor_ns);
    o.host_limited = !o.pass && floor_ns > 0 && best < kLatRatio;
    o.detail += fmt("; 1 CPU: bare shared-memory yield ping-pong p50 %s us (median %.2f), so the best "
                    "reachable ratio here is %.2fx",
                    list(floors).c_str(), floor_ns / 1e3, best);
  }
  const double s = seconds_since(t0);
  o.pass = o.pass && s <= kLatBudgetS;
  o.detail += fmt(" (%.1f s, limit %.0f s)", s, kLatBudgetS);
  return o;
}

Outcome reserve_degradation() {
  const auto t0 = Clock::now();
  std::vector<double> ratios;
  std::string runs;
  for (int i = 0; i < kDegradeRuns; ++i) {
    const auto large = bench::run(bw("reserve16M", Transport::Reserve, kLargeRing, kDegradeMsg, 1,
                                     kDegradeDuration, bench::NotifyChoice::Interrupt));
    const auto small = bench::run(bw("reserve256K", Transport::Reserve, kSmallRing, kDegradeMsg, 1,
                                     kDegradeDuration, bench::NotifyChoice::Interrupt));
    ratios.push_back(small.bytes_per_s / large.bytes_per_s);
    runs += fmt("%s%.2f/%.2f", i ? ", " : "", small.bytes_per_s / (1 << 30), large.bytes_per_s / (1 << 30));
  }
  std::vector<double> sorted = ratios;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[sorted.size() / 2];
  const double s = seconds_since(t0);
  Outcome o;
  o.pass = median <= kDegradeRatio && s <= kDegradeBudgetS;
  o.detail = fmt("256 KiB msgs, blocking waits: reserve256K/reserve16M GiB/s %s; median ratio %.3f "
                 "(<= %.2f) (%.1f s, limit %.0f s)",
                 runs.c_str(), median, kDegradeRatio, s, kDegradeBudgetS);
  if (!o.pass && single_cpu() && s <= kDegradeBudgetS) {
    o.host_limited = true;
    o.detail += "; 1 CPU: sender and receiver never overlap, so ring size only changes how many "
                "context switches each message costs";
  }
  return o;
}

// --- 7: no lost wakeups --------------------------------------------------------

PairOptions race_options() {
  PairOptions o;
  o.arena_records = 4;
  o.records = 128;
  o.channel.transport = Transport::Elastic;
  o.channel.blocking = false;
  return o;
}

// Runs one action per request on its own thread after a random short delay.
class Helper {
 public:
  Helper() {
    t_ = std::thread([this] {
      std::mt19937 rng(9);
      std::uint64_t seen = 0;
      while (!stop_.load()) {
        const std::uint64_t g = seq_.load(std::memory_order_acquire);
        if (g == seen) {
          std::this_thread::yield();
          continue;
        }
        seen = g;
        for (unsigned k = rng() % 3; k > 0; --k) std::this_thread::yield();
        action_();
        done_.store(g, std::memory_order_release);
      }
    });
  }
  ~Helper() {
    stop_.store(true);
    t_.join();
  }
  void start(std::function<void()> f) {
    action_ = std::move(f);
    seq_.fetch_add(1, std::memory_order_acq_rel);
  }
  bool done() const { return done_.load(std::memory_order_acquire) == seq_.load(); }

 private:
  std::function<void()> action_;
  std::atomic<std::uint64_t> seq_{0};
  std::atomic<std::uint64_t> done_{0};
  std::atomic<bool> stop_{false};
  std::thread t_;
};

Outcome wakeup_races() {
  using namespace hetnet::unapi;
  const auto t0 = Clock::now();
  ChannelPair p(race_options(), "accept7");   // async, sync, disable, NoRW
  ChannelPair q(race_options(), "accept7q");  // kept full: proactive
  {
    std::vector<std::byte> chunk(1000, std::byte{7});
    while (q.b->try_write(chunk.data(), chunk.size())) {
    }
  }
  std::atomic<std::uint64_t> async_cb{0};
  std::atomic<std::uint64_t> proactive_cb{0};
  std::atomic<std::uint64_t> norw_cb{0};
  auto tok_async = enable_notify(*p.a, NotifyMode::Async, kNotifyRead, [&](NotifyEvent) { ++async_cb; });
  auto tok_w = enable_notify(*q.b, NotifyMode::Async, kNotifyWrite, [&](NotifyEvent) { ++proactive_cb; });
  if (!tok_async || !tok_w) return {false, false, "cannot arm tokens"};
  if ((*tok_w)->state() != TokenState::Armed) return {false, false, "full channel reported writable"};
  disable_notify(**tok_async);
  disable_notify(**tok_w);
  async_cb = 0;
  proactive_cb = 0;
  std::shared_ptr<NotifyToken> tok_sync;
  const std::uint64_t async_base = (*tok_async)->deliveries();
  const std::uint64_t proactive_base = (*tok_w)->deliveries();

  Helper helper;
  Watchdog dog(7);
  std::mt19937 rng(2024);
  std::uint64_t per_path[6] = {};
  std::uint64_t norw_deliveries = 0;
  std::uint64_t disabled_fired = 0;
  const char one = 1;
  auto write_one = [&] { (void)p.b->try_write(&one, 1); };
  auto read_one = [&]() -> bool {
    char c = 0;
    while (!p.a->try_read(&c, 1)) std::this_thread::yield();
    return c == one;
  };
  auto wait_for = [&](auto pred) {
    while (!pred()) std::this_thread::yield();
  };
  std::vector<std::byte> big(5000, std::byte{3});
  std::vector<std::byte> sink(big.size());

  for (int i = 0; i < kRaces; ++i) {
    const unsigned path = rng() % 6;
    ++per_path[path];
    switch (path) {
      case 0: {  // async read token vs. concurrent write
        const std::uint64_t d0 = (*tok_async)->deliveries();
        const std::uint64_t c0 = async_cb.load();
        helper.start(write_one);
        for (unsigned k = rng() % 3; k > 0; --k) std::this_thread::yield();
        if (rearm(*p.a, **tok_async) != Errc::ok) return {false, false, fmt("race %d: rearm failed", i)};
        dog.beat("async");
        wait_for([&] { return async_cb.load() == c0 + 1 && helper.done(); });
        if ((*tok_async)->deliveries() - d0 != 1) return {false, false, fmt("race %d: async delivered twice", i)};
        if (!read_one()) return {false, false, fmt("race %d: wrong byte", i)};
        break;
      }
      case 1: {  // sync read token vs. concurrent write
        helper.start(write_one);
        for (unsigned k = rng() % 3; k > 0; --k) std::this_thread::yield();
        dog.beat("sync");
        if (!tok_sync) {
          auto t = enable_notify(*p.a, NotifyMode::Sync, kNotifyRead);
          if (!t) return {false, false, fmt("race %d: sync arm failed", i)};
          tok_sync = *t;
        } else {
          const std::uint64_t d0 = tok_sync->deliveries();
          if (rearm(*p.a, *tok_sync) != Errc::ok) return {false, false, fmt("race %d: sync rearm failed", i)};
          if (tok_sync->deliveries() - d0 != 1) return {false, false, fmt("race %d: sync delivery count", i)};
        }
        if (tok_sync->state() != TokenState::Fired) return {false, false, fmt("race %d: sync returned unfired", i)};
        wait_for([&] { return helper.done(); });
        if (!read_one()) return {false, false, fmt("race %d: wrong byte", i)};
        break;
      }
      case 2: {  // disable vs. firing
        const std::uint64_t d0 = (*tok_async)->deliveries();
        if (rearm(*p.a, **tok_async) != Errc::ok) return {false, false, fmt("race %d: rearm failed", i)};
        helper.start(write_one);
        for (unsigned k = rng() % 3; k > 0; --k) std::this_thread::yield();
        disable_notify(**tok_async);
        dog.beat("disable");
        wait_for([&] { return helper.done(); });
        const std::uint64_t d = (*tok_async)->deliveries() - d0;
        if (d > 1) return {false, false, fmt("race %d: disabled arming delivered %llu times", i,
                                             static_cast<unsigned long long>(d))};
        disabled_fired += d;
        wait_for([&] { return async_cb.load() == (*tok_async)->deliveries() - async_base; });
        if (!read_one()) return {false, false, fmt("race %d: wrong byte", i)};
        break;
      }
      case 3: {  // proactive status vs. arming on a full channel
        const std::uint64_t c0 = proactive_cb.load();
        helper.start([&] { proactive_notify(*q.a, kNotifyWrite); });
        for (unsigned k = rng() % 3; k > 0; --k) std::this_thread::yield();
        if (rearm(*q.b, **tok_w) != Errc::ok) return {false, false, fmt("race %d: rearm W failed", i)};
        dog.beat("proactive");
        wait_for([&] { return proactive_cb.load() == c0 + 1 && helper.done(); });
        break;
      }
      case 4: {  // writer access faults and notifies the receiver
        std::atomic<int> n{0};
        auto t = notify_on_rw(*p.a, kNotifyWrite, NotifyMode::Async, [&](NotifyEvent) {
          ++n;
          ++norw_cb;
        });
        if (!t) return {false, false, fmt("race %d: notify_on_rw W failed", i)};
        helper.start(write_one);
        dog.beat("norw-w");
        wait_for([&] { return n.load() == 1 && helper.done(); });
        norw_deliveries += (*t)->deliveries();
        if ((*t)->deliveries() != 1) return {false, false, fmt("race %d: NoRW W delivery count", i)};
        disable_notify(**t);
        if (!read_one()) return {false, false, fmt("race %d: wrong byte", i)};
        break;
      }
      default: {  // reader access faults and notifies the writer
        if (*p.b->write(big.data(), big.size()) != big.size()) return {false, false, "short write"};
        p.wb->commit();
        std::atomic<int> n{0};
        auto t = notify_on_rw(*p.b, kNotifyRead, NotifyMode::Async, [&](NotifyEvent) {
          ++n;
          ++norw_cb;
        });
        if (!t) return {false, false, fmt("race %d: notify_on_rw R failed", i)};
        helper.start([&] { (void)p.a->read_exact(sink); });
        dog.beat("norw-r");
        wait_for([&] { return n.load() == 1 && helper.done(); });
        norw_deliveries += (*t)->deliveries();
        if ((*t)->deliveries() != 1 || sink != big) return {false, false, fmt("race %d: NoRW R", i)};
        disable_notify(**t);
        break;
      }
    }
  }
  // Late duplicates would show up as callbacks beyond the counted deliveries.
  std::this_thread::sleep_for(std::chrono::milliseconds(100));
  const std::uint64_t async_deliv = (*tok_async)->deliveries() - async_base;
  const std::uint64_t pro_deliv = (*tok_w)->deliveries() - proactive_base;
  if (async_cb.load() != async_deliv) return {false, false, "async callbacks differ from deliveries"};
  if (proactive_cb.load() != per_path[3] || pro_deliv != per_path[3]) {
    return {false, false, fmt("proactive: %llu callbacks for %llu armings",
                              static_cast<unsigned long long>(proactive_cb.load()),
                              static_cast<unsigned long long>(per_path[3]))};
  }
  if (norw_cb.load() != norw_deliveries) return {false, false, "NoRW callbacks differ from deliveries"};
  const double s = seconds_since(t0);
  return {s <= kRaceBudgetS, false,
          fmt("%d races (async %llu, sync %llu, disable %llu of which %llu fired, proactive %llu, NoRW "
              "write %llu, NoRW read %llu): 0 hangs, every arming delivered at most once (%.1f s, limit %.0f s)",
              kRaces, static_cast<unsigned long long>(per_path[0]),
              static_cast<unsigned long long>(per_path[1]), static_cast<unsigned long long>(per_path[2]),
              static_cast<unsigned long long>(disabled_fired), static_cast<unsigned long long>(per_path[3]),
              static_cast<unsigned long long>(per_path[4]), static_cast<unsigned long long>(per_path[5]), s,
              kRaceBudgetS)};
}

// --- 8: idle cost and controller thresholds -------------------------------------

// Checks the switching points of random configurations against the
// documented thresholds. Returns an empty string when all hold.
std::string controller_thresholds() {
  using namespace hetnet::unapi;
  std::mt19937 rng(8);
  for (int c = 0; c < kControllerConfigs; ++c) {
    PollConfig cfg;
    cfg.spin_budget = 1 + rng() % 5000;
    cfg.burst_threshold = 1 + rng() % 32;
    cfg.burst_window = std::chrono::microseconds(1 + rng() % 5000);

    // Polling: the budget-th idle step stays, the next one switches; an
    // event anywhere restarts the count.
    PollController pc(cfg);
    const std::uint64_t reset_at = rng() % cfg.spin_budget;
    for (std::uint64_t i = 0; i < reset_at; ++i) pc.step(false);
    pc.step(true);
    for (std::uint64_t i = 0; i < cfg.spin_budget; ++i) {
      if (pc.step(false) != PollMode::Polling) return fmt("config %d: left polling early", c);
    }
    if (pc.step(false) != PollMode::Interrupt) return fmt("config %d: budget exceeded, still polling", c);

    // Interrupt: threshold events inside the window switch on the last one.
    const auto w = std::chrono::duration_cast<PollController::Clock::duration>(cfg.burst_window);
    auto t = PollController::Clock::time_point{} + std::chrono::seconds(1);
    const std::uint32_t n = cfg.burst_threshold;
    PollController in(cfg, PollMode::Interrupt);
    for (std::uint32_t e = 0; e < n; ++e) {
      // Spread events so the last one lands exactly at the window edge.
      const auto at = n == 1 ? t : t + w * static_cast<long>(e) / static_cast<long>(n - 1);
      const PollMode m = in.step(true, at);
      if (m != (e + 1 == n ? PollMode::Polling : PollMode::Interrupt)) {
        return fmt("config %d: burst switch at event %u of %u", c, e + 1, n);
      }
    }
    // One tick past the window the burst starts over.
    if (n > 1) {
      PollController late(cfg, PollMode::Interrupt);
      for (std::uint32_t e = 0; e + 1 < n; ++e) late.step(true, t);
      if (late.step(true, t + w + PollController::Clock::duration(1)) != PollMode::Interrupt) {
        return fmt("config %d: event outside the window counted", c);
      }
      if (late.burst_count() != 1) return fmt("config %d: window did not restart", c);
    }
    // Idle steps never leave Interrupt.
    PollController idle(cfg, PollMode::Interrupt);
    for (int i = 0; i < 100; ++i) {
      if (idle.step(false) != PollMode::Interrupt) return fmt("config %d: idle step left interrupt", c);
    }
  }
  return {};
}

Outcome idle_cost() {
  using namespace hetnet::unapi;
  const auto t0 = Clock::now();
  const std::string err = controller_thresholds();
  if (!err.empty()) return {false, false, err};
  PairOptions o = race_options();
  ChannelPair p(o, "accept8");
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
    std::this_thread::sleep_for(kIdleWindow);
    const char x = 1;
    (void)p.b->try_write(&x, 1);
    waiter.join();
    char c;
    (void)p.a->try_read(&c, 1);
    return waiter_ns.load() + (p.fabric->broker().cpu_ns() - broker0) +
           (p.rt_a->dispatcher_cpu_ns() - disp0);
  };
  const std::uint64_t poll_ns = measure(PollMode::Polling);
  const std::uint64_t intr_ns = measure(PollMode::Interrupt);
  const double share = static_cast<double>(intr_ns) / static_cast<double>(poll_ns);
  const double s = seconds_since(t0);
  return {share < kIdleShare && s <= kIdleBudgetS, false,
          fmt("idle 2 s: interrupt %.3f ms CPU vs polling %.1f ms = %.4f%% (< %.0f%%); %d random "
              "controller configs switch exactly at spin budget and burst threshold (%.1f s, limit %.0f s)",
              intr_ns / 1e6, poll_ns / 1e6, 100 * share, 100 * kIdleShare, kControllerConfigs, s,
              kIdleBudgetS)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  const std::vector<Criterion> all{
      {1, "stream fidelity", stream_fidelity},
      {2, "allocation conservation", allocator_traces},
      {3, "rule-split equivalence", netns_grid},
      {4, "port exclusivity", port_exclusivity},
      {5, "elastic memory", elastic_memory},
      {6, "latency ordering", latency_ordering},
      {7, "no lost wakeups", wakeup_races},
      {8, "idle cost and controller", idle_cost},
      {9, "reserve-size degradation", reserve_degradation},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int hard_failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, false, std::string("error: ") + e.what()};
    }
    const char* verdict = o.pass ? "PASS" : (o.host_limited ? "FAIL (host-limited)" : "FAIL");
    std::printf("criterion %d %s %s: %s\n", c.id, verdict, c.name, o.detail.c_str());
    if (!o.pass && !o.host_limited) ++hard_failures;
  }
  return hard_failures == 0 ? 0 : 1;
}

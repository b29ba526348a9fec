#include "hetnet/bench.hpp"

#include <fcntl.h>
#include <poll.h>
#include <sched.h>
#include <signal.h>
#include <sys/wait.h>
#include <time.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hetnet/broker.hpp"
#include "hetnet/runtime.hpp"
#include "hetnet/unapi.hpp"

namespace hetnet::bench {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

std::string_view to_string(Op op) { return op == Op::Latency ? "lat" : "bw"; }

std::string_view transport_label(Transport t) {
  switch (t) {
    case Transport::Socket: return "baseline";
    case Transport::Elastic: return "elastic";
    case Transport::Reserve: return "reserve";
  }
  return "?";
}

Transport transport_from_label(std::string_view s) {
  if (s == "baseline" || s == "socket") return Transport::Socket;
  if (s == "elastic") return Transport::Elastic;
  if (s == "reserve") return Transport::Reserve;
  throw Error(Errc::config, "unknown transport '" + std::string(s) + "'");
}

std::string_view to_string(NotifyChoice n) {
  switch (n) {
    case NotifyChoice::Auto: return "auto";
    case NotifyChoice::Adaptive: return "adaptive";
    case NotifyChoice::Poll: return "poll";
    case NotifyChoice::Interrupt: return "interrupt";
  }
  return "?";
}

NotifyChoice notify_from_string(std::string_view s) {
  if (s == "auto") return NotifyChoice::Auto;
  if (s == "adaptive") return NotifyChoice::Adaptive;
  if (s == "poll") return NotifyChoice::Poll;
  if (s == "interrupt") return NotifyChoice::Interrupt;
  throw Error(Errc::config, "unknown notify mode '" + std::string(s) + "'");
}

// --- scenario -------------------------------------------------------------------

void Scenario::validate() const {
  auto bad = [](const std::string& m) { throw Error(Errc::config, m); };
  if (id.find_first_of(". ,\n") != std::string::npos) bad("scenario id '" + id + "' has . , or spaces");
  if (msg_size < 1) bad("msg_size must be at least 1");
  if (conns < 1) bad("conns must be at least 1");
  if (duration.count() <= 0 && iterations == 0) bad("need a positive duration or iteration count");
  if (record_size == 0 || record_size % kPageSize != 0) bad("record_size must be a page multiple");
  if (transport == Transport::Reserve &&
      (reserve_bytes == 0 || reserve_bytes % record_size != 0)) {
    bad("reserve_bytes must be a positive multiple of record_size");
  }
  if (transport == Transport::Elastic &&
      (arena_bytes < record_size || arena_bytes % record_size != 0)) {
    bad("arena_bytes must be a positive multiple of record_size");
  }
}

std::string Scenario::to_json() const {
  json j;
  j["id"] = id;
  j["op"] = std::string(bench::to_string(op));
  j["transport"] = std::string(transport_label(transport));
  j["reserve_bytes"] = reserve_bytes;
  j["msg_size"] = msg_size;
  j["conns"] = conns;
  j["duration_ms"] = duration.count();
  j["iterations"] = iterations;
  j["warmup"] = warmup;
  j["notify"] = std::string(bench::to_string(notify));
  j["record_size"] = record_size;
  j["arena_bytes"] = arena_bytes;
  return j.dump();
}

namespace {

std::uint64_t get_u64(const json& v, const std::string& key) {
  if (!v.is_number_unsigned()) throw Error(Errc::config, "'" + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

std::string get_str(const json& v, const std::string& key) {
  if (!v.is_string()) throw Error(Errc::config, "'" + key + "' must be a string");
  return v.get<std::string>();
}

// "reserve:<bytes>" selects Reserve with that ring size.
void apply_transport(Scenario& s, const std::string& t) {
  const auto colon = t.find(':');
  s.transport = transport_from_label(t.substr(0, colon));
  if (colon != std::string::npos) {
    if (s.transport != Transport::Reserve) throw Error(Errc::config, "only reserve takes a size");
    try {
      s.reserve_bytes = std::stoull(t.substr(colon + 1));
    } catch (const std::exception&) {
      throw Error(Errc::config, "bad reserve size in '" + t + "'");
    }
  }
}

void apply_key(Scenario& s, const std::string& key, const json& v) {
  if (key == "id") {
    s.id = get_str(v, key);
  } else if (key == "op") {
    const auto op = get_str(v, key);
    if (op == "lat") {
      s.op = Op::Latency;
    } else if (op == "bw") {
      s.op = Op::Throughput;
    } else {
      throw Error(Errc::config, "op must be lat or bw");
    }
  } else if (key == "transport") {
    apply_transport(s, get_str(v, key));
  } else if (key == "reserve_bytes") {
    s.reserve_bytes = get_u64(v, key);
  } else if (key == "msg_size") {
    s.msg_size = get_u64(v, key);
  } else if (key == "conns") {
    s.conns = static_cast<std::uint32_t>(get_u64(v, key));
  } else if (key == "duration_ms") {
    s.duration = std::chrono::milliseconds(get_u64(v, key));
  } else if (key == "iterations") {
    s.iterations = get_u64(v, key);
  } else if (key == "warmup") {
    s.warmup = static_cast<std::uint32_t>(get_u64(v, key));
  } else if (key == "notify") {
    s.notify = notify_from_string(get_str(v, key));
  } else if (key == "record_size") {
    s.record_size = get_u64(v, key);
  } else if (key == "arena_bytes") {
    s.arena_bytes = get_u64(v, key);
  } else {
    throw Error(Errc::config, "unknown scenario key '" + key + "'");
  }
}

json parse_json(std::string_view text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::config, std::string(what) + ": " + e.what());
  }
}

}  // namespace

Scenario Scenario::from_json(std::string_view text) {
  const json j = parse_json(text, "scenario");
  if (!j.is_object()) throw Error(Errc::config, "scenario must be a JSON object");
  Scenario s;
  for (const auto& [k, v] : j.items()) apply_key(s, k, v);
  s.validate();
  return s;
}

std::uint64_t expected_pinned_bytes(const Scenario& s) {
  switch (s.transport) {
    case Transport::Socket: return 0;
    case Transport::Reserve: return 2 * s.reserve_bytes * s.conns;
    case Transport::Elastic: return s.conns * s.record_size * 2 + s.arena_bytes;
  }
  return 0;
}

std::uint64_t percentile(std::vector<std::uint64_t> samples, double q) {
  if (samples.empty()) return 0;
  if (q <= 0 || q > 100) throw Error(Errc::invalid_argument, "percentile out of range");
  std::sort(samples.begin(), samples.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(samples.size())));
  return samples[std::max<std::size_t>(rank, 1) - 1];
}

std::string BenchReport::csv_header() {
  return "scenario_id,transport,msg_size,conns,p50_ns,p99_ns,mean_ns,bytes_per_s,pinned_bytes,"
         "cpu_poll_ns,cpu_intr_ns";
}

std::string BenchReport::csv_row() const {
  std::ostringstream os;
  os << config.id << ',' << transport_label(config.transport);
  if (config.transport == Transport::Reserve) os << ':' << config.reserve_bytes;
  os << ',' << config.msg_size << ',' << config.conns << ',' << p50_ns << ',' << p99_ns << ','
     << mean_ns << ',' << static_cast<std::uint64_t>(std::llround(bytes_per_s)) << ','
     << pinned_bytes << ',' << cpu_poll_ns << ',' << cpu_intr_ns;
  return os.str();
}

double column_value(const BenchReport& r, std::string_view c) {
  if (c == "msg_size") return static_cast<double>(r.config.msg_size);
  if (c == "conns") return r.config.conns;
  if (c == "p50_ns" || c == "p50") return static_cast<double>(r.p50_ns);
  if (c == "p99_ns" || c == "p99") return static_cast<double>(r.p99_ns);
  if (c == "mean_ns" || c == "mean") return static_cast<double>(r.mean_ns);
  if (c == "bytes_per_s" || c == "throughput") return r.bytes_per_s;
  if (c == "pinned_bytes" || c == "pinned") return static_cast<double>(r.pinned_bytes);
  if (c == "cpu_poll_ns") return static_cast<double>(r.cpu_poll_ns);
  if (c == "cpu_intr_ns") return static_cast<double>(r.cpu_intr_ns);
  throw Error(Errc::config, "unknown report column '" + std::string(c) + "'");
}

// --- process plumbing ---------------------------------------------------------------

namespace {

void send_line(int fd, const std::string& s) {
  const std::string line = s + "\n";
  std::size_t off = 0;
  while (off < line.size()) {
    const ssize_t n = ::write(fd, line.data() + off, line.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_errno(Errc::io, "bench control pipe write");
    }
    off += static_cast<std::size_t>(n);
  }
}

std::string recv_line(int fd, Clock::time_point deadline) {
  std::string out;
  for (;;) {
    const auto left = std::chrono::ceil<std::chrono::milliseconds>(deadline - Clock::now()).count();
    if (left <= 0) throw Error(Errc::io, "bench control pipe timed out");
    pollfd p{fd, POLLIN, 0};
    const int rc = ::poll(&p, 1, static_cast<int>(std::min<long long>(left, 1000)));
    if (rc < 0 && errno == EINTR) continue;
    if (rc <= 0) continue;
    char c;
    const ssize_t n = ::read(fd, &c, 1);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw Error(Errc::io, "bench peer process exited");
    if (c == '\n') return out;
    out.push_back(c);
  }
}

struct Child {
  pid_t pid = -1;
  int to = -1;    // parent writes
  int from = -1;  // parent reads

  void kill_and_reap() {
    if (pid > 0) {
      ::kill(pid, SIGKILL);
      ::waitpid(pid, nullptr, 0);
      pid = -1;
    }
    close_fds();
  }
  void close_fds() {
    if (to >= 0) ::close(to);
    if (from >= 0) ::close(from);
    to = from = -1;
  }
};

// Forks a process running body(read_fd, write_fd); it never returns into the
// caller. A thrown exception is reported as "error <text>".
Child spawn(const std::function<void(int, int)>& body) {
  int down[2];
  int up[2];
  if (::pipe2(down, O_CLOEXEC) != 0) throw_errno(Errc::io, "pipe");
  if (::pipe2(up, O_CLOEXEC) != 0) {
    ::close(down[0]);
    ::close(down[1]);
    throw_errno(Errc::io, "pipe");
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw_errno(Errc::io, "fork");
  if (pid == 0) {
    ::close(down[1]);
    ::close(up[0]);
    int code = 0;
    try {
      body(down[0], up[1]);
    } catch (const std::exception& e) {
      try {
        std::string msg = e.what();
        std::replace(msg.begin(), msg.end(), '\n', ' ');
        send_line(up[1], "error " + msg);
      } catch (...) {
      }
      code = 1;
    }
    ::_exit(code);
  }
  ::close(down[0]);
  ::close(up[1]);
  return Child{pid, down[1], up[0]};
}

std::uint64_t thread_cpu_ns() {
  timespec ts{};
  ::clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<std::uint64_t>(ts.tv_sec) * 1000000000ULL + static_cast<std::uint64_t>(ts.tv_nsec);
}

std::uint64_t ns_since(Clock::time_point a, Clock::time_point b) {
  return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(b - a).count());
}

unapi::PollConfig poll_config(const Scenario& s) {
  unapi::PollConfig c;
  c.apply_env();
  switch (s.notify) {
    case NotifyChoice::Auto:
      if (s.transport == Transport::Socket) c.forced = unapi::PollMode::Interrupt;
      break;
    case NotifyChoice::Adaptive: break;
    case NotifyChoice::Poll: c.forced = unapi::PollMode::Polling; break;
    case NotifyChoice::Interrupt: c.forced = unapi::PollMode::Interrupt; break;
  }
  return c;
}

// Idle handling for one side's event loop, with CPU time split by mode.
class Waiter {
 public:
  explicit Waiter(const unapi::PollConfig& cfg) : pc_(cfg), last_cpu_(thread_cpu_ns()) {}

  unapi::PollMode mode() const { return pc_.mode(); }

  void progress() {
    const auto before = pc_.mode();
    pc_.step(true);
    tick(before);
  }

  void idle(std::span<Channel* const> chans, std::uint32_t mask) {
    const auto before = pc_.mode();
    if (before == unapi::PollMode::Polling) {
      pc_.step(false);
      tick(before);
      ::sched_yield();
      return;
    }
    account(before);
    auto r = unapi::wait_any(chans, mask);
    if (!r) throw Error(r.error(), "wait_any");
    account(unapi::PollMode::Interrupt);
  }

  void finish() { account(pc_.mode()); }
  std::uint64_t poll_ns() const { return poll_ns_; }
  std::uint64_t intr_ns() const { return intr_ns_; }

 private:
  void tick(unapi::PollMode before) {
    if (pc_.mode() != before || ++since_sample_ >= 256) account(before);
  }
  void account(unapi::PollMode m) {
    const std::uint64_t now = thread_cpu_ns();
    (m == unapi::PollMode::Polling ? poll_ns_ : intr_ns_) += now - last_cpu_;
    last_cpu_ = now;
    since_sample_ = 0;
  }

  unapi::PollController pc_;
  std::uint64_t last_cpu_;
  std::uint64_t poll_ns_ = 0;
  std::uint64_t intr_ns_ = 0;
  std::uint32_t since_sample_ = 0;
};

ChannelOptions channel_options(const Scenario& s) {
  ChannelOptions o;
  o.transport = s.transport;
  o.reserve_bytes = s.reserve_bytes;
  o.blocking = false;
  o.handshake_timeout = std::chrono::milliseconds(10000);
  return o;
}

AllocationPolicy bench_policy(const Scenario& s) {
  AllocationPolicy p;
  p.record_size_bytes = s.record_size;
  p.local_record_bytes = s.record_size;
  p.arena_size_bytes = s.transport == Transport::Elastic ? s.arena_bytes : s.record_size;
  p.max_records_per_channel = p.arena_records();
  p.max_records_per_process = p.arena_records();
  return p;
}

void check_transport(const Channel& ch, const Scenario& s) {
  if (ch.transport() != s.transport) {
    throw Error(Errc::protocol, "connection fell back to " + std::string(transport_label(ch.transport())));
  }
}

// Blocking-style helpers driven by the waiter; `blocking` uses the channel's
// own blocking calls instead (interrupt-only runs).
void write_full(Channel& ch, const std::byte* p, std::size_t n, Waiter& w, bool blocking) {
  Channel* one[] = {&ch};
  std::size_t off = 0;
  while (off < n) {
    auto r = blocking ? ch.write(p + off, n - off) : ch.try_write(p + off, n - off);
    if (r) {
      off += *r;
      if (!blocking) w.progress();
      continue;
    }
    if (r.error() != Errc::would_block) throw Error(r.error(), "write");
    w.idle(one, kNotifyWrite);
  }
}

void read_full(Channel& ch, std::byte* p, std::size_t n, Waiter& w, bool blocking) {
  Channel* one[] = {&ch};
  std::size_t off = 0;
  while (off < n) {
    auto r = blocking ? ch.read(p + off, n - off) : ch.try_read(p + off, n - off);
    if (r) {
      if (*r == 0) throw Error(Errc::channel_closed, "peer closed mid-message");
      off += *r;
      if (!blocking) w.progress();
      continue;
    }
    if (r.error() != Errc::would_block) throw Error(r.error(), "read");
    w.idle(one, kNotifyRead);
  }
}

struct SideResult {
  std::vector<std::uint64_t> rtt;
  std::uint64_t messages = 0;
  std::uint64_t bytes = 0;
  std::uint64_t elapsed_ns = 0;
  std::uint64_t cpu_poll_ns = 0;
  std::uint64_t cpu_intr_ns = 0;
};

std::string encode(const SideResult& r) {
  json j;
  if (!r.rtt.empty()) {
    const std::uint64_t sum = std::accumulate(r.rtt.begin(), r.rtt.end(), std::uint64_t{0});
    j["p50"] = percentile(r.rtt, 50);
    j["p99"] = percentile(r.rtt, 99);
    j["mean"] = sum / r.rtt.size();
    j["n"] = r.rtt.size();
  }
  j["messages"] = r.messages;
  j["bytes"] = r.bytes;
  j["elapsed_ns"] = r.elapsed_ns;
  j["cpu_poll_ns"] = r.cpu_poll_ns;
  j["cpu_intr_ns"] = r.cpu_intr_ns;
  return "result " + j.dump();
}

json decode(const std::string& line, const char* who) {
  if (line.rfind("error ", 0) == 0) throw Error(Errc::io, std::string(who) + ": " + line.substr(6));
  if (line.rfind("result ", 0) != 0) throw Error(Errc::protocol, std::string(who) + ": unexpected '" + line + "'");
  return json::parse(line.substr(7));
}

void expect(const std::string& line, const std::string& want, const char* who) {
  if (line.rfind("error ", 0) == 0) throw Error(Errc::io, std::string(who) + ": " + line.substr(6));
  if (line != want) throw Error(Errc::protocol, std::string(who) + ": expected '" + want + "', got '" + line + "'");
}

constexpr auto kSetupTimeout = std::chrono::seconds(60);

// --- receiver process ---------------------------------------------------------------

void receiver_main(const Scenario& s, int rd, int wr) {
  const std::string seg = recv_line(rd, Clock::now() + kSetupTimeout);
  auto rt = Runtime::attach(seg);
  WorkerOptions wo;
  wo.limits = ClaimLimits::from(bench_policy(s));
  auto worker = std::make_unique<Worker>(rt, wo);
  auto listener = Listener::listen(*worker, "127.0.0.1", 0, channel_options(s));
  send_line(wr, std::to_string(listener->port()));
  std::vector<std::unique_ptr<Channel>> chans;
  for (std::uint32_t i = 0; i < s.conns; ++i) {
    auto ch = listener->accept();
    if (!ch) throw Error(Errc::io, "accept failed");
    check_transport(*ch, s);
    chans.push_back(std::move(ch));
  }
  send_line(wr, "accepted");

  const unapi::PollConfig cfg = poll_config(s);
  Waiter w(cfg);
  SideResult res;
  std::vector<std::byte> buf(s.msg_size);
  if (s.op == Op::Latency) {
    const bool blocking = cfg.forced == unapi::PollMode::Interrupt;
    for (auto& c : chans) c->set_blocking(blocking);
    // Echo in the sender's round-robin order until it closes.
    for (std::size_t i = 0;; i = (i + 1) % chans.size()) {
      Channel& ch = *chans[i];
      auto first = blocking ? ch.read(buf.data(), buf.size()) : ch.try_read(buf.data(), buf.size());
      while (!first && first.error() == Errc::would_block) {
        Channel* one[] = {&ch};
        w.idle(one, kNotifyRead);
        first = ch.try_read(buf.data(), buf.size());
      }
      if (!first || *first == 0) break;
      w.progress();
      read_full(ch, buf.data() + *first, s.msg_size - *first, w, blocking);
      write_full(ch, buf.data(), s.msg_size, w, blocking);
      ++res.messages;
    }
  } else {
    std::vector<Channel*> open;
    for (auto& c : chans) open.push_back(c.get());
    std::optional<Clock::time_point> first;
    Clock::time_point last = Clock::now();
    while (!open.empty()) {
      bool progress = false;
      for (std::size_t i = 0; i < open.size();) {
        auto r = open[i]->try_read(buf.data(), buf.size());
        if (r && *r > 0) {
          if (!first) first = Clock::now();
          res.bytes += *r;
          progress = true;
          ++i;
        } else if (r || r.error() == Errc::channel_closed) {
          last = Clock::now();
          open.erase(open.begin() + static_cast<std::ptrdiff_t>(i));
          progress = true;
        } else if (r.error() == Errc::would_block) {
          ++i;
        } else {
          throw Error(r.error(), "stream read");
        }
      }
      if (progress) {
        w.progress();
      } else {
        w.idle(open, kNotifyRead);
      }
    }
    if (first) res.elapsed_ns = ns_since(*first, last);
  }
  w.finish();
  for (auto& c : chans) c->close();
  res.cpu_poll_ns = w.poll_ns();
  res.cpu_intr_ns = w.intr_ns() + rt->dispatcher_cpu_ns();
  send_line(wr, encode(res));
  chans.clear();
  listener.reset();
  worker.reset();
}

// --- sender process ------------------------------------------------------------------

void sender_main(const Scenario& s, int rd, int wr) {
  const std::string seg = recv_line(rd, Clock::now() + kSetupTimeout);
  const auto port = static_cast<std::uint16_t>(std::stoul(recv_line(rd, Clock::now() + kSetupTimeout)));
  auto rt = Runtime::attach(seg);
  const AllocationPolicy pol = bench_policy(s);
  WorkerOptions wo;
  wo.arena_records = s.transport == Transport::Elastic ? pol.arena_records() : 0;
  wo.limits = ClaimLimits::from(pol);
  auto worker = std::make_unique<Worker>(rt, wo);
  std::vector<std::unique_ptr<Channel>> chans;
  for (std::uint32_t i = 0; i < s.conns; ++i) {
    auto ch = connect(*worker, "127.0.0.1", port, channel_options(s));
    if (!ch) throw Error(Errc::io, "connect failed");
    check_transport(*ch, s);
    chans.push_back(std::move(ch));
  }
  send_line(wr, "established");
  expect(recv_line(rd, Clock::now() + kSetupTimeout), "go", "orchestrator");

  const unapi::PollConfig cfg = poll_config(s);
  Waiter w(cfg);
  SideResult res;
  std::vector<std::byte> buf(s.msg_size, std::byte{0x5a});
  const auto start = Clock::now();
  const auto deadline = s.duration.count() > 0 ? start + s.duration : Clock::time_point::max();
  if (s.op == Op::Latency) {
    const bool blocking = cfg.forced == unapi::PollMode::Interrupt;
    for (auto& c : chans) c->set_blocking(blocking);
    std::vector<std::byte> in(s.msg_size);
    const std::uint64_t limit = s.iterations > 0 ? s.iterations + s.warmup : UINT64_MAX;
    res.rtt.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(limit, 1u << 22)));
    for (std::uint64_t it = 0; it < limit; ++it) {
      Channel& ch = *chans[it % chans.size()];
      const auto t0 = Clock::now();
      if (it >= s.warmup && t0 >= deadline) break;
      write_full(ch, buf.data(), buf.size(), w, blocking);
      read_full(ch, in.data(), in.size(), w, blocking);
      const auto t1 = Clock::now();
      if (it >= s.warmup) res.rtt.push_back(ns_since(t0, t1));
    }
    res.messages = res.rtt.size();
    res.bytes = res.messages * s.msg_size * 2;
    res.elapsed_ns = ns_since(start, Clock::now());
  } else {
    std::vector<std::size_t> off(chans.size(), 0);
    std::vector<Channel*> all;
    for (auto& c : chans) all.push_back(c.get());
    while (Clock::now() < deadline) {
      bool progress = false;
      for (std::size_t i = 0; i < chans.size(); ++i) {
        auto r = chans[i]->try_write(buf.data() + off[i], buf.size() - off[i]);
        if (r) {
          off[i] += *r;
          if (off[i] == buf.size()) {
            off[i] = 0;
            ++res.messages;
          }
          progress = true;
        } else if (r.error() != Errc::would_block) {
          throw Error(r.error(), "stream write");
        }
      }
      if (progress) {
        w.progress();
      } else {
        w.idle(all, kNotifyWrite);
      }
    }
    res.elapsed_ns = ns_since(start, Clock::now());
  }
  w.finish();
  for (auto& c : chans) c->close();
  res.cpu_poll_ns = w.poll_ns();
  res.cpu_intr_ns = w.intr_ns() + rt->dispatcher_cpu_ns();
  // Wait for the receiver to let go before tearing the workers down.
  for (auto& c : chans) {
    while (c->accelerated() && c->unread_tx() > 0) ::sched_yield();
  }
  send_line(wr, encode(res));
  chans.clear();
  worker.reset();
}

// Pinned bytes as currently held in the segment: arenas, local records and
// rings of live channels.
std::uint64_t measure_pinned(const SharedState& st) {
  const std::uint64_t rs = st.record_size();
  std::uint64_t total = 0;
  for (std::uint32_t a = 0; a < st.max_arenas(); ++a) {
    const ArenaBlock& b = st.arena(a);
    if (b.in_use.load() != 0) total += static_cast<std::uint64_t>(b.record_count) * rs;
  }
  for (std::uint32_t c = 0; c < st.max_channels(); ++c) {
    const ChannelBlock& cb = st.channel(c);
    const auto state = static_cast<ChannelState>(cb.state.load());
    if (state == ChannelState::Unused || state == ChannelState::Closed) continue;
    for (const PipeBlock& p : cb.pipes) {
      if (p.kind == static_cast<std::uint32_t>(PipeKind::Reserve)) {
        total += static_cast<std::uint64_t>(p.ring_records) * rs;
      } else if (p.local_record != kNoRecord) {
        total += rs;
      }
    }
  }
  return total;
}

std::uint32_t segment_records(const Scenario& s) {
  constexpr std::uint32_t kSlack = 8;
  switch (s.transport) {
    case Transport::Socket: return kSlack;
    case Transport::Reserve:
      return static_cast<std::uint32_t>(2 * (s.reserve_bytes / s.record_size) * s.conns) + kSlack;
    case Transport::Elastic:
      return static_cast<std::uint32_t>(2 * s.conns + s.arena_bytes / s.record_size) + kSlack;
  }
  return kSlack;
}

BenchReport run_scenario(const Scenario& s) {
  s.validate();
  struct sigaction ign{};
  ign.sa_handler = SIG_IGN;
  struct sigaction old{};
  ::sigaction(SIGPIPE, &ign, &old);

  // Children are forked before the brokers start so that each begins
  // single-threaded.
  Child recv = spawn([&](int rd, int wr) { receiver_main(s, rd, wr); });
  Child send;
  try {
    send = spawn([&](int rd, int wr) { sender_main(s, rd, wr); });
  } catch (...) {
    recv.kill_and_reap();
    throw;
  }

  BenchReport rep;
  rep.config = s;
  if (s.transport == Transport::Reserve) rep.ring_discipline = "ring per direction";
  std::unique_ptr<Fabric> fabric;
  try {
    FabricConfig fc;
    static std::atomic<int> seq{0};
    fc.name = "bench-" + std::to_string(::getpid()) + "-" + std::to_string(seq++);
    fc.layout.record_size = s.record_size;
    fc.layout.max_arenas = 4;
    fc.layout.max_channels = s.conns + 4;
    fc.records = segment_records(s);
    fc.policy = bench_policy(s);
    fabric = Fabric::create(fc);

    const auto setup = Clock::now() + kSetupTimeout;
    send_line(recv.to, fabric->name());
    const std::string port = recv_line(recv.from, setup);
    if (port.rfind("error ", 0) == 0) throw Error(Errc::io, "receiver: " + port.substr(6));
    send_line(send.to, fabric->name());
    send_line(send.to, port);
    expect(recv_line(send.from, setup), "established", "sender");
    expect(recv_line(recv.from, setup), "accepted", "receiver");
    rep.pinned_bytes = measure_pinned(fabric->state());
    send_line(send.to, "go");

    const auto run_deadline = Clock::now() + s.duration + std::chrono::seconds(120);
    const json sr = decode(recv_line(send.from, run_deadline), "sender");
    const json rr = decode(recv_line(recv.from, run_deadline), "receiver");
    for (Child* c : {&send, &recv}) {
      int status = 0;
      ::waitpid(c->pid, &status, 0);
      c->pid = -1;
      c->close_fds();
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        throw Error(Errc::io, "bench process exited abnormally");
      }
    }
    rep.cpu_poll_ns = sr["cpu_poll_ns"].get<std::uint64_t>() + rr["cpu_poll_ns"].get<std::uint64_t>();
    rep.cpu_intr_ns = sr["cpu_intr_ns"].get<std::uint64_t>() + rr["cpu_intr_ns"].get<std::uint64_t>();
    if (s.op == Op::Latency) {
      rep.p50_ns = sr.value("p50", std::uint64_t{0});
      rep.p99_ns = sr.value("p99", std::uint64_t{0});
      rep.mean_ns = sr.value("mean", std::uint64_t{0});
      rep.iterations = sr["messages"].get<std::uint64_t>();
      rep.bytes = sr["bytes"].get<std::uint64_t>();
      rep.seconds = static_cast<double>(sr["elapsed_ns"].get<std::uint64_t>()) / 1e9;
    } else {
      rep.iterations = sr["messages"].get<std::uint64_t>();
      rep.bytes = rr["bytes"].get<std::uint64_t>();
      rep.seconds = static_cast<double>(rr["elapsed_ns"].get<std::uint64_t>()) / 1e9;
    }
    if (rep.seconds > 0) rep.bytes_per_s = static_cast<double>(rep.bytes) / rep.seconds;
  } catch (...) {
    send.kill_and_reap();
    recv.kill_and_reap();
    fabric.reset();
    ::sigaction(SIGPIPE, &old, nullptr);
    throw;
  }
  fabric.reset();
  ::sigaction(SIGPIPE, &old, nullptr);
  return rep;
}

}  // namespace

BenchReport run_latency(const Scenario& s) {
  Scenario c = s;
  c.op = Op::Latency;
  return run_scenario(c);
}

BenchReport run_throughput(const Scenario& s) {
  Scenario c = s;
  c.op = Op::Throughput;
  return run_scenario(c);
}

BenchReport run(const Scenario& s) { return run_scenario(s); }

// --- suite ----------------------------------------------------------------------------

Assertion Assertion::parse(std::string_view text) {
  static const std::regex re(
      R"(^\s*([A-Za-z0-9_\-]+)\.([a-z0-9_]+)\s*(<=|>=|<|>)\s*([A-Za-z0-9_\-]+)\.([a-z0-9_]+)\s*(?:([*/])\s*([0-9]+(?:\.[0-9]+)?(?:[eE][+\-]?[0-9]+)?))?\s*$)");
  std::cmatch m;
  const std::string t(text);
  if (!std::regex_match(t.c_str(), m, re)) throw Error(Errc::config, "bad assertion '" + t + "'");
  Assertion a;
  a.text = t;
  a.lhs_id = m[1];
  a.lhs_col = m[2];
  a.op = m[3];
  a.rhs_id = m[4];
  a.rhs_col = m[5];
  if (m[6].matched) {
    const double k = std::stod(m[7]);
    if (k == 0) throw Error(Errc::config, "zero scale in '" + t + "'");
    a.scale = m[6] == "*" ? k : 1.0 / k;
  }
  BenchReport probe;
  (void)column_value(probe, a.lhs_col);
  (void)column_value(probe, a.rhs_col);
  return a;
}

SuiteConfig SuiteConfig::parse(std::string_view text) {
  const json j = parse_json(text, "suite config");
  if (!j.is_object()) throw Error(Errc::config, "suite config must be a JSON object");
  SuiteConfig cfg;
  json defaults = json::object();
  for (const auto& [k, v] : j.items()) {
    if (k != "defaults" && k != "scenarios" && k != "matrix" && k != "assertions") {
      throw Error(Errc::config, "unknown suite key '" + k + "'");
    }
  }
  if (j.contains("defaults")) {
    defaults = j["defaults"];
    if (!defaults.is_object()) throw Error(Errc::config, "defaults must be an object");
  }
  auto base = [&]() {
    Scenario s;
    for (const auto& [k, v] : defaults.items()) apply_key(s, k, v);
    return s;
  };
  if (j.contains("scenarios")) {
    for (const auto& e : j["scenarios"]) {
      if (!e.is_object()) throw Error(Errc::config, "scenario entries must be objects");
      Scenario s = base();
      for (const auto& [k, v] : e.items()) apply_key(s, k, v);
      if (s.id.empty()) throw Error(Errc::config, "scenario without id");
      cfg.scenarios.push_back(s);
    }
  }
  if (j.contains("matrix")) {
    for (const auto& e : j["matrix"]) {
      if (!e.is_object()) throw Error(Errc::config, "matrix entries must be objects");
      Scenario proto = base();
      std::string prefix;
      std::vector<std::string> transports;
      std::vector<std::uint64_t> sizes{proto.msg_size};
      std::vector<std::uint64_t> conns{proto.conns};
      for (const auto& [k, v] : e.items()) {
        if (k == "id_prefix") {
          prefix = get_str(v, k);
        } else if (k == "transports") {
          for (const auto& t : v) transports.push_back(get_str(t, k));
        } else if (k == "msg_sizes") {
          sizes.clear();
          for (const auto& x : v) sizes.push_back(get_u64(x, k));
        } else if (k == "conns") {
          conns.clear();
          for (const auto& x : v) conns.push_back(get_u64(x, k));
        } else {
          apply_key(proto, k, v);
        }
      }
      if (transports.empty()) transports.push_back(std::string(transport_label(proto.transport)));
      for (const auto& t : transports) {
        for (auto size : sizes) {
          for (auto c : conns) {
            Scenario s = proto;
            apply_transport(s, t);
            s.msg_size = size;
            s.conns = static_cast<std::uint32_t>(c);
            std::string label(transport_label(s.transport));
            if (t.find(':') != std::string::npos) label += std::to_string(s.reserve_bytes);
            s.id = prefix + label + "-" + std::to_string(size) + "-" + std::to_string(c);
            cfg.scenarios.push_back(s);
          }
        }
      }
    }
  }
  std::set<std::string> ids;
  for (const auto& s : cfg.scenarios) {
    s.validate();
    if (!ids.insert(s.id).second) throw Error(Errc::config, "duplicate scenario id '" + s.id + "'");
  }
  if (j.contains("assertions")) {
    for (const auto& a : j["assertions"]) cfg.assertions.push_back(Assertion::parse(get_str(a, "assertions")));
  }
  return cfg;
}

SuiteConfig SuiteConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::config, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

int SuiteResult::exit_code() const {
  for (const auto& a : assertions) {
    if (!a.pass) return 1;
  }
  return 0;
}

namespace {

void write_file(const std::filesystem::path& p, const std::string& body) {
  std::ofstream out(p);
  if (!out) throw Error(Errc::io, "cannot write " + p.string());
  out << body;
}

bool compare(double l, const std::string& op, double r) {
  if (op == "<=") return l <= r;
  if (op == "<") return l < r;
  if (op == ">=") return l >= r;
  return l > r;
}

}  // namespace

SuiteResult run_suite(const SuiteConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  SuiteResult res;
  std::map<std::string, const BenchReport*> by_id;
  for (const auto& s : cfg.scenarios) {
    try {
      res.reports.push_back(run(s));
    } catch (const std::exception& e) {
      res.failures.emplace_back(s.id, e.what());
    }
  }
  std::string summary = BenchReport::csv_header() + "\n";
  for (const auto& r : res.reports) {
    by_id[r.config.id] = &r;
    write_file(out_dir / (r.config.id + ".csv"), BenchReport::csv_header() + "\n" + r.csv_row() + "\n");
    write_file(out_dir / (r.config.id + ".json"), r.config.to_json() + "\n");
    summary += r.csv_row() + "\n";
  }
  write_file(out_dir / "summary.csv", summary);
  if (!res.failures.empty()) {
    std::string body = "scenario_id,error\n";
    for (const auto& [id, err] : res.failures) body += id + "," + err + "\n";
    write_file(out_dir / "failures.csv", body);
  }
  for (const auto& a : cfg.assertions) {
    AssertionResult ar;
    ar.assertion = a;
    const auto l = by_id.find(a.lhs_id);
    const auto r = by_id.find(a.rhs_id);
    if (l == by_id.end() || r == by_id.end()) {
      ar.error = "no report for " + (l == by_id.end() ? a.lhs_id : a.rhs_id);
    } else {
      ar.lhs = column_value(*l->second, a.lhs_col);
      ar.rhs = column_value(*r->second, a.rhs_col) * a.scale;
      ar.pass = compare(ar.lhs, a.op, ar.rhs);
    }
    res.assertions.push_back(ar);
  }
  return res;
}

}  // namespace hetnet::bench

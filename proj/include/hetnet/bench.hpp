#pragma once

// Socket-style microbenchmarks: ping-pong latency and streaming throughput
// over Baseline (plain loopback TCP), Reserve (fixed rings) and Elastic
// (local records plus a shared arena), with pinned-memory accounting.
//
// Every scenario runs in two fresh processes (receiver and sender) forked by
// the calling process, which hosts the segment and brokers and aggregates.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hetnet/channel.hpp"
#include "hetnet/error.hpp"

namespace hetnet::bench {

enum class Op : std::uint8_t { Latency, Throughput };
std::string_view to_string(Op op);

// "baseline" is the socket transport.
std::string_view transport_label(Transport t);
Transport transport_from_label(std::string_view s);  // throws Error(config)

// auto: blocking waits for Baseline, the adaptive controller otherwise.
enum class NotifyChoice : std::uint8_t { Auto, Adaptive, Poll, Interrupt };
std::string_view to_string(NotifyChoice n);
NotifyChoice notify_from_string(std::string_view s);  // throws Error(config)

struct Scenario {
  std::string id;
  Op op = Op::Latency;
  Transport transport = Transport::Elastic;
  std::uint64_t reserve_bytes = 16ULL << 20;  // per direction
  std::uint64_t msg_size = 16;
  std::uint32_t conns = 1;
  std::chrono::milliseconds duration{1000};
  std::uint64_t iterations = 0;  // latency: measured round trips; 0 means duration-bound
  std::uint32_t warmup = 1000;   // latency: discarded round trips
  NotifyChoice notify = NotifyChoice::Auto;
  std::uint64_t record_size = 64 * 1024;  // also the local record size, per direction
  std::uint64_t arena_bytes = 128ULL << 20;

  // Throws Error(config).
  void validate() const;
  // Round-trips through from_json unchanged.
  std::string to_json() const;
  static Scenario from_json(std::string_view text);

  bool operator==(const Scenario&) const = default;
};

// Closed-form pinned bytes: Reserve 2*N*C, Elastic C*local*2 + arena,
// Baseline 0.
std::uint64_t expected_pinned_bytes(const Scenario& s);

struct BenchReport {
  Scenario config;
  // Application-level round trip, nanoseconds. Zero for throughput runs.
  std::uint64_t p50_ns = 0;
  std::uint64_t p99_ns = 0;
  std::uint64_t mean_ns = 0;
  std::uint64_t iterations = 0;  // measured round trips or messages written
  std::uint64_t bytes = 0;       // payload bytes received
  double seconds = 0;            // measured interval
  double bytes_per_s = 0;
  std::uint64_t pinned_bytes = 0;  // read from the live segment
  std::uint64_t cpu_poll_ns = 0;   // worker CPU while polling
  std::uint64_t cpu_intr_ns = 0;   // worker CPU while interrupt-driven
  std::string ring_discipline;     // Reserve: "ring per direction"

  static std::string csv_header();
  std::string csv_row() const;
};

// Nearest-rank percentile of unsorted samples; q in (0, 100].
std::uint64_t percentile(std::vector<std::uint64_t> samples, double q);

// Throw Error on setup failures (segment, ports, handshake fell back).
BenchReport run_latency(const Scenario& s);
BenchReport run_throughput(const Scenario& s);
BenchReport run(const Scenario& s);

// --- suite ----------------------------------------------------------------------

// `<id>.<column> <op> <id>.<column> [* | / <number>]`, op one of <= < >= >.
struct Assertion {
  std::string text;
  std::string lhs_id;
  std::string lhs_col;
  std::string op;
  std::string rhs_id;
  std::string rhs_col;
  double scale = 1.0;

  static Assertion parse(std::string_view text);  // throws Error(config)
};

// JSON: {"defaults": {...}, "scenarios": [...], "matrix": [...],
// "assertions": [...]}. Matrix entries expand the product of "transports",
// "msg_sizes" and "conns" with ids "<prefix><transport>-<size>-<conns>".
struct SuiteConfig {
  std::vector<Scenario> scenarios;
  std::vector<Assertion> assertions;

  static SuiteConfig parse(std::string_view text);
  static SuiteConfig load(const std::filesystem::path& path);
};

struct AssertionResult {
  Assertion assertion;
  bool pass = false;
  double lhs = 0;
  double rhs = 0;
  std::string error;
};

struct SuiteResult {
  std::vector<BenchReport> reports;
  std::vector<std::pair<std::string, std::string>> failures;  // id, error
  std::vector<AssertionResult> assertions;
  int exit_code() const;
};

// Runs every scenario (a failing one is recorded and the rest continue),
// writes <id>.csv and <id>.json per scenario plus summary.csv, then checks
// the assertions.
SuiteResult run_suite(const SuiteConfig& cfg, const std::filesystem::path& out_dir);

// Value of a CSV column of a report; throws Error(config) for unknown names.
double column_value(const BenchReport& r, std::string_view column);

}  // namespace hetnet::bench

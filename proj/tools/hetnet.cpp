// hetnet: benchmark runner and namespace rule checker.
//
//   hetnet bench lat|bw --transport elastic --msg-size 16 ...
//   hetnet bench suite configs/bench/suite.json --out results/
//   hetnet netns verify configs/netns/sidecar.json

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "hetnet/bench.hpp"
#include "hetnet/netns.hpp"

namespace {

using namespace hetnet;

void print_report(const bench::BenchReport& r) {
  std::cout << bench::BenchReport::csv_header() << "\n" << r.csv_row() << "\n";
  if (r.config.op == bench::Op::Latency) {
    std::printf("# round trip p50 %.3f us, p99 %.3f us, mean %.3f us; one way p50 %.3f us (%llu samples)\n",
                r.p50_ns / 1e3, r.p99_ns / 1e3, r.mean_ns / 1e3, r.p50_ns / 2e3,
                static_cast<unsigned long long>(r.iterations));
  } else {
    std::printf("# %.1f MiB/s over %.2f s, %llu messages\n", r.bytes_per_s / (1 << 20), r.seconds,
                static_cast<unsigned long long>(r.iterations));
  }
  std::printf("# pinned %llu bytes (closed form %llu)%s%s\n",
              static_cast<unsigned long long>(r.pinned_bytes),
              static_cast<unsigned long long>(bench::expected_pinned_bytes(r.config)),
              r.ring_discipline.empty() ? "" : ", reserve buffers: ", r.ring_discipline.c_str());
  std::printf("# config %s\n", r.config.to_json().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hetnet benchmarks and namespace tools"};
  app.require_subcommand(1);

  auto* bench_cmd = app.add_subcommand("bench", "socket microbenchmarks");
  bench_cmd->require_subcommand(1);
  std::string transport = "elastic";
  std::uint64_t msg_size = 16;
  std::uint32_t conns = 1;
  std::uint64_t reserve_bytes = 16ULL << 20;
  double duration_s = 2.0;
  std::uint64_t iterations = 0;
  std::string notify = "auto";
  std::uint64_t record_size = 64 * 1024;
  std::uint64_t arena_bytes = 128ULL << 20;
  std::string out;
  std::string suite_file;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--transport", transport, "baseline, reserve or elastic")->capture_default_str();
    c->add_option("--msg-size", msg_size, "bytes per message")->capture_default_str();
    c->add_option("--conns", conns, "connections")->capture_default_str();
    c->add_option("--reserve-bytes", reserve_bytes, "Reserve ring per direction")->capture_default_str();
    c->add_option("--duration", duration_s, "seconds")->capture_default_str();
    c->add_option("--iters", iterations, "latency: measured round trips (0: duration-bound)");
    c->add_option("--notify", notify, "auto, adaptive, poll or interrupt")->capture_default_str();
    c->add_option("--record-size", record_size, "record and local record bytes")->capture_default_str();
    c->add_option("--arena-bytes", arena_bytes, "Elastic arena bytes")->capture_default_str();
    c->add_option("--out", out, "CSV output file");
  };
  auto* lat = bench_cmd->add_subcommand("lat", "ping-pong round-trip latency");
  auto* bw = bench_cmd->add_subcommand("bw", "streaming throughput");
  add_common(lat);
  add_common(bw);
  auto* suite = bench_cmd->add_subcommand("suite", "run a scenario matrix");
  suite->add_option("config", suite_file, "suite JSON")->required()->check(CLI::ExistingFile);
  suite->add_option("--out", out, "output directory")->required();

  auto* netns_cmd = app.add_subcommand("netns", "split namespace tools");
  netns_cmd->require_subcommand(1);
  auto* verify = netns_cmd->add_subcommand("verify", "check a split rule against the single-PU reference");
  std::string scenario_file;
  verify->add_option("scenario", scenario_file, "scenario JSON")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (verify->parsed()) {
      const auto s = netns::Scenario::load(scenario_file);
      const auto v = netns::equivalence_check(s);
      std::cout << netns::format_verdict(s, v);
      return v.pass ? 0 : 1;
    }
    if (suite->parsed()) {
      const auto cfg = bench::SuiteConfig::load(suite_file);
      const auto res = bench::run_suite(cfg, out);
      std::cout << bench::BenchReport::csv_header() << "\n";
      for (const auto& r : res.reports) std::cout << r.csv_row() << "\n";
      for (const auto& [id, err] : res.failures) std::cerr << "scenario " << id << " failed: " << err << "\n";
      for (const auto& a : res.assertions) {
        std::cout << (a.pass ? "PASS " : "FAIL ") << a.assertion.text;
        if (a.error.empty()) {
          std::cout << "  (" << a.lhs << " vs " << a.rhs << ")";
        } else {
          std::cout << "  (" << a.error << ")";
        }
        std::cout << "\n";
      }
      return res.exit_code();
    }
    bench::Scenario s;
    s.id = std::string(lat->parsed() ? "lat" : "bw") + "-" + transport;
    for (char& c : s.id) {
      if (c == ':') c = '-';
    }
    s.op = lat->parsed() ? bench::Op::Latency : bench::Op::Throughput;
    s.transport = bench::transport_from_label(transport);
    s.msg_size = msg_size;
    s.conns = conns;
    s.reserve_bytes = reserve_bytes;
    s.duration = std::chrono::milliseconds(static_cast<std::int64_t>(duration_s * 1000));
    s.iterations = iterations;
    s.notify = bench::notify_from_string(notify);
    s.record_size = record_size;
    s.arena_bytes = arena_bytes;
    const auto r = bench::run(s);
    print_report(r);
    if (!out.empty()) {
      std::FILE* f = std::fopen(out.c_str(), "w");
      if (f == nullptr) throw Error(Errc::io, "cannot write " + out);
      std::fprintf(f, "%s\n%s\n", bench::BenchReport::csv_header().c_str(), r.csv_row().c_str());
      std::fclose(f);
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

#pragma once

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <memory>
#include <string>
#include <thread>

#include "hetnet/broker.hpp"
#include "hetnet/channel.hpp"
#include "hetnet/gshm.hpp"
#include "hetnet/layout.hpp"
#include "hetnet/runtime.hpp"

namespace hetnet::testing {

inline std::string unique_name(const std::string& tag) {
  static std::atomic<int> n{0};
  return "t" + std::to_string(::getpid()) + "-" + std::to_string(n++) + "-" + tag;
}

// A formatted segment that removes itself on destruction.
struct TestSegment {
  Segment seg;
  SharedState state;

  TestSegment(const std::string& tag, const LayoutParams& params, std::uint32_t records)
      : seg(Segment::create(unique_name(tag), SegmentLayout::required_bytes(params, records))) {
    seg.set_unlink_on_close(true);
    state = SharedState::format(seg.data(), seg.size(), params);
  }
};

struct PairOptions {
  std::uint64_t record_size = 4096;
  std::uint32_t arena_records = 32;     // per worker
  std::uint32_t records = 1024;         // segment data records
  std::uint32_t brokers = 1;
  std::uint32_t max_records_per_channel = 1u << 20;
  std::uint32_t max_records_per_process = 1u << 20;
  ChannelOptions channel;
  ChannelOptions connector;  // used when connector_differs
  bool connector_differs = false;
  bool threaded = true;  // false: brokers only run while a BrokerStepper is alive
  std::uint32_t max_arenas = 16;
};

inline AllocationPolicy test_policy(const PairOptions& o) {
  AllocationPolicy p;
  p.record_size_bytes = o.record_size;
  p.local_record_bytes = o.record_size;
  p.arena_size_bytes = o.record_size * std::max<std::uint32_t>(1, o.arena_records);
  p.max_records_per_channel = o.max_records_per_channel;
  p.max_records_per_process = o.max_records_per_process;
  return p;
}

inline std::unique_ptr<Fabric> make_fabric(const PairOptions& o, const std::string& tag) {
  FabricConfig fc;
  fc.name = unique_name(tag);
  fc.layout.record_size = o.record_size;
  fc.layout.max_arenas = o.max_arenas;
  fc.layout.max_channels = 64;
  fc.records = o.records;
  fc.policy = test_policy(o);
  fc.brokers = o.brokers;
  fc.threaded = o.threaded;
  return Fabric::create(fc);
}

// Drives the brokers of a non-threaded fabric from a background thread.
class BrokerStepper {
 public:
  explicit BrokerStepper(Fabric& f) : f_(f) {
    if (f_.config().threaded) return;
    t_ = std::thread([this] {
      while (!stop_.load()) {
        for (std::uint32_t i = 0; i < f_.broker_count(); ++i) {
          f_.broker(i).step(std::chrono::milliseconds(1));
        }
      }
    });
  }
  ~BrokerStepper() {
    stop_.store(true);
    if (t_.joinable()) t_.join();
  }

 private:
  Fabric& f_;
  std::atomic<bool> stop_{false};
  std::thread t_;
};

// Two workers (acceptor side `a`, connector side `b`) on separate runtimes,
// joined by one channel.
struct ChannelPair {
  std::unique_ptr<Fabric> fabric;
  std::shared_ptr<Runtime> rt_a;
  std::shared_ptr<Runtime> rt_b;
  std::unique_ptr<Worker> wa;
  std::unique_ptr<Worker> wb;
  std::unique_ptr<Listener> listener;
  std::unique_ptr<Channel> a;
  std::unique_ptr<Channel> b;

  explicit ChannelPair(const PairOptions& o, const std::string& tag = "pair") {
    fabric = make_fabric(o, tag);
    BrokerStepper stepper(*fabric);
    RuntimeOptions ra;
    RuntimeOptions rb;
    rb.broker = o.brokers > 1 ? 1 : 0;
    rt_a = Runtime::attach(fabric->name(), ra);
    rt_b = Runtime::attach(fabric->name(), rb);
    WorkerOptions wo;
    wo.arena_records = o.arena_records;
    wo.limits = ClaimLimits::from(test_policy(o));
    wa = std::make_unique<Worker>(rt_a, wo);
    wb = std::make_unique<Worker>(rt_b, wo);
    listener = Listener::listen(*wa, "127.0.0.1", 0, o.channel);
    const ChannelOptions copts = o.connector_differs ? o.connector : o.channel;
    std::thread t([&] { b = connect(*wb, "127.0.0.1", listener->port(), copts); });
    a = listener->accept();
    t.join();
  }

  ~ChannelPair() { reset_all(); }

  // Closes both ends and unregisters both workers. Non-threaded fabrics need
  // a BrokerStepper alive around this.
  void reset_all() {
    a.reset();
    b.reset();
    wa.reset();
    wb.reset();
  }
};

}  // namespace hetnet::testing

#pragma once

// The broker: single authority over permissions and record state. It commits
// speculative claims, answers faults, enforces the allocation policy, routes
// notifications and tears channels down. One broker per simulated PU; with
// more than one, records, arena slots and channel slots are partitioned by
// broker index and requests are forwarded to the owning broker.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hetnet/gshm.hpp"
#include "hetnet/layout.hpp"
#include "hetnet/record_arena.hpp"

namespace hetnet {

struct BrokerConfig {
  std::string segment;  // name of an existing, formatted segment
  std::uint32_t index = 0;
  AllocationPolicy policy;
  std::chrono::microseconds tick{1000};
  std::chrono::milliseconds liveness_period{50};
  // When false no thread is started; the owner drives step() by hand.
  bool threaded = true;
};

struct BrokerStats {
  std::uint64_t commits = 0;  // broker_commit passes that processed entries
  std::uint64_t records_committed = 0;
  std::uint64_t records_rolled_back = 0;
  std::uint64_t faults = 0;
  std::uint64_t statuses = 0;
  std::uint64_t completions = 0;
  std::uint64_t ticks = 0;
  std::uint64_t teardowns = 0;
};

class Broker {
 public:
  explicit Broker(BrokerConfig cfg);
  ~Broker();
  Broker(const Broker&) = delete;
  Broker& operator=(const Broker&) = delete;

  void stop();

  const std::string& address() const;
  std::uint32_t index() const;

  // One loop iteration: waits up to `wait` for input, handles every queued
  // message and runs the periodic tick when due. Only for threaded = false.
  void step(std::chrono::milliseconds wait);

  // The following run on the broker thread (inline when not threaded).
  std::string dump();
  AuditReport audit();
  void declare_dead(Principal p);
  CommitReport commit_now(std::uint32_t arena_slot);
  std::size_t armed_tokens();
  std::size_t zombie_channels();

  BrokerStats stats() const;
  // CPU time consumed by the broker thread.
  std::uint64_t cpu_ns() const;

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

struct FabricConfig {
  std::string name;
  LayoutParams layout;
  std::uint32_t records = 0;  // data records in the segment
  AllocationPolicy policy;
  std::uint32_t brokers = 1;
  std::chrono::microseconds tick{1000};
  bool threaded = true;
};

// A formatted segment plus its brokers: the host-side setup every test and
// benchmark scenario starts from. Unlinks the segment on destruction.
class Fabric {
 public:
  static std::unique_ptr<Fabric> create(const FabricConfig& cfg);
  ~Fabric();

  const std::string& name() const { return cfg_.name; }
  const SharedState& state() const { return state_; }
  Broker& broker(std::uint32_t i = 0) { return *brokers_.at(i); }
  std::uint32_t broker_count() const { return static_cast<std::uint32_t>(brokers_.size()); }
  const FabricConfig& config() const { return cfg_; }
  std::uint64_t segment_bytes() const { return segment_.size(); }

 private:
  Fabric() = default;
  FabricConfig cfg_;
  Segment segment_;
  SharedState state_;
  std::vector<std::unique_ptr<Broker>> brokers_;
};

}  // namespace hetnet

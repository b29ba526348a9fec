#pragma once

// Split network namespace control plane: a global port table, per-PU
// forwarding programs, the interception-rule split and a deterministic
// packet simulator used to check multi-PU placements against a single-PU
// reference.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "hetnet/error.hpp"

namespace hetnet::netns {

using PuId = std::uint32_t;

enum class Protocol : std::uint8_t { Tcp, Udp };
std::string_view to_string(Protocol p);
Protocol protocol_from_string(std::string_view s);  // throws Error(config)

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  // "host:port"; "localhost" becomes 127.0.0.1. Throws Error(config).
  static Endpoint parse(std::string_view s);
  std::string str() const;
  auto operator<=>(const Endpoint&) const = default;
};

// Synthetic inter-PU address of PU k: "pu<k>.internal".
std::string pu_address(PuId pu);
inline constexpr std::string_view kLoopback = "127.0.0.1";

// ---------------------------------------------------------------------------
// Port table

struct PortKey {
  std::string ns;
  Protocol proto = Protocol::Tcp;
  std::uint16_t port = 0;
  auto operator<=>(const PortKey&) const = default;
};

class PortTable {
 public:
  // Fails with conflict when the key is already bound (on any PU).
  Errc register_port(const PortKey& key, PuId pu);
  // False when the key was not bound.
  bool unregister_port(const PortKey& key);
  std::optional<PuId> lookup(const PortKey& key) const;
  const std::map<PortKey, PuId>& bindings() const { return bindings_; }
  std::uint64_t version() const { return version_; }

 private:
  std::map<PortKey, PuId> bindings_;
  std::uint64_t version_ = 0;
};

// ---------------------------------------------------------------------------
// Rules

enum class Phase : std::uint8_t { Output, Prerouting, Forward, Input };
std::string_view to_string(Phase p);

enum class ActionKind : std::uint8_t { Dnat, Snat, Redirect, SaveOrigDst, ForwardToPu, Accept };
std::string_view to_string(ActionKind a);

struct Action {
  ActionKind kind = ActionKind::Accept;
  Endpoint to;            // Dnat: new destination, Snat: new source
  std::uint16_t port = 0;  // Redirect: local port
  bool save_orig_dst = false;  // Redirect: record the pre-rewrite destination
  PuId pu = 0;             // ForwardToPu

  static Action dnat(Endpoint to) { return {ActionKind::Dnat, std::move(to), 0, false, 0}; }
  static Action snat(Endpoint to) { return {ActionKind::Snat, std::move(to), 0, false, 0}; }
  static Action redirect(std::uint16_t port, bool save) {
    return {ActionKind::Redirect, {}, port, save, 0};
  }
  static Action save_orig() { return {ActionKind::SaveOrigDst, {}, 0, false, 0}; }
  static Action forward(PuId pu) { return {ActionKind::ForwardToPu, {}, 0, false, pu}; }
  static Action accept() { return {}; }
  bool operator==(const Action&) const = default;
};

// Every set field must match; unset fields match anything.
struct Match {
  std::optional<std::string> ns;
  std::optional<Protocol> proto;
  std::optional<std::string> src_host;
  std::optional<std::uint16_t> src_port;
  std::optional<std::string> dst_host;
  std::optional<std::uint16_t> dst_port;
  std::vector<std::string> dst_host_except;
  std::vector<std::uint16_t> dst_port_except;
  bool operator==(const Match&) const = default;
};

struct FilterRule {
  Phase phase = Phase::Output;
  Match match;
  Action action;
  bool operator==(const FilterRule&) const = default;
};

// Rules of one PU. Within a phase every matching rule applies in order;
// Accept, and ForwardToPu to another PU, end the phase.
struct RuleProgram {
  PuId pu = 0;
  std::uint64_t version = 0;
  std::vector<FilterRule> rules;
};

using Programs = std::map<PuId, RuleProgram>;

// Forwarding rules for `pu`: each binding owned by another PU gets Output
// rules that rewrite localhost:port to the owner's inter-PU address, rewrite
// the source for the reply path and route to the owner. Local bindings get
// nothing.
RuleProgram generate_forwarding_rules(const PortTable& table, PuId pu);

// All PUs' programs at the table's current version.
Programs plan(const PortTable& table, const std::vector<PuId>& pus);

struct SplitRules {
  std::vector<FilterRule> sender;
  std::vector<FilterRule> receiver;
};

// Splits an interception rule (Redirect, usually with save_orig_dst) into a
// sender-side route to `receiver`, a receiver-side route to the local
// container, and a receiver-side rewrite that records the original
// destination there. Accept and ForwardToPu pass through on the sender side.
// Other actions fail with unsupported_rule_kind.
Result<SplitRules> split_rule(const FilterRule& rule, PuId sender, PuId receiver);

// Deliberately wrong split that records the original destination on the
// sender. Used as a mutation check.
SplitRules split_rule_save_on_sender(const FilterRule& rule, PuId sender, PuId receiver);

// ---------------------------------------------------------------------------
// Simulation

struct PacketState {
  Endpoint src;
  Endpoint dst;
  Protocol proto = Protocol::Tcp;
  std::string ns;
  PuId location = 0;
  std::optional<Endpoint> orig_dst;
  std::optional<PuId> orig_dst_pu;  // PU whose connection tracking holds orig_dst
  std::optional<std::pair<PuId, std::uint16_t>> delivered_to;
};

struct DeliveryObservation {
  bool external = false;  // left the node without reaching a local receiver
  PuId receiver_pu = 0;
  std::uint16_t receiver_port = 0;
  Endpoint final_dst;  // local destinations are reported as 127.0.0.1:port
  std::optional<Endpoint> observable_orig_dst;  // what the receiver can query
  std::uint32_t rule_hits = 0;
  std::uint32_t hops = 0;
  std::vector<PuId> path;
  bool operator==(const DeliveryObservation&) const = default;
};

inline constexpr std::uint32_t kMaxHops = 8;

// Fails with routing_loop past kMaxHops and no_receiver when the packet
// reaches a local destination nobody on that PU is bound to.
Result<DeliveryObservation> simulate_delivery(const Programs& programs, const PortTable& table,
                                              PacketState packet);

// ---------------------------------------------------------------------------
// Equivalence

struct Placement {
  PuId sender = 0;
  PuId receiver = 0;
};

enum class SplitVariant : std::uint8_t { Correct, SaveOnSender };

struct PlacementVerdict {
  Placement placement;
  bool pass = true;
  std::uint32_t packets = 0;
  std::uint32_t mismatches = 0;
  std::string detail;  // first mismatch
};

struct Verdict {
  bool pass = true;
  std::vector<PlacementVerdict> placements;
};

// A sidecar-style interception setup: `rule` sits on the sender's PU in the
// single-PU reference; `receiver_binding` belongs to the intercepting
// process, `sender_bindings` to the intercepted one, `fixed` to processes
// whose PU does not change.
struct Scenario {
  std::string name;
  std::vector<std::string> pu_names;
  FilterRule rule;
  PortKey receiver_binding;
  std::vector<PortKey> sender_bindings;
  std::vector<std::pair<PortKey, PuId>> fixed;
  std::vector<PacketState> packets;  // location ignored
  std::vector<Placement> placements;
  SplitVariant variant = SplitVariant::Correct;

  // JSON scenario file. Throws Error(config).
  static Scenario parse(std::string_view json);
  static Scenario load(const std::filesystem::path& path);
};

// Compares every packet of every placement against the single-PU reference:
// receiver identity, final destination and observable original destination
// must all match.
Verdict equivalence_check(const Scenario& s);

// Fixed-width table, one row per placement.
std::string format_verdict(const Scenario& s, const Verdict& v);

}  // namespace hetnet::netns

#include "hetnet/netns.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

namespace hetnet::netns {

using nlohmann::json;

std::string_view to_string(Protocol p) { return p == Protocol::Udp ? "udp" : "tcp"; }

Protocol protocol_from_string(std::string_view s) {
  if (s == "tcp") return Protocol::Tcp;
  if (s == "udp") return Protocol::Udp;
  throw Error(Errc::config, "unknown protocol '" + std::string(s) + "'");
}

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::Output: return "output";
    case Phase::Prerouting: return "prerouting";
    case Phase::Forward: return "forward";
    case Phase::Input: return "input";
  }
  return "?";
}

std::string_view to_string(ActionKind a) {
  switch (a) {
    case ActionKind::Dnat: return "dnat";
    case ActionKind::Snat: return "snat";
    case ActionKind::Redirect: return "redirect";
    case ActionKind::SaveOrigDst: return "save_orig_dst";
    case ActionKind::ForwardToPu: return "forward_to_pu";
    case ActionKind::Accept: return "accept";
  }
  return "?";
}

Endpoint Endpoint::parse(std::string_view s) {
  const auto colon = s.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw Error(Errc::config, "expected host:port, got '" + std::string(s) + "'");
  }
  Endpoint e;
  e.host = std::string(s.substr(0, colon));
  if (e.host == "localhost") e.host = std::string(kLoopback);
  const auto ps = s.substr(colon + 1);
  unsigned v = 0;
  auto [ptr, ec] = std::from_chars(ps.data(), ps.data() + ps.size(), v);
  if (ec != std::errc() || ptr != ps.data() + ps.size() || v > 65535) {
    throw Error(Errc::config, "bad port in '" + std::string(s) + "'");
  }
  e.port = static_cast<std::uint16_t>(v);
  return e;
}

std::string Endpoint::str() const { return host + ":" + std::to_string(port); }

std::string pu_address(PuId pu) { return "pu" + std::to_string(pu) + ".internal"; }

namespace {

std::optional<PuId> pu_of(const std::string& host) {
  constexpr std::string_view prefix = "pu";
  constexpr std::string_view suffix = ".internal";
  if (host.size() <= prefix.size() + suffix.size() || host.rfind(prefix, 0) != 0 ||
      host.compare(host.size() - suffix.size(), suffix.size(), suffix) != 0) {
    return std::nullopt;
  }
  const char* b = host.data() + prefix.size();
  const char* e = host.data() + host.size() - suffix.size();
  PuId v = 0;
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) return std::nullopt;
  return v;
}

bool is_local(const std::string& host, PuId pu) {
  return host == kLoopback || host == pu_address(pu);
}

}  // namespace

// ---------------------------------------------------------------------------

Errc PortTable::register_port(const PortKey& key, PuId pu) {
  if (bindings_.count(key) != 0) return Errc::conflict;
  bindings_.emplace(key, pu);
  ++version_;
  return Errc::ok;
}

bool PortTable::unregister_port(const PortKey& key) {
  if (bindings_.erase(key) == 0) return false;
  ++version_;
  return true;
}

std::optional<PuId> PortTable::lookup(const PortKey& key) const {
  auto it = bindings_.find(key);
  if (it == bindings_.end()) return std::nullopt;
  return it->second;
}

RuleProgram generate_forwarding_rules(const PortTable& table, PuId pu) {
  RuleProgram prog;
  prog.pu = pu;
  prog.version = table.version();
  for (const auto& [key, owner] : table.bindings()) {
    if (owner == pu) continue;
    Match m;
    m.ns = key.ns;
    m.proto = key.proto;
    m.dst_host = std::string(kLoopback);
    m.dst_port = key.port;
    prog.rules.push_back({Phase::Output, m, Action::dnat({pu_address(owner), key.port})});
    // The destination now names the owner, so the remaining rules match on it.
    Match routed = m;
    routed.dst_host = pu_address(owner);
    prog.rules.push_back({Phase::Output, routed, Action::snat({pu_address(pu), 0})});
    prog.rules.push_back({Phase::Output, routed, Action::forward(owner)});
  }
  return prog;
}

Programs plan(const PortTable& table, const std::vector<PuId>& pus) {
  Programs out;
  for (PuId pu : pus) out[pu] = generate_forwarding_rules(table, pu);
  return out;
}

namespace {

Match receiver_match(Match m, PuId receiver) {
  m.dst_host_except.push_back(pu_address(receiver));
  return m;
}

}  // namespace

Result<SplitRules> split_rule(const FilterRule& rule, PuId sender, PuId receiver) {
  SplitRules out;
  switch (rule.action.kind) {
    case ActionKind::Accept:
    case ActionKind::ForwardToPu:
      out.sender.push_back(rule);
      return out;
    case ActionKind::Redirect:
      break;
    default:
      return Errc::unsupported_rule_kind;
  }
  if (sender == receiver) {
    out.sender.push_back(rule);
    return out;
  }
  // Traffic addressed to the receiver's inter-PU address is ordinary port
  // forwarding, not intercepted traffic.
  const Match arriving = receiver_match(rule.match, receiver);
  // (1) sender: route to the receiver's PU without touching the packet.
  out.sender.push_back({rule.phase, rule.match, Action::forward(receiver)});
  // (2) receiver: route to the local container (already here: no change).
  out.receiver.push_back({Phase::Prerouting, arriving, Action::forward(receiver)});
  // (3) receiver: rewrite the destination and record the original here.
  out.receiver.push_back({Phase::Prerouting, arriving, rule.action});
  return out;
}

SplitRules split_rule_save_on_sender(const FilterRule& rule, PuId sender, PuId receiver) {
  SplitRules out;
  Action rewrite = rule.action;
  rewrite.save_orig_dst = false;
  out.sender.push_back({rule.phase, rule.match, Action::save_orig()});
  if (sender == receiver) {
    out.sender.push_back({rule.phase, rule.match, rewrite});
    return out;
  }
  out.sender.push_back({rule.phase, rule.match, Action::forward(receiver)});
  const Match arriving = receiver_match(rule.match, receiver);
  out.receiver.push_back({Phase::Prerouting, arriving, Action::forward(receiver)});
  out.receiver.push_back({Phase::Prerouting, arriving, rewrite});
  return out;
}

// ---------------------------------------------------------------------------

namespace {

bool matches(const Match& m, const PacketState& p) {
  if (m.ns && *m.ns != p.ns) return false;
  if (m.proto && *m.proto != p.proto) return false;
  if (m.src_host && *m.src_host != p.src.host) return false;
  if (m.src_port && *m.src_port != p.src.port) return false;
  if (m.dst_host && *m.dst_host != p.dst.host) return false;
  if (m.dst_port && *m.dst_port != p.dst.port) return false;
  if (std::find(m.dst_host_except.begin(), m.dst_host_except.end(), p.dst.host) !=
      m.dst_host_except.end()) {
    return false;
  }
  if (std::find(m.dst_port_except.begin(), m.dst_port_except.end(), p.dst.port) !=
      m.dst_port_except.end()) {
    return false;
  }
  return true;
}

// Runs one phase; returns the PU to move to when a rule routes elsewhere.
std::optional<PuId> run_phase(const Programs& programs, Phase phase, PacketState& p,
                              std::uint32_t& hits) {
  auto it = programs.find(p.location);
  if (it == programs.end()) return std::nullopt;
  for (const FilterRule& r : it->second.rules) {
    if (r.phase != phase || !matches(r.match, p)) continue;
    ++hits;
    const Action& a = r.action;
    switch (a.kind) {
      case ActionKind::Dnat:
        p.dst = a.to;
        break;
      case ActionKind::Snat:
        p.src.host = a.to.host;
        if (a.to.port != 0) p.src.port = a.to.port;
        break;
      case ActionKind::Redirect:
        if (a.save_orig_dst) {
          p.orig_dst = p.dst;
          p.orig_dst_pu = p.location;
        }
        p.dst = {std::string(kLoopback), a.port};
        break;
      case ActionKind::SaveOrigDst:
        p.orig_dst = p.dst;
        p.orig_dst_pu = p.location;
        break;
      case ActionKind::ForwardToPu:
        if (a.pu != p.location) return a.pu;
        break;
      case ActionKind::Accept:
        return std::nullopt;
    }
  }
  return std::nullopt;
}

}  // namespace

Result<DeliveryObservation> simulate_delivery(const Programs& programs, const PortTable& table,
                                              PacketState p) {
  DeliveryObservation obs;
  obs.path.push_back(p.location);
  std::optional<PuId> next = run_phase(programs, Phase::Output, p, obs.rule_hits);
  for (;;) {
    if (!next) {
      if (is_local(p.dst.host, p.location)) {
        (void)run_phase(programs, Phase::Input, p, obs.rule_hits);
        const auto owner = table.lookup({p.ns, p.proto, p.dst.port});
        if (!owner || *owner != p.location) return Errc::no_receiver;
        p.delivered_to = std::make_pair(p.location, p.dst.port);
        obs.receiver_pu = p.location;
        obs.receiver_port = p.dst.port;
        obs.final_dst = {std::string(kLoopback), p.dst.port};
        if (p.orig_dst && p.orig_dst_pu == p.location) obs.observable_orig_dst = p.orig_dst;
        return obs;
      }
      const auto j = pu_of(p.dst.host);
      if (!j || *j == p.location) {
        obs.external = true;
        obs.receiver_pu = p.location;
        obs.final_dst = p.dst;
        return obs;
      }
      next = j;
    }
    if (++obs.hops > kMaxHops) return Errc::routing_loop;
    p.location = *next;
    obs.path.push_back(p.location);
    next = run_phase(programs, Phase::Prerouting, p, obs.rule_hits);
    if (!next && !is_local(p.dst.host, p.location)) {
      next = run_phase(programs, Phase::Forward, p, obs.rule_hits);
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

std::string describe(const Result<DeliveryObservation>& r) {
  if (!r) return std::string(to_string(r.error()));
  const DeliveryObservation& o = *r;
  std::ostringstream os;
  if (o.external) {
    os << "external " << o.final_dst.str();
  } else {
    os << "port " << o.receiver_port << " dst " << o.final_dst.str();
  }
  os << " orig " << (o.observable_orig_dst ? o.observable_orig_dst->str() : "-");
  return os.str();
}

bool same_outcome(const Result<DeliveryObservation>& a, const Result<DeliveryObservation>& b) {
  if (!a || !b) return !a && !b && a.error() == b.error();
  return a->external == b->external && a->receiver_port == b->receiver_port &&
         a->final_dst == b->final_dst && a->observable_orig_dst == b->observable_orig_dst;
}

PortTable build_table(const Scenario& s, PuId sender, PuId receiver, bool reference) {
  PortTable t;
  auto reg = [&](const PortKey& k, PuId pu) {
    if (t.register_port(k, reference ? 0 : pu) != Errc::ok) {
      throw Error(Errc::config, "scenario binds port " + std::to_string(k.port) + " twice");
    }
  };
  reg(s.receiver_binding, receiver);
  for (const auto& k : s.sender_bindings) reg(k, sender);
  for (const auto& [k, pu] : s.fixed) reg(k, pu);
  return t;
}

std::vector<PuId> all_pus(const Scenario& s) {
  std::vector<PuId> v;
  for (PuId i = 0; i < std::max<std::size_t>(1, s.pu_names.size()); ++i) v.push_back(i);
  return v;
}

}  // namespace

Verdict equivalence_check(const Scenario& s) {
  Verdict v;
  // Single-PU reference: every process and the rule on PU 0.
  const PortTable ref_table = build_table(s, 0, 0, true);
  Programs ref = plan(ref_table, {0});
  ref[0].rules.insert(ref[0].rules.begin(), s.rule);

  for (const Placement& pl : s.placements) {
    PlacementVerdict pv;
    pv.placement = pl;
    const PortTable table = build_table(s, pl.sender, pl.receiver, false);
    Programs progs = plan(table, all_pus(s));
    SplitRules split;
    if (s.variant == SplitVariant::SaveOnSender) {
      split = split_rule_save_on_sender(s.rule, pl.sender, pl.receiver);
    } else {
      auto r = split_rule(s.rule, pl.sender, pl.receiver);
      if (!r) {
        pv.pass = false;
        pv.detail = std::string(to_string(r.error()));
        v.pass = false;
        v.placements.push_back(pv);
        continue;
      }
      split = *r;
    }
    // Interception sees the destination the application used, so it runs
    // ahead of the localhost forwarding rewrites.
    auto& sp = progs[pl.sender].rules;
    sp.insert(sp.begin(), split.sender.begin(), split.sender.end());
    auto& rp = progs[pl.receiver].rules;
    rp.insert(rp.end(), split.receiver.begin(), split.receiver.end());

    for (const PacketState& pkt : s.packets) {
      PacketState a = pkt;
      a.location = 0;
      PacketState b = pkt;
      b.location = pl.sender;
      const auto want = simulate_delivery(ref, ref_table, a);
      const auto got = simulate_delivery(progs, table, b);
      ++pv.packets;
      if (!same_outcome(want, got)) {
        ++pv.mismatches;
        if (pv.detail.empty()) {
          pv.detail = to_string(pkt.proto);
          pv.detail += " " + pkt.dst.str() + ": expected " + describe(want) + ", got " +
                       describe(got);
        }
      }
    }
    pv.pass = pv.mismatches == 0;
    v.pass = v.pass && pv.pass;
    v.placements.push_back(pv);
  }
  return v;
}

std::string format_verdict(const Scenario& s, const Verdict& v) {
  auto name = [&](PuId pu) {
    return pu < s.pu_names.size() ? s.pu_names[pu] : "pu" + std::to_string(pu);
  };
  std::ostringstream os;
  os << "scenario " << s.name << " ("
     << (s.variant == SplitVariant::Correct ? "split" : "save-on-sender split") << ")\n";
  os << std::left << std::setw(20) << "placement" << std::right << std::setw(9) << "packets"
     << std::setw(12) << "mismatches" << "  result\n";
  for (const auto& p : v.placements) {
    os << std::left << std::setw(20) << (name(p.placement.sender) + " -> " + name(p.placement.receiver))
       << std::right << std::setw(9) << p.packets << std::setw(12) << p.mismatches << "  "
       << (p.pass ? "Pass" : "Fail") << "\n";
    if (!p.pass) os << "    " << p.detail << "\n";
  }
  os << "overall: " << (v.pass ? "Pass" : "Fail") << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Scenario files

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const char* what) {
  for (const auto& [k, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      throw Error(Errc::config, std::string("unknown key '") + k + "' in " + what);
    }
  }
}

PuId pu_ref(const json& j, const std::vector<std::string>& names) {
  if (j.is_number_unsigned()) {
    const auto v = j.get<PuId>();
    if (v >= names.size()) throw Error(Errc::config, "PU index out of range");
    return v;
  }
  const auto s = j.get<std::string>();
  auto it = std::find(names.begin(), names.end(), s);
  if (it == names.end()) throw Error(Errc::config, "unknown PU '" + s + "'");
  return static_cast<PuId>(it - names.begin());
}

Phase phase_from(const std::string& s) {
  for (Phase p : {Phase::Output, Phase::Prerouting, Phase::Forward, Phase::Input}) {
    if (to_string(p) == s) return p;
  }
  throw Error(Errc::config, "unknown phase '" + s + "'");
}

Match match_from(const json& j) {
  check_keys(j, {"ns", "proto", "src_host", "src_port", "dst_host", "dst_port", "dst_host_except",
                 "dst_port_except"},
             "match");
  Match m;
  if (j.contains("ns")) m.ns = j["ns"].get<std::string>();
  if (j.contains("proto")) m.proto = protocol_from_string(j["proto"].get<std::string>());
  if (j.contains("src_host")) m.src_host = j["src_host"].get<std::string>();
  if (j.contains("src_port")) m.src_port = j["src_port"].get<std::uint16_t>();
  if (j.contains("dst_host")) m.dst_host = j["dst_host"].get<std::string>();
  if (j.contains("dst_port")) m.dst_port = j["dst_port"].get<std::uint16_t>();
  if (j.contains("dst_host_except")) {
    m.dst_host_except = j["dst_host_except"].get<std::vector<std::string>>();
  }
  if (j.contains("dst_port_except")) {
    m.dst_port_except = j["dst_port_except"].get<std::vector<std::uint16_t>>();
  }
  return m;
}

Action action_from(const json& j, const std::vector<std::string>& names) {
  check_keys(j, {"kind", "to", "port", "save_orig_dst", "pu"}, "action");
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "dnat") return Action::dnat(Endpoint::parse(j.at("to").get<std::string>()));
  if (kind == "snat") return Action::snat(Endpoint::parse(j.at("to").get<std::string>()));
  if (kind == "redirect") {
    return Action::redirect(j.at("port").get<std::uint16_t>(), j.value("save_orig_dst", false));
  }
  if (kind == "save_orig_dst") return Action::save_orig();
  if (kind == "forward_to_pu") return Action::forward(pu_ref(j.at("pu"), names));
  if (kind == "accept") return Action::accept();
  throw Error(Errc::config, "unknown action '" + kind + "'");
}

PortKey key_from(const json& j, const std::string& ns) {
  PortKey k;
  k.ns = j.value("ns", ns);
  k.proto = protocol_from_string(j.value("proto", std::string("tcp")));
  k.port = j.at("port").get<std::uint16_t>();
  return k;
}

}  // namespace

Scenario Scenario::parse(std::string_view text) {
  try {
    const json j = json::parse(text);
    check_keys(j, {"name", "pus", "namespace", "rule", "receiver", "sender", "fixed", "packets",
                   "grid", "placements", "variant"},
               "scenario");
    Scenario s;
    s.name = j.value("name", std::string("unnamed"));
    s.pu_names = j.value("pus", std::vector<std::string>{"cpu", "dpu"});
    if (s.pu_names.empty()) throw Error(Errc::config, "at least one PU");
    const std::string ns = j.value("namespace", std::string("default"));

    const json& r = j.at("rule");
    check_keys(r, {"phase", "match", "action"}, "rule");
    s.rule.phase = phase_from(r.value("phase", std::string("output")));
    s.rule.match = r.contains("match") ? match_from(r["match"]) : Match{};
    s.rule.action = action_from(r.at("action"), s.pu_names);

    s.receiver_binding = key_from(j.at("receiver"), ns);
    for (const auto& b : j.value("sender", json::array())) s.sender_bindings.push_back(key_from(b, ns));
    for (const auto& b : j.value("fixed", json::array())) {
      s.fixed.emplace_back(key_from(b, ns), pu_ref(b.at("pu"), s.pu_names));
    }

    for (const auto& p : j.value("packets", json::array())) {
      check_keys(p, {"src", "dst", "proto", "ns"}, "packet");
      PacketState ps;
      ps.src = Endpoint::parse(p.at("src").get<std::string>());
      ps.dst = Endpoint::parse(p.at("dst").get<std::string>());
      ps.proto = protocol_from_string(p.value("proto", std::string("tcp")));
      ps.ns = p.value("ns", ns);
      s.packets.push_back(ps);
    }
    if (j.contains("grid")) {
      const json& g = j["grid"];
      check_keys(g, {"src", "dst_hosts", "dst_ports", "protos"}, "grid");
      const Endpoint src = Endpoint::parse(g.at("src").get<std::string>());
      for (const auto& proto : g.at("protos").get<std::vector<std::string>>()) {
        for (const auto& host : g.at("dst_hosts").get<std::vector<std::string>>()) {
          for (const auto port : g.at("dst_ports").get<std::vector<std::uint16_t>>()) {
            PacketState ps;
            ps.src = src;
            ps.dst = Endpoint::parse(host + ":" + std::to_string(port));
            ps.proto = protocol_from_string(proto);
            ps.ns = ns;
            s.packets.push_back(ps);
          }
        }
      }
    }
    if (s.packets.empty()) throw Error(Errc::config, "scenario has no packets");

    if (j.contains("placements")) {
      for (const auto& p : j["placements"]) {
        if (!p.is_array() || p.size() != 2) throw Error(Errc::config, "placement is [sender, receiver]");
        s.placements.push_back({pu_ref(p[0], s.pu_names), pu_ref(p[1], s.pu_names)});
      }
    } else {
      for (PuId a = 0; a < s.pu_names.size(); ++a) {
        for (PuId b = 0; b < s.pu_names.size(); ++b) s.placements.push_back({a, b});
      }
    }
    const std::string variant = j.value("variant", std::string("split"));
    if (variant == "split") {
      s.variant = SplitVariant::Correct;
    } else if (variant == "save_on_sender") {
      s.variant = SplitVariant::SaveOnSender;
    } else {
      throw Error(Errc::config, "unknown variant '" + variant + "'");
    }
    return s;
  } catch (const json::exception& e) {
    throw Error(Errc::config, std::string("scenario: ") + e.what());
  }
}

Scenario Scenario::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::config, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace hetnet::netns

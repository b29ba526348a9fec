#pragma once

// Datagram protocol between runtimes and brokers. One fixed-size message per
// datagram over Unix sockets in the abstract namespace.

#include <sys/socket.h>
#include <sys/un.h>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "hetnet/gshm.hpp"
#include "hetnet/layout.hpp"

namespace hetnet::wire {

enum class Type : std::uint32_t {
  Register = 1,   // a = arena records; reply: principal, arena
  Unregister,     // principal
  OpenChannel,    // principal (acceptor), b.principal (connector), kind, a = reserve bytes
  Activate,       // channel
  CloseChannel,   // channel, principal
  Abort,          // channel: tear down a channel that never became active
  Fault,          // principal, record, mode = access kind
  Yield,          // principal: commit point
  Commit,         // arena: synchronous commit (tests, diagnostics)
  Arm,            // token, gen, mask, pipes (arm_entry values)
  Disarm,         // token; pipe + mask also restore a NoRW revocation
  Status,         // token or 0, pipe, mask, status
  NoRw,           // token, gen, mask, pipe
  TeardownPipe,   // pipe: sent to the broker owning the pipe's arena
  DeclareDead,    // principal
  Complete,       // broker -> runtime: token, gen, status
  Reply,          // broker -> runtime: req_id, status, payload
};

enum class Status : std::uint32_t { Ok = 0, Rejected = 1, Closed = 2, Error = 3 };

inline constexpr std::uint32_t kMaxPipes = 256;

struct Msg {
  Type type{};
  std::uint32_t req_id = 0;
  std::uint32_t principal = 0;
  std::uint32_t peer = 0;
  std::uint32_t pid = 0;
  std::uint32_t channel = 0;
  std::uint32_t pipe = kNoPipe;
  std::int32_t record = kNoRecord;
  std::uint32_t mask = 0;
  std::uint32_t mode = 0;
  std::uint32_t kind = 0;
  Status status = Status::Ok;
  std::uint32_t arena = kNoArena;
  std::uint32_t errc = 0;
  std::uint64_t token = 0;
  std::uint64_t gen = 0;
  std::uint64_t a = 0;
  std::uint64_t b = 0;
  std::int32_t records[2] = {kNoRecord, kNoRecord};
  // Original requester for forwarded requests; empty means "reply to sender".
  std::uint32_t reply_len = 0;
  char reply_to[sizeof(sockaddr_un::sun_path)] = {};
  std::uint32_t count = 0;
  std::uint32_t pipes[kMaxPipes] = {};
};

// Abstract-namespace address helpers.
struct Address {
  sockaddr_un sa{};
  socklen_t len = 0;

  static Address abstract(std::string_view name) {
    Address a;
    a.sa.sun_family = AF_UNIX;
    const std::size_t n = std::min(name.size(), sizeof(a.sa.sun_path) - 1);
    std::memcpy(a.sa.sun_path + 1, name.data(), n);
    a.len = static_cast<socklen_t>(offsetof(sockaddr_un, sun_path) + 1 + n);
    return a;
  }
  std::string name() const {
    if (len <= offsetof(sockaddr_un, sun_path) + 1) return {};
    return std::string(sa.sun_path + 1, len - offsetof(sockaddr_un, sun_path) - 1);
  }
};

inline std::string broker_address(std::string_view segment, std::uint32_t index) {
  return std::string(kAppPrefix) + "." + std::string(segment) + ".broker" + std::to_string(index);
}

// Principal ids carry the index of the broker that issued them.
inline constexpr std::uint32_t broker_of(std::uint32_t principal) { return (principal >> 24) - 1; }
inline constexpr std::uint32_t make_principal(std::uint32_t broker, std::uint32_t seq) {
  return ((broker + 1) << 24) | (seq & 0xffffffU);
}
// ARM carries one entry per pipe: the pipe id and the mask bits (R = 1,
// W = 2) that apply to it.
inline constexpr std::uint32_t arm_entry(std::uint32_t pipe, std::uint32_t bits) {
  return (pipe << 2) | (bits & 3U);
}
inline constexpr std::uint32_t entry_pipe(std::uint32_t entry) { return entry >> 2; }

inline constexpr std::uint32_t token_owner(std::uint64_t token) {
  return static_cast<std::uint32_t>(token >> 32);
}

void set_reply_to(Msg& m, const Address& a);
Address reply_address(const Msg& m, const Address& from);

// Thin wrappers over a bound SOCK_DGRAM Unix socket.
class Socket {
 public:
  Socket() = default;
  explicit Socket(const std::string& bind_name);
  ~Socket();
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Socket& operator=(Socket&& o) noexcept;

  int fd() const { return fd_; }
  bool send(const Address& to, const Msg& m) const;
  // Blocks unless nonblocking is set; returns false on EAGAIN/EINTR.
  bool recv(Msg& m, Address& from, bool nonblocking = false) const;

 private:
  int fd_ = -1;
};

}  // namespace hetnet::wire

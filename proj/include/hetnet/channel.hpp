#pragma once

// Socket-like connections. Establishment always uses an ordinary TCP socket;
// when both ends run this library on the same segment and the allowlist
// permits it, the data path then moves to record chains in the segment.
// Otherwise the TCP socket carries the data.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hetnet/error.hpp"
#include "hetnet/layout.hpp"
#include "hetnet/runtime.hpp"

namespace hetnet {

enum class Transport : std::uint8_t { Socket = 0, Elastic = 1, Reserve = 2 };

std::string_view to_string(Transport t);
Transport transport_from_string(std::string_view s);  // throws Error(config)

// `allow|deny <host-pattern>:<port-pattern>` per line, `*` wildcards, `#`
// comments. Top-down, first match wins, implicit trailing `deny *:*`.
class Allowlist {
 public:
  struct Rule {
    bool allow = false;
    std::string host;
    std::string port;
  };

  static Allowlist parse(std::string_view text);
  static Allowlist load(const std::filesystem::path& path);
  static Allowlist allow_all();

  bool permits(std::string_view host, std::uint16_t port) const;
  const std::vector<Rule>& rules() const { return rules_; }

 private:
  std::vector<Rule> rules_;
};

struct ChannelOptions {
  // Requested data path. Socket never attempts the segment.
  Transport transport = Transport::Elastic;
  std::uint64_t reserve_bytes = 16ULL << 20;  // per direction, Reserve only
  std::shared_ptr<const Allowlist> allowlist;  // null: allow everything
  // Blocking channels wait on full/empty; non-blocking ones return
  // would_block (or a short count).
  bool blocking = true;
  std::chrono::milliseconds handshake_timeout{100};
};

class Channel {
 public:
  ~Channel();
  Channel(const Channel&) = delete;
  Channel& operator=(const Channel&) = delete;

  Transport transport() const { return transport_; }
  bool accelerated() const { return transport_ != Transport::Socket; }
  // True when the handshake ran into its timeout before falling back.
  bool handshake_timed_out() const { return handshake_timed_out_; }
  Worker& worker() const { return *worker_; }
  ChannelId id() const { return channel_; }
  PipeId tx_pipe() const { return tx_; }
  PipeId rx_pipe() const { return rx_; }
  Principal peer() const { return peer_; }
  int fd() const { return fd_; }
  bool blocking() const { return opts_.blocking; }
  void set_blocking(bool b) { opts_.blocking = b; }

  // Writes up to len bytes. Blocking channels return only once everything is
  // written (or on error); non-blocking ones may return a short count and
  // fail with would_block when nothing fits.
  Result<std::size_t> write(const void* data, std::size_t len);
  // Returns at least one byte, or 0 at end of stream. Blocking channels wait
  // for data; non-blocking ones fail with would_block.
  Result<std::size_t> read(void* buf, std::size_t max);
  Result<std::size_t> try_write(const void* data, std::size_t len);
  Result<std::size_t> try_read(void* buf, std::size_t max);

  Errc write_all(std::span<const std::byte> data);
  Errc read_exact(std::span<std::byte> buf);

  // Stops sending; the peer drains what is left and then sees end of stream.
  // Idempotent.
  void close();
  bool closed() const { return closed_; }

  // Control-path queries: peer_addr, local_addr, original_dst, occupancy,
  // transport.
  Result<std::string> get_metadata(std::string_view key) const;
  // Records the pre-rewrite destination observed by the namespace layer.
  void set_original_destination(std::string dst) { original_dst_ = std::move(dst); }

  // Non-mutating readiness checks used by the notification layer.
  bool readable() const;
  bool writable() const;

  // Notification slots: this side's reader and writer waiter words, and the
  // arena waiter word (exhaustion) when the channel writes from an arena.
  std::atomic<std::uint64_t>* reader_slot() const;
  std::atomic<std::uint64_t>* writer_slot() const;
  std::atomic<std::uint64_t>* arena_slot() const;

  // Bytes written but not yet read, per direction.
  std::uint64_t unread_tx() const;
  std::uint64_t unread_rx() const;

  // Blocks until readable/writable (or closed) using a Sync token.
  void wait_readable();
  void wait_writable();

 private:
  friend class Listener;
  friend std::unique_ptr<Channel> connect(Worker&, const std::string&, std::uint16_t,
                                          ChannelOptions);
  Channel(Worker& w, int fd, ChannelOptions opts);
  void attach_gshm(ChannelId ch, std::uint32_t dir, std::uint64_t gen, Transport t,
                   Principal peer);

  Result<std::size_t> gshm_write(const std::byte* src, std::size_t len);
  Result<std::size_t> gshm_read(std::byte* dst, std::size_t max);
  Result<std::size_t> socket_write(const std::byte* src, std::size_t len, bool block);
  Result<std::size_t> socket_read(std::byte* dst, std::size_t max, bool block);
  RecordId advance_write_record(RecordId w);
  bool elastic_writable() const;
  void notify_reader() const;
  void notify_writer() const;
  Errc pipe_error(const PipeBlock& p) const;

  Worker* worker_;
  const SharedState* st_;
  int fd_ = -1;
  ChannelOptions opts_;
  Transport transport_ = Transport::Socket;
  bool handshake_timed_out_ = false;
  ChannelId channel_ = 0;
  PipeId tx_ = kNoPipe;
  PipeId rx_ = kNoPipe;
  Principal peer_ = kNoPrincipal;
  std::uint64_t gen_ = 0;
  std::uint64_t cap_ = 0;
  Arena arena_;
  bool closed_ = false;
  std::string original_dst_;
  std::shared_ptr<NotifyToken> read_token_;
  std::shared_ptr<NotifyToken> write_token_;
};

class Listener {
 public:
  // Binds host:port (port 0 picks one) and listens.
  static std::unique_ptr<Listener> listen(Worker& w, const std::string& host, std::uint16_t port,
                                          ChannelOptions opts = {});
  ~Listener();

  std::uint16_t port() const { return port_; }
  int fd() const { return fd_; }
  // Accepts one connection and runs the acceptor side of the handshake.
  std::unique_ptr<Channel> accept();

 private:
  Listener() = default;
  Worker* worker_ = nullptr;
  int fd_ = -1;
  std::uint16_t port_ = 0;
  ChannelOptions opts_;
};

// Connects and runs the connector side of the handshake.
std::unique_ptr<Channel> connect(Worker& w, const std::string& host, std::uint16_t port,
                                 ChannelOptions opts = {});

}  // namespace hetnet

#include "hetnet/wire.hpp"

#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>

#include "hetnet/error.hpp"

namespace hetnet::wire {

void set_reply_to(Msg& m, const Address& a) {
  m.reply_len = a.len;
  std::memcpy(m.reply_to, a.sa.sun_path, sizeof(m.reply_to));
}

Address reply_address(const Msg& m, const Address& from) {
  if (m.reply_len == 0) return from;
  Address a;
  a.sa.sun_family = AF_UNIX;
  a.len = m.reply_len;
  std::memcpy(a.sa.sun_path, m.reply_to, sizeof(a.sa.sun_path));
  return a;
}

Socket::Socket(const std::string& bind_name) {
  fd_ = ::socket(AF_UNIX, SOCK_DGRAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0) throw_errno(Errc::io, "socket");
  const Address a = Address::abstract(bind_name);
  if (::bind(fd_, reinterpret_cast<const sockaddr*>(&a.sa), a.len) != 0) {
    const int err = errno;
    ::close(fd_);
    fd_ = -1;
    errno = err;
    throw_errno(err == EADDRINUSE ? Errc::name_collision : Errc::io, "bind " + bind_name);
  }
  // Room for bursts of completions without blocking the broker.
  int buf = 4 << 20;
  ::setsockopt(fd_, SOL_SOCKET, SO_RCVBUF, &buf, sizeof(buf));
}

Socket::~Socket() {
  if (fd_ >= 0) ::close(fd_);
}

Socket& Socket::operator=(Socket&& o) noexcept {
  if (this != &o) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = o.fd_;
    o.fd_ = -1;
  }
  return *this;
}

namespace {

std::size_t wire_size(const Msg& m) {
  return offsetof(Msg, pipes) + sizeof(std::uint32_t) * std::min(m.count, kMaxPipes);
}

}  // namespace

bool Socket::send(const Address& to, const Msg& m) const {
  for (;;) {
    const ssize_t n = ::sendto(fd_, &m, wire_size(m), MSG_NOSIGNAL,
                               reinterpret_cast<const sockaddr*>(&to.sa), to.len);
    if (n >= 0) return true;
    if (errno == EINTR) continue;
    if (errno == EAGAIN || errno == ENOBUFS) {
      // Receiver queue full: back off briefly rather than dropping.
      ::usleep(50);
      continue;
    }
    return false;  // peer gone (ECONNREFUSED / ENOENT)
  }
}

bool Socket::recv(Msg& m, Address& from, bool nonblocking) const {
  from.len = sizeof(from.sa);
  const ssize_t n = ::recvfrom(fd_, &m, sizeof(m), nonblocking ? MSG_DONTWAIT : 0,
                               reinterpret_cast<sockaddr*>(&from.sa), &from.len);
  if (n < static_cast<ssize_t>(offsetof(Msg, pipes))) return false;
  const auto cnt = static_cast<std::size_t>(n - static_cast<ssize_t>(offsetof(Msg, pipes))) /
                   sizeof(std::uint32_t);
  m.count = static_cast<std::uint32_t>(std::min<std::size_t>(m.count, cnt));
  return true;
}

}  // namespace hetnet::wire

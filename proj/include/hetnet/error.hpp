#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>

namespace hetnet {

enum class Errc : std::uint8_t {
  ok = 0,
  invalid_argument,
  alignment,
  name_collision,
  out_of_memory,
  segment_exhausted,
  unknown_record,
  arena_exhausted,
  rate_limited,
  rate_limit_violation,
  release_unconsumed,
  not_owner,
  channel_closed,
  would_block,
  handshake_timeout,
  unknown_key,
  no_original_dst,
  conflict,
  unsupported_rule_kind,
  routing_loop,
  no_receiver,
  conflicting_token,
  protocol,
  io,
  config,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// Throws Error with errno text appended.
[[noreturn]] void throw_errno(Errc code, const std::string& what);

// Value-or-error return used on paths where failure is an expected outcome
// (data path, allocator) rather than a setup bug.
template <class T>
class Result {
 public:
  Result(T value) : v_(std::move(value)) {}  // NOLINT(google-explicit-constructor)
  Result(Errc code) : v_(code) {}            // NOLINT(google-explicit-constructor)

  bool ok() const noexcept { return v_.index() == 0; }
  explicit operator bool() const noexcept { return ok(); }

  Errc error() const noexcept { return ok() ? Errc::ok : std::get<1>(v_); }

  T& value() & {
    if (!ok()) throw Error(error(), "Result::value on error");
    return std::get<0>(v_);
  }
  const T& value() const& {
    if (!ok()) throw Error(error(), "Result::value on error");
    return std::get<0>(v_);
  }
  T&& value() && {
    if (!ok()) throw Error(error(), "Result::value on error");
    return std::get<0>(std::move(v_));
  }

  T* operator->() { return &value(); }
  const T* operator->() const { return &value(); }
  T& operator*() & { return value(); }
  const T& operator*() const& { return value(); }

 private:
  std::variant<T, Errc> v_;
};

}  // namespace hetnet

#include "hetnet/runtime.hpp"

#include <poll.h>
#include <pthread.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <ctime>

namespace hetnet {

using wire::Msg;
using wire::Type;

namespace {

std::atomic<std::uint32_t> g_runtime_seq{0};
thread_local int t_callback_depth = 0;

std::uint64_t thread_cpu_ns(clockid_t cid) {
  timespec ts{};
  if (::clock_gettime(cid, &ts) != 0) return 0;
  return static_cast<std::uint64_t>(ts.tv_sec) * 1000000000ULL +
         static_cast<std::uint64_t>(ts.tv_nsec);
}

}  // namespace

bool NotifyToken::wait(std::chrono::milliseconds timeout) {
  std::unique_lock lk(mu_);
  return cv_.wait_for(lk, timeout, [&] { return state() != TokenState::Armed; });
}

// ---------------------------------------------------------------------------
// Runtime

std::shared_ptr<Runtime> Runtime::attach(const std::string& segment, RuntimeOptions opts) {
  std::shared_ptr<Runtime> rt(new Runtime());
  rt->opts_ = opts;
  rt->segment_name_ = segment;
  rt->segment_ = Segment::open(segment);
  rt->state_ = SharedState(rt->segment_.data());
  rt->pmap_ = PermissionMap(rt->state_);
  rt->broker_count_ = std::max<std::uint32_t>(1, rt->state_.broker_count());
  if (opts.broker >= rt->broker_count_) {
    throw Error(Errc::invalid_argument, "broker index out of range");
  }
  for (std::uint32_t i = 0; i < rt->broker_count_; ++i) {
    rt->brokers_.push_back(wire::Address::abstract(wire::broker_address(segment, i)));
  }
  rt->base_name_ = std::string(kAppPrefix) + "." + segment + ".rt." +
                   std::to_string(::getpid()) + "." + std::to_string(g_runtime_seq.fetch_add(1));
  rt->events_ = wire::Socket(rt->base_name_ + ".ev");
  rt->events_addr_ = wire::Address::abstract(rt->base_name_ + ".ev");
  rt->wake_fd_ = ::eventfd(0, EFD_CLOEXEC | EFD_NONBLOCK);
  if (rt->wake_fd_ < 0) throw_errno(Errc::io, "eventfd");
  Runtime* raw = rt.get();
  rt->dispatcher_ = std::thread([raw] { raw->dispatch_loop(); });
  while (!rt->dispatcher_ready_.load()) std::this_thread::yield();
  return rt;
}

Runtime::~Runtime() {
  stopping_.store(true);
  const std::uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(wake_fd_, &one, sizeof(one));
  if (dispatcher_.joinable()) dispatcher_.join();
  if (wake_fd_ >= 0) ::close(wake_fd_);
}

std::unique_ptr<wire::Socket> Runtime::take_call_socket() {
  std::lock_guard lk(call_mu_);
  if (!call_pool_.empty()) {
    auto s = std::move(call_pool_.back());
    call_pool_.pop_back();
    return s;
  }
  auto s = std::make_unique<wire::Socket>(base_name_ + ".c" + std::to_string(call_sockets_++));
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(opts_.call_timeout.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((opts_.call_timeout.count() % 1000) * 1000);
  ::setsockopt(s->fd(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  return s;
}

void Runtime::put_call_socket(std::unique_ptr<wire::Socket> s) {
  std::lock_guard lk(call_mu_);
  call_pool_.push_back(std::move(s));
}

Msg Runtime::call(Msg m, std::uint32_t broker) {
  auto sock = take_call_socket();
  m.req_id = next_req_.fetch_add(1);
  if (m.req_id == 0) m.req_id = next_req_.fetch_add(1);
  if (!sock->send(brokers_.at(broker), m)) {
    put_call_socket(std::move(sock));
    throw Error(Errc::io, "broker " + std::to_string(broker) + " unreachable");
  }
  const auto deadline = std::chrono::steady_clock::now() + opts_.call_timeout;
  Msg r;
  wire::Address from;
  for (;;) {
    if (sock->recv(r, from, false)) {
      if (r.type == Type::Reply && r.req_id == m.req_id) break;
      continue;  // stale reply of an earlier timed-out call
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      put_call_socket(std::move(sock));
      throw Error(Errc::io, "broker call timed out");
    }
  }
  put_call_socket(std::move(sock));
  return r;
}

void Runtime::send(const Msg& m, std::uint32_t broker, std::atomic<std::uint64_t>& counter) {
  counter.fetch_add(1, std::memory_order_relaxed);
  events_.send(brokers_.at(broker), m);
}

Errc Runtime::fault(Principal who, RecordId record, AccessKind kind) {
  counters().fault_messages.fetch_add(1, std::memory_order_relaxed);
  Msg m;
  m.type = Type::Fault;
  m.principal = who;
  m.record = record;
  m.mode = static_cast<std::uint32_t>(kind);
  const Msg r = call(m, wire::broker_of(who) < broker_count_ ? wire::broker_of(who) : opts_.broker);
  if (r.status == wire::Status::Ok) return Errc::ok;
  return r.errc != 0 ? static_cast<Errc>(r.errc) : Errc::not_owner;
}

void Runtime::signal_slot(std::atomic<std::uint64_t>& slot, wire::Status status) {
  if (slot.load(std::memory_order_seq_cst) == 0) return;
  const TokenId t = slot.exchange(0, std::memory_order_seq_cst);
  if (t == 0) return;
  Msg m;
  m.type = Type::Status;
  m.token = t;
  m.status = status;
  send(m, opts_.broker, counters().notify_messages);
}

std::shared_ptr<NotifyToken> Runtime::find_token(TokenId id) const {
  std::lock_guard lk(tokens_mu_);
  auto it = tokens_.find(id);
  return it == tokens_.end() ? nullptr : it->second.lock();
}

std::uint32_t Runtime::token_broker(TokenId id) const {
  const std::uint32_t b = wire::broker_of(wire::token_owner(id));
  return b < broker_count_ ? b : opts_.broker;
}

std::shared_ptr<NotifyToken> Runtime::make_token(Principal owner, NotifyMode mode,
                                                 NotifyCallback cb) {
  std::weak_ptr<Runtime> weak = weak_from_this();
  const TokenId id = (static_cast<TokenId>(owner) << 32) | next_token_.fetch_add(1);
  std::shared_ptr<NotifyToken> t(new NotifyToken(), [weak, id](NotifyToken* p) {
    if (auto rt = weak.lock()) {
      if (p->state() == TokenState::Armed || p->norw_pipe_ != kNoPipe) rt->disarm(*p);
      rt->release_token(id);
    }
    delete p;
  });
  t->rt_ = this;
  t->id_ = id;
  t->mode_ = mode;
  t->callback_ = std::move(cb);
  std::lock_guard lk(tokens_mu_);
  tokens_[id] = t;
  return t;
}

void Runtime::release_token(TokenId id) {
  std::lock_guard lk(tokens_mu_);
  tokens_.erase(id);
}

std::size_t Runtime::live_tokens() const {
  std::lock_guard lk(tokens_mu_);
  return tokens_.size();
}

Errc Runtime::arm(NotifyToken& t, std::uint32_t mask, const std::vector<std::uint32_t>& entries,
                  const std::vector<std::atomic<std::uint64_t>*>& slots,
                  const std::function<bool()>& ready) {
  if (entries.size() > wire::kMaxPipes) return Errc::invalid_argument;
  for (auto* s : slots) {
    const TokenId v = s->load(std::memory_order_acquire);
    if (v == 0 || v == t.id_) continue;
    std::lock_guard lk(tokens_mu_);
    auto it = tokens_.find(v);
    if (it == tokens_.end()) continue;
    auto other = it->second.lock();
    if (other && other->state() == TokenState::Armed) return Errc::conflicting_token;
  }
  const std::uint64_t gen = t.gen_.fetch_add(1) + 1;
  t.mask_ = mask;
  t.entries_ = entries;
  t.slots_.clear();
  for (auto* s : slots) t.slots_.push_back({s});
  t.state_.store(static_cast<std::uint32_t>(TokenState::Armed), std::memory_order_seq_cst);

  Msg m;
  m.type = Type::Arm;
  m.token = t.id_;
  m.gen = gen;
  m.mask = mask;
  m.count = static_cast<std::uint32_t>(entries.size());
  std::copy(entries.begin(), entries.end(), m.pipes);
  send(m, token_broker(t.id_), counters().notify_messages);

  for (auto* s : slots) s->store(t.id_, std::memory_order_seq_cst);
  std::atomic_thread_fence(std::memory_order_seq_cst);
  // A completion may have fired this arming before the slots went up.
  if (t.state() != TokenState::Armed || t.gen_.load() != gen) {
    for (auto* s : slots) {
      TokenId expect = t.id_;
      s->compare_exchange_strong(expect, 0);
    }
    return Errc::ok;
  }
  if (ready && ready()) fire(t, gen, NotifyEvent::Ready);
  return Errc::ok;
}

Errc Runtime::arm_norw(NotifyToken& t, PipeId pipe, std::uint32_t mask) {
  const Errc e = arm(t, mask, {wire::arm_entry(pipe, mask)}, {}, {});
  if (e != Errc::ok) return e;
  t.norw_pipe_ = pipe;
  t.norw_mask_ = mask;
  Msg m;
  m.type = Type::NoRw;
  m.token = t.id_;
  m.gen = t.gen_.load();
  m.mask = mask;
  m.pipe = pipe;
  counters().notify_messages.fetch_add(1, std::memory_order_relaxed);
  call(m, token_broker(t.id_));
  return Errc::ok;
}

void Runtime::disarm(NotifyToken& t) {
  const auto prev = static_cast<TokenState>(
      t.state_.exchange(static_cast<std::uint32_t>(TokenState::Disabled)));
  for (auto& s : t.slots_) {
    TokenId expect = t.id_;
    s.word->compare_exchange_strong(expect, 0);
  }
  if (t.norw_pipe_ != kNoPipe) {
    Msg m;
    m.type = Type::Disarm;
    m.token = t.id_;
    m.pipe = t.norw_pipe_;
    m.mask = t.norw_mask_;
    counters().notify_messages.fetch_add(1, std::memory_order_relaxed);
    call(m, token_broker(t.id_));
    t.norw_pipe_ = kNoPipe;
    t.norw_mask_ = 0;
  } else if (prev == TokenState::Armed) {
    Msg m;
    m.type = Type::Disarm;
    m.token = t.id_;
    send(m, token_broker(t.id_), counters().notify_messages);
  }
  std::lock_guard lk(t.mu_);
  t.cv_.notify_all();
}

bool Runtime::fire(NotifyToken& t, std::uint64_t gen, NotifyEvent ev) {
  if (gen != 0 ? gen != t.gen_.load() : ev != NotifyEvent::Closed) return false;
  auto expect = static_cast<std::uint32_t>(TokenState::Armed);
  const auto to = static_cast<std::uint32_t>(ev == NotifyEvent::Closed ? TokenState::Closed
                                                                       : TokenState::Fired);
  if (!t.state_.compare_exchange_strong(expect, to, std::memory_order_acq_rel)) return false;
  t.event_.store(static_cast<std::uint32_t>(ev));
  for (auto& s : t.slots_) {
    TokenId id = t.id_;
    s.word->compare_exchange_strong(id, 0);
  }
  t.deliveries_.fetch_add(1, std::memory_order_acq_rel);
  if (t.mode_ == NotifyMode::Sync) {
    std::lock_guard lk(t.mu_);
    t.cv_.notify_all();
    return true;
  }
  if (std::this_thread::get_id() == dispatcher_.get_id()) {
    if (t.callback_) {
      ++t_callback_depth;
      t.callback_(ev);
      --t_callback_depth;
    }
    return true;
  }
  std::shared_ptr<NotifyToken> sp;
  {
    std::lock_guard lk(tokens_mu_);
    auto it = tokens_.find(t.id_);
    if (it != tokens_.end()) sp = it->second.lock();
  }
  if (sp) {
    std::lock_guard lk(local_mu_);
    local_.emplace_back(sp, ev);
  }
  const std::uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(wake_fd_, &one, sizeof(one));
  return true;
}

void Runtime::deliver(const std::shared_ptr<NotifyToken>& t, NotifyEvent ev) {
  if (!t->callback_) return;
  // Callbacks must not block or re-enter the dispatcher.
  ++t_callback_depth;
  t->callback_(ev);
  --t_callback_depth;
}

void Runtime::dispatch_loop() {
  clockid_t cid;
  pthread_getcpuclockid(pthread_self(), &cid);
  dispatcher_clock_.store(cid);
  dispatcher_ready_.store(true);
  while (!stopping_.load()) {
    pollfd fds[2] = {{events_.fd(), POLLIN, 0}, {wake_fd_, POLLIN, 0}};
    if (::poll(fds, 2, 100) <= 0) continue;
    Msg m;
    wire::Address from;
    while (events_.recv(m, from, true)) {
      if (m.type != Type::Complete) continue;
      std::shared_ptr<NotifyToken> t;
      {
        std::lock_guard lk(tokens_mu_);
        auto it = tokens_.find(m.token);
        if (it != tokens_.end()) t = it->second.lock();
      }
      if (!t) continue;
      fire(*t, m.gen,
           m.status == wire::Status::Closed ? NotifyEvent::Closed : NotifyEvent::Ready);
    }
    if (fds[1].revents & POLLIN) {
      std::uint64_t v;
      while (::read(wake_fd_, &v, sizeof(v)) > 0) {
      }
      std::deque<std::pair<std::weak_ptr<NotifyToken>, NotifyEvent>> q;
      {
        std::lock_guard lk(local_mu_);
        q.swap(local_);
      }
      for (auto& [w, ev] : q) {
        if (auto t = w.lock()) deliver(t, ev);
      }
    }
  }
}

std::uint64_t Runtime::dispatcher_cpu_ns() const {
  return dispatcher_ready_.load() ? thread_cpu_ns(dispatcher_clock_.load()) : 0;
}

// ---------------------------------------------------------------------------
// Worker

Worker::Worker(std::shared_ptr<Runtime> rt, WorkerOptions opts)
    : rt_(std::move(rt)), opts_(opts) {
  Msg m;
  m.type = Type::Register;
  m.pid = static_cast<std::uint32_t>(::getpid());
  m.a = opts.arena_records;
  // Completions for this principal go to the runtime's event socket.
  wire::set_reply_to(m, rt_->events_address());
  counters().control_messages.fetch_add(1, std::memory_order_relaxed);
  Msg r = rt_->call(m);
  if (r.status != wire::Status::Ok) {
    throw Error(static_cast<Errc>(r.errc), "worker registration failed");
  }
  principal_ = r.principal;
  if (r.arena != kNoArena) arena_ = Arena(rt_->state(), r.arena);
}

Worker::~Worker() {
  try {
    Msg m;
    m.type = Type::Unregister;
    m.principal = principal_;
    counters().control_messages.fetch_add(1, std::memory_order_relaxed);
    rt_->call(m, wire::broker_of(principal_));
  } catch (const Error&) {
    // Broker already gone: nothing left to reclaim.
  }
}

void Worker::maintain() {
  if (!arena_.valid()) return;
  ArenaBlock& a = arena_.block();
  if (a.ret_tail.load(std::memory_order_acquire) != a.ret_head.load(std::memory_order_relaxed)) {
    drain_returns(arena_);
  }
  const std::uint64_t epoch = a.teardown_epoch.load(std::memory_order_acquire);
  if (epoch == a.teardown_seen.load(std::memory_order_relaxed)) return;
  a.teardown_seen.store(epoch, std::memory_order_relaxed);
  const SharedState& st = rt_->state();
  for (std::uint32_t ch = 0; ch < st.max_channels(); ++ch) {
    for (std::uint32_t dir = 0; dir < 2; ++dir) {
      PipeBlock& p = st.channel(ch).pipes[dir];
      if (p.arena != arena_.slot() || p.sender != principal_) continue;
      if (p.teardown_pending.load(std::memory_order_acquire) == 0) continue;
      if (p.torn_down.load(std::memory_order_acquire) == 0) continue;
      reclaim_pipe(arena_, pipe_id(ch, dir));
    }
  }
}

void Worker::yield() {
  Msg m;
  m.type = Type::Yield;
  m.principal = principal_;
  rt_->send(m, wire::broker_of(principal_), counters().notify_messages);
}

void Worker::commit() {
  if (!arena_.valid()) return;
  Msg m;
  m.type = Type::Commit;
  m.arena = arena_.slot();
  counters().control_messages.fetch_add(1, std::memory_order_relaxed);
  rt_->call(m, arena_.slot() % rt_->broker_count());
}

std::uint32_t reclaim_consumed_pipe(const SharedState& st, Arena arena, PipeId pipe) {
  PipeBlock& p = st.pipe(pipe);
  const RecordId head = p.head_record.load(std::memory_order_acquire);
  std::uint32_t n = 0;
  for (;;) {
    const RecordId r = p.reclaim_record.load(std::memory_order_relaxed);
    if (r == head || r == kNoRecord) break;
    const RecordId next = st.record(r).next.load(std::memory_order_acquire);
    if (r == p.local_record) {
      p.local_in_chain.store(0, std::memory_order_release);
      p.reclaim_record.store(next, std::memory_order_relaxed);
      continue;
    }
    const RecordId one[] = {r};
    if (!arena.valid() || release_records(arena, pipe, one) != Errc::ok) break;
    ++n;
  }
  return n;
}

std::uint32_t Worker::reclaim_consumed() {
  std::uint32_t n = 0;
  for (PipeId p : tx_pipes_) n += reclaim_consumed_pipe(rt_->state(), arena_, p);
  return n;
}

bool Worker::reclaimable() const {
  const SharedState& st = rt_->state();
  for (PipeId p : tx_pipes_) {
    const PipeBlock& pb = st.pipe(p);
    const RecordId r = pb.reclaim_record.load(std::memory_order_relaxed);
    if (r != kNoRecord && r != pb.head_record.load(std::memory_order_acquire)) return true;
  }
  return false;
}

void Worker::add_tx_pipe(PipeId p) { tx_pipes_.push_back(p); }

void Worker::remove_tx_pipe(PipeId p) {
  tx_pipes_.erase(std::remove(tx_pipes_.begin(), tx_pipes_.end(), p), tx_pipes_.end());
}

}  // namespace hetnet

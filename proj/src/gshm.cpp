#include "hetnet/gshm.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <sys/statvfs.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <memory>

namespace hetnet {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::ok: return "ok";
    case Errc::invalid_argument: return "invalid argument";
    case Errc::alignment: return "not page aligned";
    case Errc::name_collision: return "name collision";
    case Errc::out_of_memory: return "insufficient memory";
    case Errc::segment_exhausted: return "segment exhausted";
    case Errc::unknown_record: return "unknown record";
    case Errc::arena_exhausted: return "arena exhausted";
    case Errc::rate_limited: return "rate limited";
    case Errc::rate_limit_violation: return "rate limit violation";
    case Errc::release_unconsumed: return "release of unconsumed record";
    case Errc::not_owner: return "not owner";
    case Errc::channel_closed: return "channel closed";
    case Errc::would_block: return "would block";
    case Errc::handshake_timeout: return "handshake timeout";
    case Errc::unknown_key: return "unknown key";
    case Errc::no_original_dst: return "no original destination";
    case Errc::conflict: return "conflict";
    case Errc::unsupported_rule_kind: return "unsupported rule kind";
    case Errc::routing_loop: return "routing loop";
    case Errc::no_receiver: return "no receiver";
    case Errc::conflicting_token: return "conflicting token";
    case Errc::protocol: return "protocol error";
    case Errc::io: return "i/o error";
    case Errc::config: return "configuration error";
  }
  return "unknown";
}

void throw_errno(Errc code, const std::string& what) {
  throw Error(code, what + ": " + std::strerror(errno));
}

std::string shm_object_name(std::string_view segment_name) {
  std::string n = "/";
  n += kAppPrefix;
  n += '.';
  n += segment_name;
  return n;
}

Segment::~Segment() { reset(); }

Segment::Segment(Segment&& other) noexcept { *this = std::move(other); }

Segment& Segment::operator=(Segment&& other) noexcept {
  if (this != &other) {
    reset();
    data_ = std::exchange(other.data_, nullptr);
    size_ = std::exchange(other.size_, 0);
    name_ = std::move(other.name_);
    fd_ = std::exchange(other.fd_, -1);
    unlink_on_close_ = std::exchange(other.unlink_on_close_, false);
  }
  return *this;
}

void Segment::reset() noexcept {
  if (data_ != nullptr) ::munmap(data_, size_);
  if (fd_ >= 0) ::close(fd_);
  if (unlink_on_close_ && !name_.empty()) ::shm_unlink(shm_object_name(name_).c_str());
  data_ = nullptr;
  size_ = 0;
  fd_ = -1;
  unlink_on_close_ = false;
}

Segment Segment::create(std::string_view name, std::uint64_t size_bytes) {
  if (name.empty() || name.find('/') != std::string_view::npos) {
    throw Error(Errc::invalid_argument, "segment name must be non-empty without '/'");
  }
  if (size_bytes == 0 || size_bytes % kPageSize != 0) {
    throw Error(Errc::alignment, "segment size " + std::to_string(size_bytes) +
                                     " is not a positive multiple of the page size");
  }
  if (size_bytes < 2 * kPageSize) {
    throw Error(Errc::invalid_argument, "segment must span at least two pages");
  }
  struct statvfs vfs{};
  if (::statvfs("/dev/shm", &vfs) == 0) {
    const std::uint64_t avail = static_cast<std::uint64_t>(vfs.f_bavail) * vfs.f_frsize;
    if (avail < size_bytes) {
      throw Error(Errc::out_of_memory, "segment of " + std::to_string(size_bytes) +
                                           " bytes exceeds available shared memory");
    }
  }
  const std::string obj = shm_object_name(name);
  int fd = ::shm_open(obj.c_str(), O_RDWR | O_CREAT | O_EXCL, 0600);
  if (fd < 0) {
    if (errno == EEXIST) throw Error(Errc::name_collision, obj);
    throw_errno(Errc::io, "shm_open " + obj);
  }
  if (::ftruncate(fd, static_cast<off_t>(size_bytes)) != 0) {
    const int err = errno;
    ::close(fd);
    ::shm_unlink(obj.c_str());
    errno = err;
    throw_errno(err == ENOSPC || err == ENOMEM ? Errc::out_of_memory : Errc::io, "ftruncate");
  }
  void* p = ::mmap(nullptr, size_bytes, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
  if (p == MAP_FAILED) {
    const int err = errno;
    ::close(fd);
    ::shm_unlink(obj.c_str());
    errno = err;
    throw_errno(Errc::out_of_memory, "mmap");
  }
  Segment s;
  s.data_ = static_cast<std::byte*>(p);
  s.size_ = size_bytes;
  s.name_ = std::string(name);
  s.fd_ = fd;
  return s;
}

Segment Segment::open(std::string_view name) {
  const std::string obj = shm_object_name(name);
  int fd = ::shm_open(obj.c_str(), O_RDWR, 0600);
  if (fd < 0) throw_errno(Errc::io, "shm_open " + obj);
  struct stat st{};
  if (::fstat(fd, &st) != 0) {
    ::close(fd);
    throw_errno(Errc::io, "fstat");
  }
  const auto size = static_cast<std::uint64_t>(st.st_size);
  void* p = ::mmap(nullptr, size, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
  if (p == MAP_FAILED) {
    ::close(fd);
    throw_errno(Errc::io, "mmap");
  }
  Segment s;
  s.data_ = static_cast<std::byte*>(p);
  s.size_ = size;
  s.name_ = std::string(name);
  s.fd_ = fd;
  return s;
}

void Segment::unlink() {
  if (!name_.empty()) ::shm_unlink(shm_object_name(name_).c_str());
  unlink_on_close_ = false;
}

// ---------------------------------------------------------------------------
// Layout

namespace {

std::uint64_t metadata_bytes(const LayoutParams& p, std::uint64_t n) {
  std::uint64_t off = page_round_up(sizeof(SegmentHeader));
  off += page_round_up(sizeof(ArenaBlock) * p.max_arenas);
  off += page_round_up(sizeof(ChannelBlock) * p.max_channels);
  off += page_round_up(sizeof(RecordMeta) * n);
  off += page_round_up(sizeof(ClaimEntry) * n) * 2;
  return off;
}

}  // namespace

std::uint64_t SegmentLayout::required_bytes(const LayoutParams& params,
                                            std::uint32_t record_count) {
  return metadata_bytes(params, record_count) + params.record_size * record_count;
}

SegmentLayout SegmentLayout::compute(std::uint64_t segment_bytes, const LayoutParams& params) {
  if (params.record_size == 0 || params.record_size % kPageSize != 0) {
    throw Error(Errc::alignment, "record size " + std::to_string(params.record_size) +
                                     " is not page aligned");
  }
  if (params.max_arenas == 0 || params.max_channels == 0) {
    throw Error(Errc::invalid_argument, "layout needs at least one arena and one channel slot");
  }
  const std::uint64_t fixed = metadata_bytes(params, 0);
  if (segment_bytes <= fixed) throw Error(Errc::segment_exhausted, "segment too small for layout");
  const std::uint64_t per = params.record_size + sizeof(RecordMeta) + 2 * sizeof(ClaimEntry);
  std::uint64_t n = (segment_bytes - fixed) / per;
  while (n > 0 && required_bytes(params, static_cast<std::uint32_t>(n)) > segment_bytes) --n;
  if (n == 0) throw Error(Errc::segment_exhausted, "segment holds no records");
  if (n > 0x7fffffffULL) throw Error(Errc::invalid_argument, "too many records");

  SegmentLayout l;
  l.params = params;
  l.record_count = static_cast<std::uint32_t>(n);
  std::uint64_t off = page_round_up(sizeof(SegmentHeader));
  l.arenas_offset = off;
  off += page_round_up(sizeof(ArenaBlock) * params.max_arenas);
  l.channels_offset = off;
  off += page_round_up(sizeof(ChannelBlock) * params.max_channels);
  l.records_offset = off;
  off += page_round_up(sizeof(RecordMeta) * n);
  l.claims_offset = off;
  off += page_round_up(sizeof(ClaimEntry) * n);
  l.returns_offset = off;
  off += page_round_up(sizeof(ClaimEntry) * n);
  l.data_offset = off;
  l.total_bytes = off + params.record_size * n;
  return l;
}

SharedState::SharedState(std::byte* base) : base_(base) {
  header_ = reinterpret_cast<SegmentHeader*>(base);
  if (header_->magic != kSegmentMagic || header_->version != kLayoutVersion) {
    throw Error(Errc::protocol, "segment is not formatted");
  }
  records_ = reinterpret_cast<RecordMeta*>(base + header_->records_offset);
  claims_ = reinterpret_cast<ClaimEntry*>(base + header_->claims_offset);
  returns_ = reinterpret_cast<ClaimEntry*>(base + header_->returns_offset);
  arenas_ = reinterpret_cast<ArenaBlock*>(base + header_->arenas_offset);
  channels_ = reinterpret_cast<ChannelBlock*>(base + header_->channels_offset);
}

SharedState SharedState::format(std::byte* base, std::uint64_t segment_bytes,
                                const LayoutParams& params) {
  const SegmentLayout l = SegmentLayout::compute(segment_bytes, params);
  auto* h = reinterpret_cast<SegmentHeader*>(base);
  h->version = kLayoutVersion;
  h->page_size = static_cast<std::uint32_t>(kPageSize);
  h->record_size = params.record_size;
  h->record_count = l.record_count;
  h->max_arenas = params.max_arenas;
  h->max_channels = params.max_channels;
  h->broker_count = 1;
  h->records_offset = l.records_offset;
  h->claims_offset = l.claims_offset;
  h->returns_offset = l.returns_offset;
  h->arenas_offset = l.arenas_offset;
  h->channels_offset = l.channels_offset;
  h->data_offset = l.data_offset;
  h->total_bytes = l.total_bytes;

  auto* records = reinterpret_cast<RecordMeta*>(base + l.records_offset);
  for (std::uint32_t i = 0; i < l.record_count; ++i) {
    RecordMeta* r = std::construct_at(records + i);
    r->arena.store(kNoArena, std::memory_order_relaxed);
    r->owner_pipe.store(kNoPipe, std::memory_order_relaxed);
    r->next.store(kNoRecord, std::memory_order_relaxed);
  }
  auto* arenas = reinterpret_cast<ArenaBlock*>(base + l.arenas_offset);
  for (std::uint32_t i = 0; i < params.max_arenas; ++i) std::construct_at(arenas + i);
  auto* channels = reinterpret_cast<ChannelBlock*>(base + l.channels_offset);
  for (std::uint32_t i = 0; i < params.max_channels; ++i) {
    ChannelBlock* c = std::construct_at(channels + i);
    c->id = i;
    for (PipeBlock& pb : c->pipes) {
      pb.local_record = kNoRecord;
      pb.arena = kNoArena;
      pb.ring_first = kNoRecord;
      pb.write_record.store(kNoRecord, std::memory_order_relaxed);
      pb.tail_record.store(kNoRecord, std::memory_order_relaxed);
      pb.reclaim_record.store(kNoRecord, std::memory_order_relaxed);
      pb.head_record.store(kNoRecord, std::memory_order_relaxed);
    }
  }
  std::atomic_thread_fence(std::memory_order_release);
  h->magic = kSegmentMagic;
  return SharedState(base);
}

// ---------------------------------------------------------------------------
// Permissions

PermissionSet PermissionMap::get(Principal who, RecordId record) const {
  if (!state_->valid_record(record)) throw Error(Errc::unknown_record, std::to_string(record));
  const RecordMeta& r = state_->record(record);
  PermissionSet s;
  if (who == kNoPrincipal) return s;
  s.read = r.reader.load(std::memory_order_acquire) == who;
  s.write = r.writer.load(std::memory_order_acquire) == who;
  return s;
}

void PermissionMap::grant(Principal who, RecordId record, AccessKind kind) const {
  if (!state_->valid_record(record)) throw Error(Errc::unknown_record, std::to_string(record));
  RecordMeta& r = state_->record(record);
  (kind == AccessKind::Read ? r.reader : r.writer).store(who, std::memory_order_release);
}

void PermissionMap::revoke(Principal who, std::span<const RecordId> records,
                           AccessKind kind) const {
  for (RecordId id : records) {
    if (!state_->valid_record(id)) throw Error(Errc::unknown_record, std::to_string(id));
    RecordMeta& r = state_->record(id);
    auto& slot = kind == AccessKind::Read ? r.reader : r.writer;
    std::uint32_t expected = who;
    slot.compare_exchange_strong(expected, kNoPrincipal, std::memory_order_acq_rel);
  }
}

void PermissionMap::clear(RecordId record) const {
  RecordMeta& r = state_->record(record);
  r.reader.store(kNoPrincipal, std::memory_order_release);
  r.writer.store(kNoPrincipal, std::memory_order_release);
}

AccessResult check_access(const PermissionMap& pmap, Principal who, RecordId record,
                          AccessKind kind) {
  const SharedState& st = pmap.state();
  if (!st.valid_record(record)) throw Error(Errc::unknown_record, std::to_string(record));
  const RecordMeta& r = st.record(record);
  const auto& slot = kind == AccessKind::Read ? r.reader : r.writer;
  if (who != kNoPrincipal && slot.load(std::memory_order_acquire) == who) return Allowed{};
  counters().faults_raised.fetch_add(1, std::memory_order_relaxed);
  return FaultEvent{who, record, kind, monotonic_ns()};
}

std::uint64_t monotonic_ns() {
  return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                        std::chrono::steady_clock::now().time_since_epoch())
                                        .count());
}

Counters& counters() {
  static Counters c;
  return c;
}

}  // namespace hetnet

#pragma once

// Event trace: the ordered list of observable world events of one run.
//
// File layout, all integers big-endian:
//   "CPASTRC1"  u32 version  u64 seed  u32 n  n octets scenario JSON
//   u64 count   count x (i64 time, u8 kind, u32 node, u32 a, u32 b)
//   "END!"      u64 FNV-1a-64 of every preceding octet

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cpas/common.hpp"

namespace cpas::sim {

enum class TraceKind : std::uint8_t {
  PowerOn = 1,
  PowerOff = 2,
  ModemBooted = 3,
  Connected = 4,        // a = 1 ok / 0 failed
  FrameSent = 5,        // a = type, b = seq
  FrameSendFailed = 6,  // a = type, b = seq
  HmiReceived = 7,      // a = type, b = seq
  TeReceived = 8,       // a = type, b = seq
  SmsSubmitted = 9,     // a = id, b = 1 if lost
  SmsDelivered = 10,    // a = id
  Phase = 11,           // a = terminal::Phase
  SessionState = 12,    // a = 0 online / 1 offline
  AlarmPublished = 13,  // a = event id, b = frame seq
  Sensor = 14,          // a = zone, b = alarm type
  ModemIdleDrop = 15,
  ModemLinkFailed = 16,
  Reconnect = 17,
  IgnitionToggle = 18,
  OperatorRequest = 19,  // a = request id, b = 0 control / 1 status
  RequestDone = 20,      // a = request id, b = hmi::RequestStatus
  BurstStarted = 21,     // a = count
  BurstEnded = 22,
};

struct TraceRecord {
  Millis time = 0;
  TraceKind kind = TraceKind::PowerOn;
  std::uint32_t node = 0;
  std::uint32_t a = 0;
  std::uint32_t b = 0;

  bool operator==(const TraceRecord&) const = default;
};

inline constexpr std::string_view kTraceMagic = "CPASTRC1";
inline constexpr std::string_view kTraceTrailer = "END!";
inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr std::size_t kTraceRecordSize = 8 + 1 + 4 + 4 + 4;

class TraceParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergedTrace : public std::runtime_error {
 public:
  DivergedTrace(std::size_t index, std::string detail)
      : std::runtime_error("replay diverged at record " + std::to_string(index) + ": " + detail), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

struct TraceFile {
  std::uint64_t seed = 0;
  std::string scenario_json;
  std::vector<TraceRecord> records;
};

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

namespace detail {

inline void put_be(std::vector<std::uint8_t>& out, std::uint64_t v, int octets) {
  for (int i = octets - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Cursor {
 public:
  Cursor(const std::vector<std::uint8_t>& buf, std::size_t end) : buf_(buf), end_(end) {}

  std::uint64_t be(int octets, const char* what) {
    need(static_cast<std::size_t>(octets), what);
    std::uint64_t v = 0;
    for (int i = 0; i < octets; ++i) v = (v << 8) | buf_[pos_++];
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  std::size_t pos() const noexcept { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (end_ - pos_ < n) throw TraceParseError(std::string("trace truncated while reading ") + what);
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_trace(const TraceFile& t) {
  std::vector<std::uint8_t> out(kTraceMagic.begin(), kTraceMagic.end());
  detail::put_be(out, kTraceVersion, 4);
  detail::put_be(out, t.seed, 8);
  detail::put_be(out, t.scenario_json.size(), 4);
  out.insert(out.end(), t.scenario_json.begin(), t.scenario_json.end());
  detail::put_be(out, t.records.size(), 8);
  out.reserve(out.size() + t.records.size() * kTraceRecordSize + 12);
  for (const auto& r : t.records) {
    detail::put_be(out, static_cast<std::uint64_t>(r.time), 8);
    out.push_back(static_cast<std::uint8_t>(r.kind));
    detail::put_be(out, r.node, 4);
    detail::put_be(out, r.a, 4);
    detail::put_be(out, r.b, 4);
  }
  out.insert(out.end(), kTraceTrailer.begin(), kTraceTrailer.end());
  detail::put_be(out, fnv1a64(out.data(), out.size()), 8);
  return out;
}

inline TraceFile decode_trace(const std::vector<std::uint8_t>& buf) {
  constexpr std::size_t kTail = kTraceTrailer.size() + 8;
  if (buf.size() < kTraceMagic.size() || !std::equal(kTraceMagic.begin(), kTraceMagic.end(), buf.begin()))
    throw TraceParseError("not a cpas trace (bad magic)");
  if (buf.size() < kTraceMagic.size() + 24 + kTail) throw TraceParseError("trace truncated");
  const std::size_t body_end = buf.size() - kTail;
  if (!std::equal(kTraceTrailer.begin(), kTraceTrailer.end(), buf.begin() + static_cast<std::ptrdiff_t>(body_end)))
    throw TraceParseError("trace truncated (missing trailer)");
  std::uint64_t stored = 0;
  for (std::size_t i = buf.size() - 8; i < buf.size(); ++i) stored = (stored << 8) | buf[i];
  if (stored != fnv1a64(buf.data(), buf.size() - 8)) throw TraceParseError("trace checksum mismatch");

  detail::Cursor c(buf, body_end);
  c.bytes(kTraceMagic.size(), "magic");
  const auto version = c.be(4, "version");
  if (version != kTraceVersion) throw TraceParseError("unsupported trace version " + std::to_string(version));
  TraceFile t;
  t.seed = c.be(8, "seed");
  const auto n = static_cast<std::size_t>(c.be(4, "scenario length"));
  t.scenario_json = c.bytes(n, "scenario");
  const auto count = c.be(8, "record count");
  if (count > (body_end - c.pos()) / kTraceRecordSize) throw TraceParseError("trace truncated (record count)");
  t.records.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    TraceRecord r;
    r.time = static_cast<Millis>(c.be(8, "record"));
    const auto kind = c.be(1, "record");
    if (kind < 1 || kind > static_cast<std::uint8_t>(TraceKind::BurstEnded))
      throw TraceParseError("unknown trace record kind " + std::to_string(kind));
    r.kind = static_cast<TraceKind>(kind);
    r.node = static_cast<std::uint32_t>(c.be(4, "record"));
    r.a = static_cast<std::uint32_t>(c.be(4, "record"));
    r.b = static_cast<std::uint32_t>(c.be(4, "record"));
    t.records.push_back(r);
  }
  if (c.pos() != body_end) throw TraceParseError("trailing octets after records");
  return t;
}

inline void write_trace_file(const std::string& path, const TraceFile& t) {
  const auto bytes = encode_trace(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline TraceFile read_trace_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TraceParseError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_trace(bytes);
}

}  // namespace cpas::sim

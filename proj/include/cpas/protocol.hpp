#pragma once

// Binary TE <-> HMI framing.
//
//   AA 55 | ver | type | te_id(4) | seq(2) | len(2) | payload(len) | crc(2)
//
// All integers big-endian. The CRC is CRC-16/CCITT-FALSE over ver..payload.
// See docs/protocol.md for the message table.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cpas/common.hpp"

namespace cpas::protocol {

inline constexpr std::uint8_t kSync0 = 0xAA;
inline constexpr std::uint8_t kSync1 = 0x55;
inline constexpr std::uint8_t kVersion = 0x01;
inline constexpr std::size_t kHeaderSize = 12;
inline constexpr std::size_t kCrcSize = 2;
inline constexpr std::size_t kMaxPayload = 1024;

constexpr std::uint16_t crc16(std::span<const std::uint8_t> data) noexcept {
  std::uint16_t crc = 0xFFFF;
  for (std::uint8_t byte : data) {
    crc ^= static_cast<std::uint16_t>(byte) << 8;
    for (int i = 0; i < 8; ++i) {
      crc = (crc & 0x8000) ? static_cast<std::uint16_t>((crc << 1) ^ 0x1021)
                           : static_cast<std::uint16_t>(crc << 1);
    }
  }
  return crc;
}

inline std::uint16_t crc16(std::string_view text) noexcept {
  return crc16(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

enum class MsgType : std::uint8_t {
  Register = 0x01,
  RegisterAck = 0x02,
  Heartbeat = 0x03,
  HeartbeatAck = 0x04,
  Alarm = 0x05,
  AlarmAck = 0x06,
  Control = 0x07,
  ControlAck = 0x08,
  StatusQuery = 0x09,
  StatusReport = 0x0A,
};

enum class AlarmType : std::uint8_t { IR = 0x01, Smoke = 0x02, Temperature = 0x03 };

constexpr bool is_valid_alarm_type(std::uint8_t code) noexcept { return code >= 0x01 && code <= 0x03; }

// Control command octet. Kept as a raw code so that a TE can answer unknown
// commands with CONTROL_ACK(0xFF) instead of failing to decode.
struct ControlCmd {
  static constexpr std::uint8_t kArm = 0x01;
  static constexpr std::uint8_t kDisarm = 0x02;
  static constexpr std::uint8_t kSirenOn = 0x03;
  static constexpr std::uint8_t kSirenOff = 0x04;
  static constexpr std::uint8_t kReboot = 0x05;

  std::uint8_t code = 0;

  bool operator==(const ControlCmd&) const = default;
};

inline constexpr std::uint8_t kControlOk = 0x00;
inline constexpr std::uint8_t kControlUnknown = 0xFF;

std::optional<ControlCmd> control_from_name(std::string_view name);
std::string control_name(ControlCmd cmd);

// bit0 armed, bit1 alarm active, bits4..7 battery level; bits 2-3 reserved zero.
struct StatusByte {
  bool armed = false;
  bool alarm_active = false;
  std::uint8_t battery = 0;  // 0..15

  constexpr std::uint8_t to_octet() const noexcept {
    return static_cast<std::uint8_t>((armed ? 0x01 : 0) | (alarm_active ? 0x02 : 0) |
                                     ((battery & 0x0F) << 4));
  }
  static constexpr std::optional<StatusByte> from_octet(std::uint8_t v) noexcept {
    if (v & 0x0C) return std::nullopt;
    return StatusByte{(v & 0x01) != 0, (v & 0x02) != 0, static_cast<std::uint8_t>(v >> 4)};
  }

  bool operator==(const StatusByte&) const = default;
};

namespace msg {
struct Register {
  std::uint8_t fw_version = 0;
  std::uint8_t zone_count = 0;
  bool operator==(const Register&) const = default;
};
struct RegisterAck {
  bool operator==(const RegisterAck&) const = default;
};
struct Heartbeat {
  StatusByte status;
  bool operator==(const Heartbeat&) const = default;
};
struct HeartbeatAck {
  bool operator==(const HeartbeatAck&) const = default;
};
struct Alarm {
  std::uint8_t zone = 0;
  AlarmType alarm_type = AlarmType::IR;
  std::uint32_t ts = 0;
  bool operator==(const Alarm&) const = default;
};
struct AlarmAck {
  bool operator==(const AlarmAck&) const = default;
};
struct Control {
  ControlCmd cmd;
  bool operator==(const Control&) const = default;
};
struct ControlAck {
  std::uint8_t result = kControlOk;
  bool operator==(const ControlAck&) const = default;
};
struct StatusQuery {
  bool operator==(const StatusQuery&) const = default;
};
struct StatusReport {
  StatusByte status;
  std::uint32_t uptime_s = 0;
  bool operator==(const StatusReport&) const = default;
};
}  // namespace msg

// Variant index + 1 == msg_type octet.
using Message = std::variant<msg::Register, msg::RegisterAck, msg::Heartbeat, msg::HeartbeatAck,
                             msg::Alarm, msg::AlarmAck, msg::Control, msg::ControlAck,
                             msg::StatusQuery, msg::StatusReport>;

inline MsgType type_of(const Message& m) noexcept {
  return static_cast<MsgType>(m.index() + 1);
}

std::string_view type_name(MsgType t) noexcept;

// Fixed payload size per known type, nullopt for unknown codes.
constexpr std::optional<std::size_t> payload_size(std::uint8_t type) noexcept {
  switch (type) {
    case 0x01: return 2;
    case 0x03: return 1;
    case 0x05: return 6;
    case 0x07: return 1;
    case 0x08: return 1;
    case 0x0A: return 5;
    case 0x02:
    case 0x04:
    case 0x06:
    case 0x09: return 0;
    default: return std::nullopt;
  }
}

class PayloadTooLarge : public std::length_error {
 public:
  explicit PayloadTooLarge(std::size_t size)
      : std::length_error("payload of " + std::to_string(size) + " octets exceeds " +
                          std::to_string(kMaxPayload)) {}
};

struct Frame {
  TeId te_id = 0;
  std::uint16_t seq = 0;
  Message message;

  bool operator==(const Frame&) const = default;
};

namespace detail {
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}
inline std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>((p[0] << 8) | p[1]);
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;
}  // namespace detail

using detail::overloaded;

inline std::vector<std::uint8_t> encode_payload(const Message& m) {
  std::vector<std::uint8_t> out;
  std::visit(overloaded{
                 [&](const msg::Register& r) {
                   out.push_back(r.fw_version);
                   out.push_back(r.zone_count);
                 },
                 [&](const msg::Heartbeat& h) { out.push_back(h.status.to_octet()); },
                 [&](const msg::Alarm& a) {
                   out.push_back(a.zone);
                   out.push_back(static_cast<std::uint8_t>(a.alarm_type));
                   detail::put_u32(out, a.ts);
                 },
                 [&](const msg::Control& c) { out.push_back(c.cmd.code); },
                 [&](const msg::ControlAck& c) { out.push_back(c.result); },
                 [&](const msg::StatusReport& s) {
                   out.push_back(s.status.to_octet());
                   detail::put_u32(out, s.uptime_s);
                 },
                 [](const auto&) {},
             },
             m);
  return out;
}

// Lower-level encoder; the only path that can see an oversized payload.
inline std::vector<std::uint8_t> encode_raw_frame(std::uint8_t msg_type, TeId te_id,
                                                  std::uint16_t seq,
                                                  std::span<const std::uint8_t> payload) {
  if (payload.size() > kMaxPayload) throw PayloadTooLarge(payload.size());
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + payload.size() + kCrcSize);
  out.push_back(kSync0);
  out.push_back(kSync1);
  out.push_back(kVersion);
  out.push_back(msg_type);
  detail::put_u32(out, te_id);
  detail::put_u16(out, seq);
  detail::put_u16(out, static_cast<std::uint16_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  detail::put_u16(out, crc16(std::span(out).subspan(2)));
  return out;
}

inline std::vector<std::uint8_t> encode_frame(const Message& m, TeId te_id, std::uint16_t seq) {
  const auto payload = encode_payload(m);
  return encode_raw_frame(static_cast<std::uint8_t>(type_of(m)), te_id, seq, payload);
}

inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
  return encode_frame(f.message, f.te_id, f.seq);
}

enum class DecodeStatus {
  Ok,
  NeedMore,     // incomplete; `consumed` covers only garbage before the sync candidate
  BadCrc,       // candidate discarded, scan continues after its first sync octet
  BadHeader,    // bad version or length for a known type; skipped like BadCrc
  UnknownType,  // unassigned msg_type octet; skipped like BadCrc
  BadPayload,   // CRC-valid frame whose payload violates a field invariant
};

std::string_view status_name(DecodeStatus s) noexcept;

struct DecodeResult {
  DecodeStatus status = DecodeStatus::NeedMore;
  std::size_t consumed = 0;
  std::optional<Frame> frame;  // set iff status == Ok
};

inline std::optional<Message> decode_payload(std::uint8_t type, std::span<const std::uint8_t> p) {
  switch (static_cast<MsgType>(type)) {
    case MsgType::Register: return msg::Register{p[0], p[1]};
    case MsgType::RegisterAck: return msg::RegisterAck{};
    case MsgType::Heartbeat: {
      auto s = StatusByte::from_octet(p[0]);
      if (!s) return std::nullopt;
      return msg::Heartbeat{*s};
    }
    case MsgType::HeartbeatAck: return msg::HeartbeatAck{};
    case MsgType::Alarm:
      if (!is_valid_alarm_type(p[1])) return std::nullopt;
      return msg::Alarm{p[0], static_cast<AlarmType>(p[1]), detail::get_u32(&p[2])};
    case MsgType::AlarmAck: return msg::AlarmAck{};
    case MsgType::Control: return msg::Control{ControlCmd{p[0]}};
    case MsgType::ControlAck: return msg::ControlAck{p[0]};
    case MsgType::StatusQuery: return msg::StatusQuery{};
    case MsgType::StatusReport: {
      auto s = StatusByte::from_octet(p[0]);
      if (!s) return std::nullopt;
      return msg::StatusReport{*s, detail::get_u32(&p[1])};
    }
  }
  return std::nullopt;
}

// Decodes at most one frame from the front of a streaming buffer. The caller
// drops `consumed` octets and calls again; see FrameReader.
inline DecodeResult decode_frame(std::span<const std::uint8_t> buf) {
  std::size_t pos = 0;
  while (pos < buf.size()) {
    if (buf[pos] != kSync0) {
      ++pos;
      continue;
    }
    if (pos + 1 >= buf.size()) return {DecodeStatus::NeedMore, pos, std::nullopt};
    if (buf[pos + 1] != kSync1) {
      ++pos;
      continue;
    }
    const std::size_t avail = buf.size() - pos;
    if (avail >= 3 && buf[pos + 2] != kVersion) return {DecodeStatus::BadHeader, pos + 1, std::nullopt};
    // An unassigned type is rejected before its length is trusted: waiting
    // for a garbage length of up to 1 KiB would stall a real frame behind it.
    if (avail >= 4 && !payload_size(buf[pos + 3])) return {DecodeStatus::UnknownType, pos + 1, std::nullopt};
    if (avail < kHeaderSize) return {DecodeStatus::NeedMore, pos, std::nullopt};

    const std::uint8_t type = buf[pos + 3];
    const std::size_t len = detail::get_u16(&buf[pos + 10]);
    const auto expected = payload_size(type);
    if (len > kMaxPayload || *expected != len) return {DecodeStatus::BadHeader, pos + 1, std::nullopt};
    const std::size_t total = kHeaderSize + len + kCrcSize;
    if (avail < total) return {DecodeStatus::NeedMore, pos, std::nullopt};

    const auto body = buf.subspan(pos + 2, kHeaderSize - 2 + len);
    const std::uint16_t got = detail::get_u16(&buf[pos + kHeaderSize + len]);
    if (crc16(body) != got) return {DecodeStatus::BadCrc, pos + 1, std::nullopt};

    auto message = decode_payload(type, buf.subspan(pos + kHeaderSize, len));
    if (!message) return {DecodeStatus::BadPayload, pos + total, std::nullopt};
    Frame frame{detail::get_u32(&buf[pos + 4]), detail::get_u16(&buf[pos + 8]), std::move(*message)};
    return {DecodeStatus::Ok, pos + total, std::move(frame)};
  }
  return {DecodeStatus::NeedMore, pos, std::nullopt};
}

// Accumulating stream decoder for one byte stream (one TCP connection).
class FrameReader {
 public:
  void feed(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

  // Next complete frame, or nullopt when more input is needed.
  std::optional<Frame> next() {
    while (true) {
      auto r = decode_frame(buf_);
      buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(r.consumed));
      switch (r.status) {
        case DecodeStatus::Ok: return std::move(r.frame);
        case DecodeStatus::NeedMore: return std::nullopt;
        case DecodeStatus::BadCrc: ++crc_errors_; break;
        default: ++other_errors_; break;
      }
    }
  }

  std::size_t buffered() const noexcept { return buf_.size(); }
  std::size_t crc_errors() const noexcept { return crc_errors_; }
  std::size_t other_errors() const noexcept { return other_errors_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t crc_errors_ = 0;
  std::size_t other_errors_ = 0;
};

inline std::string_view type_name(MsgType t) noexcept {
  switch (t) {
    case MsgType::Register: return "REGISTER";
    case MsgType::RegisterAck: return "REGISTER_ACK";
    case MsgType::Heartbeat: return "HEARTBEAT";
    case MsgType::HeartbeatAck: return "HEARTBEAT_ACK";
    case MsgType::Alarm: return "ALARM";
    case MsgType::AlarmAck: return "ALARM_ACK";
    case MsgType::Control: return "CONTROL";
    case MsgType::ControlAck: return "CONTROL_ACK";
    case MsgType::StatusQuery: return "STATUS_QUERY";
    case MsgType::StatusReport: return "STATUS_REPORT";
  }
  return "?";
}

inline std::string_view status_name(DecodeStatus s) noexcept {
  switch (s) {
    case DecodeStatus::Ok: return "Ok";
    case DecodeStatus::NeedMore: return "NeedMore";
    case DecodeStatus::BadCrc: return "BadCrc";
    case DecodeStatus::BadHeader: return "BadHeader";
    case DecodeStatus::UnknownType: return "UnknownType";
    case DecodeStatus::BadPayload: return "BadPayload";
  }
  return "?";
}

inline std::optional<ControlCmd> control_from_name(std::string_view name) {
  if (name == "arm") return ControlCmd{ControlCmd::kArm};
  if (name == "disarm") return ControlCmd{ControlCmd::kDisarm};
  if (name == "siren_on") return ControlCmd{ControlCmd::kSirenOn};
  if (name == "siren_off") return ControlCmd{ControlCmd::kSirenOff};
  if (name == "reboot") return ControlCmd{ControlCmd::kReboot};
  return std::nullopt;
}

inline std::string control_name(ControlCmd cmd) {
  switch (cmd.code) {
    case ControlCmd::kArm: return "arm";
    case ControlCmd::kDisarm: return "disarm";
    case ControlCmd::kSirenOn: return "siren_on";
    case ControlCmd::kSirenOff: return "siren_off";
    case ControlCmd::kReboot: return "reboot";
  }
  static constexpr char kDigits[] = "0123456789ABCDEF";
  return std::string("0x") + kDigits[cmd.code >> 4] + kDigits[cmd.code & 0x0F];
}

inline std::string_view alarm_type_name(AlarmType t) noexcept {
  switch (t) {
    case AlarmType::IR: return "IR";
    case AlarmType::Smoke: return "SMOKE";
    case AlarmType::Temperature: return "TEMP";
  }
  return "?";
}

inline std::optional<AlarmType> alarm_type_from_name(std::string_view s) noexcept {
  if (s == "IR") return AlarmType::IR;
  if (s == "SMOKE") return AlarmType::Smoke;
  if (s == "TEMP" || s == "TEMPERATURE") return AlarmType::Temperature;
  return std::nullopt;
}

inline std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789ABCDEF";
  std::string out;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (i) out.push_back(' ');
    out.push_back(kDigits[bytes[i] >> 4]);
    out.push_back(kDigits[bytes[i] & 0x0F]);
  }
  return out;
}

inline std::vector<std::uint8_t> from_hex(std::string_view text) {
  std::vector<std::uint8_t> out;
  int hi = -1;
  for (char c : text) {
    int v;
    if (c >= '0' && c <= '9') v = c - '0';
    else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
    else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
    else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') continue;
    else throw std::invalid_argument("bad hex character");
    if (hi < 0) {
      hi = v;
    } else {
      out.push_back(static_cast<std::uint8_t>((hi << 4) | v));
      hi = -1;
    }
  }
  if (hi >= 0) throw std::invalid_argument("odd number of hex digits");
  return out;
}

}  // namespace cpas::protocol

#pragma once

// SMS text grammar between a TE and its user. Case-sensitive ASCII, at most
// 160 characters:
//
//   commands  ARM | DISARM | STATUS
//   replies   OK ARMED | OK DISARMED | STATUS <ARMED|DISARMED> BAT <0-15>
//   alert     ALARM ZONE <z> TYPE <IR|SMOKE|TEMP> AT <unix-seconds>

#include <charconv>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "cpas/common.hpp"
#include "cpas/protocol.hpp"

namespace cpas::sms {

inline constexpr std::size_t kMaxSmsLength = 160;

enum class UserCommand { Arm, Disarm, Status };

struct ArmReply {
  bool armed = false;
  bool operator==(const ArmReply&) const = default;
};

struct StatusReply {
  bool armed = false;
  std::uint8_t battery = 0;
  bool operator==(const StatusReply&) const = default;
};

struct AlertText {
  std::uint8_t zone = 0;
  protocol::AlarmType alarm_type = protocol::AlarmType::IR;
  std::uint32_t ts = 0;
  bool operator==(const AlertText&) const = default;
};

using SmsBody = std::variant<UserCommand, ArmReply, StatusReply, AlertText>;

struct ParseError {
  std::string reason;
};

inline bool is_sms_text(std::string_view text) noexcept {
  if (text.size() > kMaxSmsLength) return false;
  for (unsigned char c : text) {
    if (c < 0x20 || c > 0x7E) return false;
  }
  return true;
}

inline std::string render_sms(const SmsBody& body) {
  return std::visit(
      protocol::overloaded{
          [](UserCommand c) -> std::string {
            switch (c) {
              case UserCommand::Arm: return "ARM";
              case UserCommand::Disarm: return "DISARM";
              case UserCommand::Status: return "STATUS";
            }
            return {};
          },
          [](const ArmReply& r) -> std::string { return r.armed ? "OK ARMED" : "OK DISARMED"; },
          [](const StatusReply& r) -> std::string {
            return std::string("STATUS ") + (r.armed ? "ARMED" : "DISARMED") + " BAT " +
                   std::to_string(r.battery);
          },
          [](const AlertText& a) -> std::string {
            return "ALARM ZONE " + std::to_string(a.zone) + " TYPE " +
                   std::string(protocol::alarm_type_name(a.alarm_type)) + " AT " + std::to_string(a.ts);
          },
      },
      body);
}

namespace detail {

inline std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find(' ', start);
    words.push_back(text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return words;
}

// Canonical decimal: digits only, no leading zeros, within max.
template <typename T>
std::optional<T> parse_decimal(std::string_view s, std::uint64_t max) {
  if (s.empty() || (s.size() > 1 && s[0] == '0')) return std::nullopt;
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || v > max) return std::nullopt;
  return static_cast<T>(v);
}

}  // namespace detail

inline Expected<SmsBody, ParseError> parse_sms_text(std::string_view text) {
  if (!is_sms_text(text)) return ParseError{"not a printable ASCII SMS of at most 160 characters"};
  if (text == "ARM") return SmsBody{UserCommand::Arm};
  if (text == "DISARM") return SmsBody{UserCommand::Disarm};
  if (text == "STATUS") return SmsBody{UserCommand::Status};
  if (text == "OK ARMED") return SmsBody{ArmReply{true}};
  if (text == "OK DISARMED") return SmsBody{ArmReply{false}};

  const auto w = detail::split_words(text);
  if (w.size() == 4 && w[0] == "STATUS" && w[2] == "BAT" && (w[1] == "ARMED" || w[1] == "DISARMED")) {
    if (auto bat = detail::parse_decimal<std::uint8_t>(w[3], 15)) {
      return SmsBody{StatusReply{w[1] == "ARMED", *bat}};
    }
  }
  if (w.size() == 7 && w[0] == "ALARM" && w[1] == "ZONE" && w[3] == "TYPE" && w[5] == "AT") {
    auto zone = detail::parse_decimal<std::uint8_t>(w[2], 255);
    auto ts = detail::parse_decimal<std::uint32_t>(w[6], 0xFFFFFFFFull);
    std::optional<protocol::AlarmType> type;
    if (w[4] == "IR" || w[4] == "SMOKE" || w[4] == "TEMP") type = protocol::alarm_type_from_name(w[4]);
    if (zone && ts && type) return SmsBody{AlertText{*zone, *type, *ts}};
  }
  return ParseError{"unrecognized SMS text"};
}

// The TE-side parser: only user commands are accepted.
inline Expected<UserCommand, ParseError> parse_sms(std::string_view text) {
  auto body = parse_sms_text(text);
  if (!body) return body.error();
  if (const auto* cmd = std::get_if<UserCommand>(&*body)) return *cmd;
  return ParseError{"not a user command"};
}

}  // namespace cpas::sms

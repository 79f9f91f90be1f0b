#pragma once

// Emulated GPRS module (MC55-like): supply and ignition timing, the AT dialog
// up to an open TCP socket, serialization delay on the uplink, the idle
// abnormal disconnect and restart-by-ignition-toggle.
//
//   Off -(power, IGT low >= 10 ms later, held > 100 ms, released)-> Booting
//   Booting -(boot_duration)-> SimReady -(AT, AT+CREG?)-> NetRegistered
//   NetRegistered -(AT+CGATT=1)-> GprsAttached -(AT+CIPSTART)-> TcpOpen
//   TcpOpen -(idle timeout | link failure)-> TcpClosedAbnormal
//   TcpClosedAbnormal -(IGT toggle)-> Booting
//   any -(power loss)-> Off

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cpas/common.hpp"

namespace cpas::modem {

enum class ModemState { Off, Booting, SimReady, NetRegistered, GprsAttached, TcpOpen, TcpClosedAbnormal };

inline std::string_view state_name(ModemState s) noexcept {
  switch (s) {
    case ModemState::Off: return "Off";
    case ModemState::Booting: return "Booting";
    case ModemState::SimReady: return "SimReady";
    case ModemState::NetRegistered: return "NetRegistered";
    case ModemState::GprsAttached: return "GprsAttached";
    case ModemState::TcpOpen: return "TcpOpen";
    case ModemState::TcpClosedAbnormal: return "TcpClosedAbnormal";
  }
  return "?";
}

inline constexpr Millis kMinPowerToIgnitionMs = 10;
inline constexpr Millis kMinIgnitionLowMs = 100;  // exclusive: hold must exceed this

struct ModemConfig {
  std::int64_t idle_timeout_s = 300;
  Millis boot_duration_ms = 2000;
  std::int64_t watchdog_toggle_period_s = 600;
  std::int64_t bandwidth_bps = 25000;

  void validate() const {
    if (idle_timeout_s <= 60) throw std::invalid_argument("modem.idle_timeout_s must exceed 60");
    if (bandwidth_bps < 20000 || bandwidth_bps > 171200)
      throw std::invalid_argument("modem.bandwidth_bps must lie in [20000, 171200]");
    if (boot_duration_ms < 0) throw std::invalid_argument("modem.boot_duration_ms must be >= 0");
    if (watchdog_toggle_period_s <= 0) throw std::invalid_argument("modem.watchdog_toggle_period_s must be > 0");
  }
};

enum class PinEvent { PowerOn, PowerOff, IgnitionLow, IgnitionHigh };

struct IgnitionTrace {
  std::optional<Millis> power_on_at;
  std::optional<Millis> ign_low_at;
  std::optional<Millis> ign_high_at;
};

struct TimingViolation {
  std::string reason;
};

struct AtResponse {
  bool ok = false;
  std::string text;
};

class NotPowered : public std::runtime_error {
 public:
  NotPowered() : std::runtime_error("modem is not powered") {}
};

enum class SendStatus { Accepted, Failed };

struct SendResult {
  SendStatus status = SendStatus::Failed;
  Millis serialization_ms = 0;
  Millis departs_at = 0;  // when the last bit leaves the module

  bool accepted() const noexcept { return status == SendStatus::Accepted; }
};

struct NotConnected {};

enum class ModemEvent { BootCompleted, IdleDisconnected, LinkFailed };

// ceil(octets * 8 * 1000 / bps) milliseconds.
constexpr Millis serialization_delay_ms(std::size_t octets, std::int64_t bps) noexcept {
  const auto bits_ms = static_cast<std::int64_t>(octets) * 8 * 1000;
  return (bits_ms + bps - 1) / bps;
}

class Modem {
 public:
  // Link acceptance for an outbound segment. Returns false when the network
  // refuses it (congestion, outage).
  using Uplink = std::function<bool(std::span<const std::uint8_t>, Millis departs_at)>;
  // Whether a TCP connect to the HMI currently succeeds.
  using ConnectProbe = std::function<bool(std::string_view host, int port)>;

  explicit Modem(ModemConfig config = {}) : config_(config) { config_.validate(); }

  void set_uplink(Uplink uplink) { uplink_ = std::move(uplink); }
  void set_connect_probe(ConnectProbe probe) { probe_ = std::move(probe); }

  ModemState state() const noexcept { return state_; }
  const ModemConfig& config() const noexcept { return config_; }
  const IgnitionTrace& ignition_trace() const noexcept { return trace_; }
  bool powered() const noexcept { return powered_; }
  Millis last_tx() const noexcept { return last_tx_; }

  Expected<ModemState, TimingViolation> apply_pin_event(PinEvent event, Millis at) {
    check_time(at);
    switch (event) {
      case PinEvent::PowerOn:
        if (!powered_) {
          powered_ = true;
          trace_ = IgnitionTrace{at, std::nullopt, std::nullopt};
        }
        return state_;

      case PinEvent::PowerOff:
        powered_ = false;
        state_ = ModemState::Off;
        trace_ = {};
        synced_ = false;
        return state_;

      case PinEvent::IgnitionLow:
        if (!powered_) return TimingViolation{"ignition pulled low without supply"};
        if (state_ == ModemState::Off && at - *trace_.power_on_at < kMinPowerToIgnitionMs) {
          trace_.ign_low_at.reset();
          return TimingViolation{"ignition pulled low " + std::to_string(at - *trace_.power_on_at) +
                                 " ms after power-on; at least 10 ms required"};
        }
        trace_.ign_low_at = at;
        trace_.ign_high_at.reset();
        return state_;

      case PinEvent::IgnitionHigh: {
        if (!powered_ || !trace_.ign_low_at) return state_;  // line already released
        const Millis hold = at - *trace_.ign_low_at;
        trace_.ign_high_at = at;
        if (state_ == ModemState::Off) {
          if (hold <= kMinIgnitionLowMs) {
            trace_.ign_low_at.reset();
            return TimingViolation{"ignition held low " + std::to_string(hold) +
                                   " ms; more than 100 ms required"};
          }
          start_boot(at);
        } else if (state_ == ModemState::TcpClosedAbnormal && hold > kMinIgnitionLowMs) {
          start_boot(at);
        }
        trace_.ign_low_at.reset();
        return state_;
      }
    }
    return state_;
  }

  AtResponse submit_at(std::string_view cmd, Millis now) {
    check_time(now);
    return submit_at(cmd);
  }

  AtResponse submit_at(std::string_view cmd) {
    if (state_ == ModemState::Off) throw NotPowered();
    if (state_ == ModemState::Booting) return error();

    if (cmd == "AT") {
      synced_ = true;
      return ok("OK");
    }
    if (!synced_ || state_ == ModemState::TcpClosedAbnormal) return error();

    if (cmd == "AT+CREG?") {
      if (state_ == ModemState::SimReady) state_ = ModemState::NetRegistered;
      return ok("+CREG: 0,1\r\nOK");
    }
    if (cmd == "AT+CGATT=1") {
      if (state_ != ModemState::NetRegistered) return error();
      state_ = ModemState::GprsAttached;
      return ok("OK");
    }
    if (cmd == "AT+CGATT=0") {
      if (state_ != ModemState::GprsAttached) return error();
      state_ = ModemState::NetRegistered;
      return ok("OK");
    }
    if (cmd.starts_with("AT+CIPSTART=")) {
      if (state_ != ModemState::GprsAttached) return error();
      const auto args = cmd.substr(12);
      const auto comma = args.rfind(',');
      if (comma == std::string_view::npos || comma == 0) return error();
      int port = 0;
      for (char c : args.substr(comma + 1)) {
        if (c < '0' || c > '9') return error();
        port = port * 10 + (c - '0');
        if (port > 65535) return error();
      }
      if (probe_ && !probe_(args.substr(0, comma), port)) return AtResponse{false, "CONNECT FAIL"};
      state_ = ModemState::TcpOpen;
      last_tx_ = last_event_at_;
      busy_until_ = last_event_at_;
      return ok("CONNECT OK");
    }
    if (cmd == "AT+CIPCLOSE") {
      if (state_ != ModemState::TcpOpen) return error();
      state_ = ModemState::GprsAttached;
      return ok("CLOSE OK");
    }
    return error();
  }

  Expected<SendResult, NotConnected> tcp_send(std::span<const std::uint8_t> data, Millis now) {
    check_time(now);
    if (state_ != ModemState::TcpOpen) return NotConnected{};
    const Millis ser = serialization_delay_ms(data.size(), config_.bandwidth_bps);
    const Millis departs = std::max(now, busy_until_) + ser;
    const bool accepted = !uplink_ || uplink_(data, departs);
    if (!accepted) return SendResult{SendStatus::Failed, ser, departs};
    busy_until_ = departs;
    last_tx_ = now;
    return SendResult{SendStatus::Accepted, ser, departs};
  }

  std::vector<ModemEvent> tick(Millis now) {
    check_time(now);
    std::vector<ModemEvent> events;
    if (state_ == ModemState::Booting && now - boot_started_at_ >= config_.boot_duration_ms) {
      state_ = ModemState::SimReady;
      events.push_back(ModemEvent::BootCompleted);
    }
    if (state_ == ModemState::TcpOpen && now - last_tx_ >= config_.idle_timeout_s * 1000) {
      state_ = ModemState::TcpClosedAbnormal;
      events.push_back(ModemEvent::IdleDisconnected);
    }
    return events;
  }

  // Network-side teardown of the socket (carrier loss).
  std::optional<ModemEvent> inject_link_failure(Millis now) {
    check_time(now);
    if (state_ != ModemState::TcpOpen) return std::nullopt;
    state_ = ModemState::TcpClosedAbnormal;
    return ModemEvent::LinkFailed;
  }

  // Earliest time at which tick() can produce an event.
  std::optional<Millis> next_deadline() const noexcept {
    if (state_ == ModemState::Booting) return boot_started_at_ + config_.boot_duration_ms;
    if (state_ == ModemState::TcpOpen) return last_tx_ + config_.idle_timeout_s * 1000;
    return std::nullopt;
  }

 private:
  static AtResponse ok(std::string text) { return {true, std::move(text)}; }
  static AtResponse error() { return {false, "ERROR"}; }

  void check_time(Millis at) {
    if (at < last_event_at_) throw std::invalid_argument("modem timestamps must be monotone");
    last_event_at_ = at;
  }

  void start_boot(Millis at) {
    state_ = ModemState::Booting;
    boot_started_at_ = at;
    synced_ = false;
  }

  ModemConfig config_;
  ModemState state_ = ModemState::Off;
  bool powered_ = false;
  bool synced_ = false;
  IgnitionTrace trace_;
  Millis boot_started_at_ = 0;
  Millis last_tx_ = 0;
  Millis busy_until_ = 0;
  Millis last_event_at_ = 0;
  Uplink uplink_;
  ConnectProbe probe_;
};

}  // namespace cpas::modem

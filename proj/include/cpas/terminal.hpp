#pragma once

// Alarm terminal (TE) state machine. Pure: every input returns the actions
// the host must perform (drive the modem, transmit a frame, send an SMS), and
// outcomes are fed back through on_send_result / on_connected / on_modem_ready.
//
// Send failures are counted in n. A failure with n <= retry_threshold retries
// the same frame after retry_delay; the failure that makes
// n > retry_threshold drops the GPRS session and reconnects at once.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "cpas/common.hpp"
#include "cpas/protocol.hpp"
#include "cpas/sms_text.hpp"

namespace cpas::terminal {

using protocol::AlarmType;
using protocol::Message;

struct HmiAddress {
  std::string host = "hmi";
  int port = 7001;
};

struct TeConfig {
  TeId te_id = 1;
  std::int64_t heartbeat_period_s = 60;
  int retry_threshold = 3;
  std::int64_t retry_delay_s = 2;
  std::string user_phone;
  HmiAddress hmi;
  bool fire_sensors_always_alarm = true;

  std::int64_t register_timeout_s = 5;
  std::int64_t alarm_ack_timeout_s = 5;
  std::int64_t watchdog_toggle_period_s = 600;
  std::uint8_t fw_version = 1;
  std::uint8_t zone_count = 8;
  std::uint8_t battery = 15;
  bool armed = false;
  // Either alarm channel can be switched off; the double-protection check
  // must then fail.
  bool alarm_via_gprs = true;
  bool alarm_via_sms = true;
  std::uint32_t clock_epoch_s = 0;

  void validate(std::int64_t modem_idle_timeout_s) const {
    if (heartbeat_period_s <= 0) throw std::invalid_argument("heartbeat_period_s must be > 0");
    if (heartbeat_period_s >= modem_idle_timeout_s)
      throw std::invalid_argument("heartbeat_period_s must be below the modem idle timeout");
    if (retry_threshold < 1) throw std::invalid_argument("retry_threshold must be >= 1");
    if (retry_delay_s < 0) throw std::invalid_argument("retry_delay_s must be >= 0");
    if (battery > 15) throw std::invalid_argument("battery must be within 0..15");
    if (register_timeout_s <= 0 || alarm_ack_timeout_s <= 0 || watchdog_toggle_period_s <= 0)
      throw std::invalid_argument("timeouts must be > 0");
  }
};

enum class Phase { Boot, Connecting, Registering, Online, Reconnecting };

inline std::string_view phase_name(Phase p) noexcept {
  switch (p) {
    case Phase::Boot: return "Boot";
    case Phase::Connecting: return "Connecting";
    case Phase::Registering: return "Registering";
    case Phase::Online: return "Online";
    case Phase::Reconnecting: return "Reconnecting";
  }
  return "?";
}

struct SensorEvent {
  std::uint8_t zone = 0;
  AlarmType kind = AlarmType::IR;
  Millis at = 0;
};

namespace action {
struct PowerOnModem {};
struct ToggleIgnition {};
struct ConnectTcp {};
struct SendFrame {
  Message message;
  std::uint16_t seq = 0;
};
struct SendSms {
  std::string to;
  std::string text;
};
struct Disconnect {};
struct Reconnect {};
}  // namespace action

using Action = std::variant<action::PowerOnModem, action::ToggleIgnition, action::ConnectTcp,
                            action::SendFrame, action::SendSms, action::Disconnect, action::Reconnect>;
using Actions = std::vector<Action>;

struct TeCounters {
  std::uint64_t frames_sent = 0;  // accepted by the link
  std::uint64_t send_failures = 0;
  std::uint64_t heartbeats_emitted = 0;
  std::uint64_t heartbeats_sent = 0;
  std::uint64_t heartbeat_acks = 0;
  std::uint64_t reconnects = 0;
  std::uint64_t link_losses = 0;
  std::uint64_t alarms_raised = 0;
  std::uint64_t alarm_retransmissions = 0;
};

class Terminal {
 public:
  explicit Terminal(TeConfig config) : cfg_(std::move(config)), armed_(cfg_.armed) {}

  // --- inputs -------------------------------------------------------------

  Actions power_on(Millis now) {
    reset_runtime(now, /*keep_seq=*/false);
    powered_ = true;
    return {action::PowerOnModem{}};
  }

  void power_off() {
    powered_ = false;
    queue_.clear();
    retained_.clear();
  }

  Actions on_modem_ready(Millis now) {
    Actions out;
    if (!powered_) return out;
    phase_ = reconnect_after_boot_ ? Phase::Reconnecting : Phase::Connecting;
    reconnect_after_boot_ = false;
    connect_retry_at_.reset();
    if (!next_watchdog_at_) next_watchdog_at_ = now + cfg_.watchdog_toggle_period_s * 1000;
    out.push_back(action::ConnectTcp{});
    return out;
  }

  Actions on_connected(bool ok, Millis now) {
    Actions out;
    if (!powered_) return out;
    if (!ok) {
      connect_retry_at_ = now + cfg_.retry_delay_s * 1000;
      return out;
    }
    connect_retry_at_.reset();
    phase_ = Phase::Registering;
    register_sent_at_.reset();
    enqueue_register();
    pump_send(out);
    return out;
  }

  // Modem reported the socket gone (idle timeout or carrier loss): restart it.
  Actions on_link_lost(Millis /*now*/) {
    Actions out;
    if (!powered_) return out;
    ++counters_.link_losses;
    drop_to_retained();
    phase_ = Phase::Reconnecting;
    reconnect_after_boot_ = true;
    out.push_back(action::ToggleIgnition{});
    return out;
  }

  Actions on_sensor(const SensorEvent& ev, Millis /*now*/) {
    Actions out;
    if (!powered_) return out;
    const bool fire = ev.kind == AlarmType::Smoke || ev.kind == AlarmType::Temperature;
    if (!armed_ && !(fire && cfg_.fire_sensors_always_alarm)) return out;

    alarm_active_ = true;
    ++counters_.alarms_raised;
    const protocol::msg::Alarm alarm{ev.zone, ev.kind, cfg_.clock_epoch_s + static_cast<std::uint32_t>(ev.at / 1000)};
    last_alarm_seq_.reset();
    if (cfg_.alarm_via_gprs) {
      Outbound frame{alarm, next_seq()};
      last_alarm_seq_ = frame.seq;
      unacked_.push_back(UnackedAlarm{frame, std::nullopt});
      if (phase_ == Phase::Online) {
        enqueue_priority(frame);
        pump_send(out);
      }
    }
    if (cfg_.alarm_via_sms && !cfg_.user_phone.empty()) {
      out.push_back(action::SendSms{cfg_.user_phone,
                                    sms::render_sms(sms::AlertText{alarm.zone, alarm.alarm_type, alarm.ts})});
    }
    return out;
  }

  Actions on_send_result(bool ok, Millis now) {
    Actions out;
    if (!powered_ || !awaiting_result_) return out;
    awaiting_result_ = false;
    if (queue_.empty()) return out;

    if (ok) {
      n_ = 0;
      const Outbound sent = queue_.front();
      queue_.pop_front();
      note_sent(sent, now);
      if (reboot_pending_ && std::holds_alternative<protocol::msg::ControlAck>(sent.message)) {
        reboot_pending_ = false;
        return reboot(now);
      }
      pump_send(out);
      return out;
    }

    ++n_;
    ++counters_.send_failures;
    if (n_ > cfg_.retry_threshold) {
      n_ = 0;
      retry_at_.reset();
      if (reboot_pending_) {
        reboot_pending_ = false;
        return reboot(now);
      }
      ++counters_.reconnects;
      drop_to_retained();
      phase_ = Phase::Reconnecting;
      out.push_back(action::Disconnect{});
      out.push_back(action::Reconnect{});
      return out;
    }
    retry_at_ = now + cfg_.retry_delay_s * 1000;
    return out;
  }

  Actions on_timer(Millis now) {
    Actions out;
    if (!powered_) return out;

    if (phase_ != Phase::Boot && next_watchdog_at_ && now >= *next_watchdog_at_) {
      out.push_back(action::ToggleIgnition{});
      while (*next_watchdog_at_ <= now) *next_watchdog_at_ += cfg_.watchdog_toggle_period_s * 1000;
    }

    if ((phase_ == Phase::Connecting || phase_ == Phase::Reconnecting) && connect_retry_at_ &&
        now >= *connect_retry_at_) {
      connect_retry_at_.reset();
      out.push_back(action::ConnectTcp{});
      return out;
    }

    if (retry_at_ && now >= *retry_at_) {
      retry_at_.reset();
      pump_send(out);
    }

    if (phase_ == Phase::Registering && register_sent_at_ &&
        now - *register_sent_at_ >= cfg_.register_timeout_s * 1000 && !queued<protocol::msg::Register>()) {
      register_sent_at_.reset();
      enqueue_register();
      pump_send(out);
    }

    if (phase_ == Phase::Online) {
      if (now - last_heartbeat_at_ >= cfg_.heartbeat_period_s * 1000) {
        last_heartbeat_at_ = now;
        ++counters_.heartbeats_emitted;
        if (!queued<protocol::msg::Heartbeat>()) {
          queue_.push_back(Outbound{protocol::msg::Heartbeat{status_byte()}, next_seq()});
        }
        pump_send(out);
      }
      if (!unacked_.empty()) {
        auto& oldest = unacked_.front();
        if (oldest.last_tx && now - *oldest.last_tx >= cfg_.alarm_ack_timeout_s * 1000 &&
            !in_queue(oldest.frame.seq)) {
          oldest.last_tx.reset();
          ++counters_.alarm_retransmissions;
          enqueue_priority(oldest.frame);
          pump_send(out);
        }
      }
    }
    return out;
  }

  Actions on_frame(const protocol::Frame& frame, Millis now) {
    Actions out;
    if (!powered_ || frame.te_id != cfg_.te_id) return out;
    namespace m = protocol::msg;
    std::visit(protocol::overloaded{
                   [&](const m::RegisterAck&) {
                     if (phase_ != Phase::Registering) return;
                     phase_ = Phase::Online;
                     register_sent_at_.reset();
                     last_heartbeat_at_ = now;
                     for (auto& f : retained_) {
                       if (!std::holds_alternative<m::Alarm>(f.message)) queue_.push_back(f);
                     }
                     retained_.clear();
                     for (auto it = unacked_.rbegin(); it != unacked_.rend(); ++it) {
                       if (!in_queue(it->frame.seq)) queue_.push_front(it->frame);
                     }
                     pump_send(out);
                   },
                   [&](const m::HeartbeatAck&) { ++counters_.heartbeat_acks; },
                   [&](const m::AlarmAck&) {
                     std::erase_if(unacked_, [&](const UnackedAlarm& u) { return u.frame.seq == frame.seq; });
                     // An acked retransmission still waiting in the queue is moot.
                     const bool head_waiting = retry_at_.has_value();
                     for (std::size_t i = head_waiting ? 1 : 0; i < queue_.size(); ++i) {
                       if (queue_[i].seq == frame.seq && std::holds_alternative<m::Alarm>(queue_[i].message)) {
                         queue_.erase(queue_.begin() + static_cast<std::ptrdiff_t>(i));
                         break;
                       }
                     }
                   },
                   [&](const m::Control& c) {
                     std::uint8_t result = protocol::kControlOk;
                     switch (c.cmd.code) {
                       case protocol::ControlCmd::kArm: armed_ = true; break;
                       case protocol::ControlCmd::kDisarm:
                         armed_ = false;
                         alarm_active_ = false;
                         break;
                       case protocol::ControlCmd::kSirenOn: siren_ = true; break;
                       case protocol::ControlCmd::kSirenOff: siren_ = false; break;
                       case protocol::ControlCmd::kReboot: reboot_pending_ = true; break;
                       default: result = protocol::kControlUnknown; break;
                     }
                     queue_.push_back(Outbound{m::ControlAck{result}, next_seq()});
                     pump_send(out);
                   },
                   [&](const m::StatusQuery&) {
                     queue_.push_back(Outbound{m::StatusReport{status_byte(), uptime_s(now)}, next_seq()});
                     pump_send(out);
                   },
                   [](const auto&) {},
               },
               frame.message);
    return out;
  }

  std::optional<std::string> handle_sms(std::string_view text, std::string_view from, Millis /*now*/) {
    if (!powered_ || cfg_.user_phone.empty() || from != cfg_.user_phone) return std::nullopt;
    auto cmd = sms::parse_sms(text);
    if (!cmd) return std::nullopt;
    switch (*cmd) {
      case sms::UserCommand::Arm:
        armed_ = true;
        return sms::render_sms(sms::ArmReply{true});
      case sms::UserCommand::Disarm:
        armed_ = false;
        alarm_active_ = false;
        return sms::render_sms(sms::ArmReply{false});
      case sms::UserCommand::Status:
        return sms::render_sms(sms::StatusReply{armed_, cfg_.battery});
    }
    return std::nullopt;
  }

  // Earliest time at which on_timer() can act.
  std::optional<Millis> next_deadline() const {
    if (!powered_) return std::nullopt;
    std::optional<Millis> best;
    auto consider = [&](std::optional<Millis> t) {
      if (t && (!best || *t < *best)) best = t;
    };
    if (phase_ != Phase::Boot) consider(next_watchdog_at_);
    if (phase_ == Phase::Connecting || phase_ == Phase::Reconnecting) consider(connect_retry_at_);
    consider(retry_at_);
    if (phase_ == Phase::Registering && register_sent_at_)
      consider(*register_sent_at_ + cfg_.register_timeout_s * 1000);
    if (phase_ == Phase::Online) {
      consider(last_heartbeat_at_ + cfg_.heartbeat_period_s * 1000);
      if (!unacked_.empty() && unacked_.front().last_tx)
        consider(*unacked_.front().last_tx + cfg_.alarm_ack_timeout_s * 1000);
    }
    return best;
  }

  // --- observers ----------------------------------------------------------

  const TeConfig& config() const noexcept { return cfg_; }
  Phase phase() const noexcept { return phase_; }
  bool powered() const noexcept { return powered_; }
  bool armed() const noexcept { return armed_; }
  bool siren() const noexcept { return siren_; }
  bool alarm_active() const noexcept { return alarm_active_; }
  int failure_count() const noexcept { return n_; }
  std::uint32_t seq_counter() const noexcept { return seq_; }
  Millis last_heartbeat_at() const noexcept { return last_heartbeat_at_; }
  std::size_t unacked_alarms() const noexcept { return unacked_.size(); }
  std::size_t queued_frames() const noexcept { return queue_.size(); }
  std::optional<Millis> retry_at() const noexcept { return retry_at_; }
  std::optional<std::uint16_t> last_alarm_seq() const noexcept { return last_alarm_seq_; }
  const TeCounters& counters() const noexcept { return counters_; }

  protocol::StatusByte status_byte() const noexcept {
    return protocol::StatusByte{armed_, alarm_active_, cfg_.battery};
  }

  std::uint32_t uptime_s(Millis now) const noexcept {
    return static_cast<std::uint32_t>(std::max<Millis>(0, now - powered_at_) / 1000);
  }

 private:
  struct Outbound {
    Message message;
    std::uint16_t seq = 0;
  };
  struct UnackedAlarm {
    Outbound frame;
    std::optional<Millis> last_tx;
  };

  void reset_runtime(Millis now, bool keep_seq) {
    phase_ = Phase::Boot;
    powered_at_ = now;
    if (!keep_seq) seq_ = 0;
    n_ = 0;
    queue_.clear();
    retained_.clear();
    awaiting_result_ = false;
    retry_at_.reset();
    connect_retry_at_.reset();
    register_sent_at_.reset();
    next_watchdog_at_.reset();
    reconnect_after_boot_ = false;
    reboot_pending_ = false;
    for (auto& u : unacked_) u.last_tx.reset();
  }

  // CONTROL(reboot): re-run the boot sequence. Unacked alarms and seq survive.
  Actions reboot(Millis now) {
    reset_runtime(now, /*keep_seq=*/true);
    return {action::PowerOnModem{}};
  }

  std::uint16_t next_seq() { return static_cast<std::uint16_t>(seq_++); }

  void enqueue_register() {
    queue_.push_front(Outbound{protocol::msg::Register{cfg_.fw_version, cfg_.zone_count}, next_seq()});
  }

  // Alarms go ahead of routine traffic, behind a head that is waiting to retry.
  void enqueue_priority(const Outbound& frame) {
    std::size_t pos = retry_at_ ? std::min<std::size_t>(1, queue_.size()) : 0;
    while (pos < queue_.size() && std::holds_alternative<protocol::msg::Alarm>(queue_[pos].message)) ++pos;
    queue_.insert(queue_.begin() + static_cast<std::ptrdiff_t>(pos), frame);
  }

  // Keeps the frame that was pending for resend after re-registration.
  void drop_to_retained() {
    if (!queue_.empty() && !std::holds_alternative<protocol::msg::Register>(queue_.front().message) &&
        !std::holds_alternative<protocol::msg::Alarm>(queue_.front().message)) {
      retained_.push_back(queue_.front());
    }
    queue_.clear();
    awaiting_result_ = false;
    retry_at_.reset();
    register_sent_at_.reset();
    for (auto& u : unacked_) u.last_tx.reset();
  }

  void pump_send(Actions& out) {
    if (awaiting_result_ || retry_at_ || queue_.empty()) return;
    if (phase_ != Phase::Online && phase_ != Phase::Registering) return;
    if (phase_ == Phase::Registering && !std::holds_alternative<protocol::msg::Register>(queue_.front().message))
      return;
    awaiting_result_ = true;
    out.push_back(action::SendFrame{queue_.front().message, queue_.front().seq});
  }

  void note_sent(const Outbound& sent, Millis now) {
    ++counters_.frames_sent;
    if (std::holds_alternative<protocol::msg::Register>(sent.message)) register_sent_at_ = now;
    if (std::holds_alternative<protocol::msg::Heartbeat>(sent.message)) ++counters_.heartbeats_sent;
    if (std::holds_alternative<protocol::msg::Alarm>(sent.message)) {
      for (auto& u : unacked_) {
        if (u.frame.seq == sent.seq) u.last_tx = now;
      }
    }
  }

  template <typename M>
  bool queued() const {
    return std::any_of(queue_.begin(), queue_.end(),
                       [](const Outbound& o) { return std::holds_alternative<M>(o.message); });
  }

  bool in_queue(std::uint16_t seq) const {
    return std::any_of(queue_.begin(), queue_.end(), [&](const Outbound& o) {
      return o.seq == seq && std::holds_alternative<protocol::msg::Alarm>(o.message);
    });
  }

  TeConfig cfg_;
  Phase phase_ = Phase::Boot;
  bool powered_ = false;
  bool armed_ = false;
  bool siren_ = false;
  bool alarm_active_ = false;
  int n_ = 0;
  std::uint32_t seq_ = 0;
  Millis powered_at_ = 0;
  Millis last_heartbeat_at_ = 0;

  std::deque<Outbound> queue_;
  std::vector<Outbound> retained_;
  std::deque<UnackedAlarm> unacked_;
  bool awaiting_result_ = false;
  bool reconnect_after_boot_ = false;
  bool reboot_pending_ = false;
  std::optional<Millis> retry_at_;
  std::optional<Millis> connect_retry_at_;
  std::optional<Millis> register_sent_at_;
  std::optional<Millis> next_watchdog_at_;
  std::optional<std::uint16_t> last_alarm_seq_;
  TeCounters counters_;
};

}  // namespace cpas::terminal

#pragma once

// The simulated deployment: a fleet of TEs (terminal + emulated modem), one
// impaired link pair per TE, the HMI and the SMS gateway, all driven by one
// VirtualClock. Single threaded; identical (scenario, seed) give identical
// traces.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cpas/hmi.hpp"
#include "cpas/modem.hpp"
#include "cpas/protocol.hpp"
#include "cpas/rng.hpp"
#include "cpas/sim/clock.hpp"
#include "cpas/sim/link.hpp"
#include "cpas/sim/scenario.hpp"
#include "cpas/sim/trace.hpp"
#include "cpas/smsgw.hpp"
#include "cpas/terminal.hpp"

namespace cpas::sim {

inline constexpr Millis kPowerToIgnitionMs = 20;
inline constexpr Millis kIgnitionHoldMs = 150;

struct AlarmRecord {
  TeId te_id = 0;
  std::uint8_t zone = 0;
  protocol::AlarmType type = protocol::AlarmType::IR;
  Millis sensor_at = 0;
  std::optional<std::uint16_t> frame_seq;
  std::optional<Millis> published_at;
  std::uint32_t hmi_events = 0;
  std::vector<std::uint64_t> sms_ids;

  std::optional<Millis> latency() const {
    if (!published_at) return std::nullopt;
    return *published_at - sensor_at;
  }
};

struct BurstRecord {
  TeId te_id = 0;
  Millis scripted_at = 0;
  int count = 0;
  std::optional<Millis> ended_at;
  std::optional<Millis> recovered_at;
};

struct KillRecord {
  TeId te_id = 0;
  Millis at = 0;
  std::optional<Millis> offline_at;
};

struct TransitionRecord {
  TeId te_id = 0;
  hmi::SessionState state = hmi::SessionState::Online;
  Millis at = 0;
  bool false_offline = false;
};

struct OperatorRecord {
  std::uint64_t request_id = 0;
  TeId te_id = 0;
  hmi::RequestKind kind = hmi::RequestKind::Control;
  std::string cmd;
  Millis issued_at = 0;
  std::optional<std::string> error;
  bool queued_offline = false;
  std::optional<hmi::RequestStatus> status;
  std::optional<Millis> completed_at;
  std::uint8_t control_result = 0;
  std::optional<protocol::msg::StatusReport> report;
};

struct NodeStats {
  std::uint64_t disconnect_reconnect_pairs = 0;
  std::uint64_t idle_disconnects = 0;
  std::uint64_t link_failures = 0;
  std::uint64_t ignition_toggles = 0;
  std::uint64_t phase_transitions = 0;
  std::uint64_t timing_violations = 0;
  std::uint64_t heartbeats_acked = 0;
  std::uint64_t heartbeats_orphaned = 0;  // connection closed before the ack came
  std::uint64_t sms_rejected = 0;
  Millis online_ms = 0;
  std::optional<Millis> first_online_at;
  std::optional<Millis> online_since;
  std::map<std::uint16_t, Millis> outstanding_heartbeats;
};

class World {
 public:
  struct Node {
    Node(TeId te_id, terminal::TeConfig cfg, const modem::ModemConfig& mcfg, LinkParams lp, std::uint64_t seed)
        : id(te_id),
          te(std::move(cfg)),
          modem(mcfg),
          up(lp, derive_stream(seed, 2ull * te_id)),
          down(lp, derive_stream(seed, 2ull * te_id + 1)) {}

    TeId id;
    terminal::Terminal te;
    modem::Modem modem;
    Link up;
    Link down;
    protocol::FrameReader hmi_reader;
    protocol::FrameReader te_reader;
    std::uint64_t epoch = 0;  // TCP connection generation
    std::uint64_t hmi_reader_epoch = 0;
    std::uint64_t life = 0;  // bumped on every power transition
    bool powered = false;
    bool online = false;  // powered and in phase Online
    terminal::Phase phase = terminal::Phase::Boot;
    std::optional<VirtualClock::EventId> timer;
    Millis timer_at = 0;
    bool in_timer = false;
    std::optional<Millis> last_kill_at;
    std::size_t bursts_seen = 0;
    std::vector<std::size_t> unrecovered_bursts;
    std::uint64_t up_in_flight = 0;
    std::uint64_t down_in_flight = 0;
    NodeStats stats;
  };

  using ExternalSink = std::function<void(const protocol::Frame&)>;

  explicit World(Scenario scenario) : sc_(std::move(scenario)), hmi_(sc_.hmi), sms_(sc_.sms, derive_stream(sc_.seed, 0)) {
    nodes_.reserve(sc_.te_count);
    for (TeId id = 1; id <= sc_.te_count; ++id) {
      nodes_.push_back(std::make_unique<Node>(id, sc_.te_config(id), sc_.modem, sc_.link_params(id), sc_.seed));
      wire(*nodes_.back());
    }
    hmi_.set_downlink([this](TeId id, const protocol::Frame& f) { downlink(id, f); });
    hmi_.set_publisher([this](const hmi::StreamRecord& r) { on_publish(r); });
    sms_.set_endpoint_handler([this](const smsgw::SmsMessage& m, Millis now) { sms_to_te(m, now); });

    std::map<TeId, std::vector<smsgw::ScriptedSms>> scripts;
    for (const auto& u : sc_.user_sms) scripts[u.te_id].push_back({u.at, Scenario::te_phone(u.te_id), u.text});
    for (TeId id = 1; id <= sc_.te_count; ++id) {
      smsgw::UserAgent agent{Scenario::user_phone(id), {}, {}, 0};
      if (auto it = scripts.find(id); it != scripts.end()) agent.script = it->second;
      sms_.add_agent(std::move(agent));
    }
    for (const auto& u : sc_.user_sms) schedule_sms_drive(u.at);

    for (TeId id = 1; id <= sc_.te_count; ++id) {
      const Millis at = sc_.startup_spread_ms * static_cast<Millis>(id - 1) / static_cast<Millis>(sc_.te_count);
      clock_.schedule(at, [this, id] { power_up(node(id)); });
    }
    for (const auto& s : sc_.sensors) clock_.schedule(s.at, [this, s] { inject_alarm(s.te_id, s.zone, s.type); });
    for (const auto& b : sc_.failure_bursts) clock_.schedule(b.at, [this, b] { force_burst(b.te_id, b.count); });
    for (const auto& k : sc_.kills) clock_.schedule(k.at, [this, k] { kill(k.te_id); });
    for (const auto& r : sc_.revives) clock_.schedule(r.at, [this, r] { revive(r.te_id); });
    for (const auto& a : sc_.operator_actions) {
      clock_.schedule(a.at, [this, a] {
        if (a.kind == OperatorAction::Kind::Control) {
          control(a.te_id, a.cmd, a.op);
        } else {
          query_status(a.te_id);
        }
      });
    }
    schedule_sweep(sc_.sweep_period_ms);
  }

  World(const World&) = delete;
  World& operator=(const World&) = delete;

  // --- driving --------------------------------------------------------------

  void run() { run_until(sc_.duration_ms); }
  void run_until(Millis t) { clock_.run_until(t); }
  bool step(Millis limit) { return clock_.step(limit); }
  Millis now() const noexcept { return clock_.now(); }

  // --- live injection ---------------------------------------------------------

  bool kill(TeId id) {
    Node* n = find(id);
    if (!n || !n->powered) return false;
    n->te.power_off();
    if (n->modem.powered()) n->modem.apply_pin_event(modem::PinEvent::PowerOff, now());
    close_connection(*n);
    ++n->life;
    n->powered = false;
    n->last_kill_at = now();
    kills_.push_back(KillRecord{id, now(), std::nullopt});
    trace(TraceKind::PowerOff, id);
    after(*n);
    return true;
  }

  bool revive(TeId id) {
    Node* n = find(id);
    if (!n || n->powered) return false;
    power_up(*n);
    return true;
  }

  // A sensor event as if the TE's detector fired now.
  bool inject_alarm(TeId id, std::uint8_t zone, protocol::AlarmType type) {
    Node* n = find(id);
    if (!n) return false;
    Node& nd = *n;
    trace(TraceKind::Sensor, id, zone, static_cast<std::uint32_t>(type));
    const auto before = nd.te.counters().alarms_raised;
    auto actions = nd.te.on_sensor(terminal::SensorEvent{zone, type, now()}, now());
    if (nd.te.counters().alarms_raised != before) {
      AlarmRecord rec{id, zone, type, now(), nd.te.last_alarm_seq(), std::nullopt, 0, {}};
      alarms_.push_back(rec);
      if (rec.frame_seq) alarm_index_[key(id, *rec.frame_seq)] = alarms_.size() - 1;
      alert_context_ = alarms_.size() - 1;
    }
    apply(nd, actions);
    alert_context_.reset();
    return true;
  }

  void force_burst(TeId id, int count) {
    Node* n = find(id);
    if (!n) return;
    n->up.force_failures(count);
    bursts_.push_back(BurstRecord{id, now(), count, std::nullopt, std::nullopt});
    trace(TraceKind::BurstStarted, id, static_cast<std::uint32_t>(count));
  }

  // Carrier loss on the TE's socket.
  void fail_link(TeId id) {
    Node* n = find(id);
    if (!n) return;
    if (auto ev = n->modem.inject_link_failure(now())) {
      ++n->stats.link_failures;
      trace(TraceKind::ModemLinkFailed, id);
      close_connection(*n);
      apply(*n, n->te.on_link_lost(now()));
    }
  }

  Expected<hmi::ControlTicket, hmi::HmiError> control(TeId id, protocol::ControlCmd cmd, std::string op,
                                                      hmi::RequestCallback extra = {}) {
    const std::size_t idx = operator_log_.size();
    operator_log_.push_back(make_op(id, hmi::RequestKind::Control, protocol::control_name(cmd)));
    auto r = hmi_.send_control(id, cmd, std::move(op), now(), completion(idx, std::move(extra)));
    if (!r) {
      operator_log_[idx].error = std::string(hmi::error_name(r.error()));
    } else {
      operator_log_[idx].request_id = r->request_id;
      operator_log_[idx].queued_offline = r->te_offline;
      trace(TraceKind::OperatorRequest, id, static_cast<std::uint32_t>(r->request_id), 0);
    }
    return r;
  }

  Expected<std::uint64_t, hmi::HmiError> query_status(TeId id, hmi::RequestCallback extra = {}) {
    const std::size_t idx = operator_log_.size();
    operator_log_.push_back(make_op(id, hmi::RequestKind::StatusQuery, "status"));
    auto r = hmi_.query_status(id, now(), completion(idx, std::move(extra)));
    if (!r) {
      operator_log_[idx].error = std::string(hmi::error_name(r.error()));
    } else {
      operator_log_[idx].request_id = *r;
      trace(TraceKind::OperatorRequest, id, static_cast<std::uint32_t>(*r), 1);
    }
    return r;
  }

  // Frames from a real TE connected over TCP (serve mode). Replies for that
  // te_id go to `sink` until a simulated node registers the same id.
  void external_frame(const std::string& remote, const protocol::Frame& f, ExternalSink sink) {
    external_[f.te_id] = std::move(sink);
    hmi_.enqueue_inbound(remote, f, now());
    schedule_pump();
  }
  void external_closed(TeId id) { external_.erase(id); }

  // --- observation ------------------------------------------------------------

  const Scenario& scenario() const noexcept { return sc_; }
  hmi::Hmi& hmi() noexcept { return hmi_; }
  const hmi::Hmi& hmi() const noexcept { return hmi_; }
  const smsgw::SmsGateway& sms() const noexcept { return sms_; }
  const VirtualClock& clock() const noexcept { return clock_; }
  const std::vector<std::unique_ptr<Node>>& nodes() const noexcept { return nodes_; }
  const Node* node_ptr(TeId id) const { return id >= 1 && id <= nodes_.size() ? nodes_[id - 1].get() : nullptr; }
  const std::vector<AlarmRecord>& alarms() const noexcept { return alarms_; }
  const std::vector<BurstRecord>& bursts() const noexcept { return bursts_; }
  const std::vector<KillRecord>& kills() const noexcept { return kills_; }
  const std::vector<TransitionRecord>& transitions() const noexcept { return transitions_; }
  const std::vector<OperatorRecord>& operator_log() const noexcept { return operator_log_; }
  const std::vector<TraceRecord>& trace_records() const noexcept { return trace_; }
  std::uint64_t false_offline() const noexcept { return false_offline_; }

  // Time spent not Online since the TE first came Online (or since t=0).
  Millis downtime_ms(const Node& n) const {
    Millis online = n.stats.online_ms;
    if (n.stats.online_since) online += now() - *n.stats.online_since;
    const Millis from = n.stats.first_online_at.value_or(0);
    return std::max<Millis>(0, now() - from - online);
  }

  TraceFile trace_file() const { return TraceFile{sc_.seed, sc_.source.dump(), trace_}; }

 private:
  OperatorRecord make_op(TeId id, hmi::RequestKind kind, std::string cmd) const {
    OperatorRecord r;
    r.te_id = id;
    r.kind = kind;
    r.cmd = std::move(cmd);
    r.issued_at = now();
    return r;
  }

  static std::uint64_t key(TeId id, std::uint16_t seq) { return (std::uint64_t{id} << 16) | seq; }

  Node& node(TeId id) { return *nodes_.at(id - 1); }
  Node* find(TeId id) { return id >= 1 && id <= nodes_.size() ? nodes_[id - 1].get() : nullptr; }

  void trace(TraceKind kind, std::uint32_t node_id, std::uint32_t a = 0, std::uint32_t b = 0) {
    trace_.push_back(TraceRecord{now(), kind, node_id, a, b});
  }

  void wire(Node& n) {
    n.modem.set_uplink([this, &n](std::span<const std::uint8_t> data, Millis departs) {
      return uplink(n, data, departs);
    });
    const auto host = sc_.te_defaults.hmi.host;
    const int port = sc_.te_defaults.hmi.port;
    n.modem.set_connect_probe([this, &n, host, port](std::string_view h, int p) {
      return h == host && p == port && !n.up.in_outage(now());
    });
  }

  // --- TE side ----------------------------------------------------------------

  void power_up(Node& n) {
    n.powered = true;
    trace(TraceKind::PowerOn, n.id);
    apply(n, n.te.power_on(now()));
  }

  void apply(Node& n, const terminal::Actions& actions) {
    namespace a = terminal::action;
    for (std::size_t i = 0; i < actions.size(); ++i) {
      std::visit(protocol::overloaded{
                     [&](const a::PowerOnModem&) { start_modem(n); },
                     [&](const a::ToggleIgnition&) { toggle_ignition(n); },
                     [&](const a::ConnectTcp&) { connect(n); },
                     [&](const a::SendFrame& s) { send_frame(n, s); },
                     [&](const a::SendSms& s) { send_sms(n, s.to, s.text); },
                     [&](const a::Disconnect&) {
                       if (i + 1 < actions.size() && std::holds_alternative<a::Reconnect>(actions[i + 1]))
                         ++n.stats.disconnect_reconnect_pairs;
                       disconnect(n);
                     },
                     [&](const a::Reconnect&) {
                       trace(TraceKind::Reconnect, n.id);
                       connect(n);
                     },
                 },
                 actions[i]);
    }
    after(n);
  }

  void after(Node& n) {
    const bool online = n.powered && n.te.phase() == terminal::Phase::Online;
    if (n.te.phase() != n.phase) {
      n.phase = n.te.phase();
      ++n.stats.phase_transitions;
      trace(TraceKind::Phase, n.id, static_cast<std::uint32_t>(n.phase));
    }
    if (online != n.online) {
      n.online = online;
      if (online) {
        n.stats.online_since = now();
        if (!n.stats.first_online_at) n.stats.first_online_at = now();
        for (auto idx : n.unrecovered_bursts) bursts_[idx].recovered_at = now();
        n.unrecovered_bursts.clear();
      } else if (n.stats.online_since) {
        n.stats.online_ms += now() - *n.stats.online_since;
        n.stats.online_since.reset();
      }
    }
    reschedule(n);
  }

  void reschedule(Node& n) {
    std::optional<Millis> due;
    if (n.powered) {
      due = n.te.next_deadline();
      if (auto m = n.modem.next_deadline(); m && (!due || *m < *due)) due = m;
    }
    // A deadline the terminal could not act on must not spin at the same instant.
    if (due && *due <= now()) due = n.in_timer ? now() + 1 : now();
    if (n.timer && due && *due == n.timer_at) return;
    if (n.timer) clock_.cancel(*n.timer);
    n.timer.reset();
    if (!due) return;
    n.timer_at = *due;
    n.timer = clock_.schedule(*due, [this, &n] {
      n.timer.reset();
      on_timer(n);
    });
  }

  void on_timer(Node& n) {
    n.in_timer = true;
    for (auto ev : n.modem.tick(now())) {
      if (ev == modem::ModemEvent::BootCompleted) {
        trace(TraceKind::ModemBooted, n.id);
        apply(n, n.te.on_modem_ready(now()));
      } else {
        ++n.stats.idle_disconnects;
        trace(TraceKind::ModemIdleDrop, n.id);
        close_connection(n);
        apply(n, n.te.on_link_lost(now()));
      }
    }
    apply(n, n.te.on_timer(now()));
    n.in_timer = false;
    after(n);
  }

  void pin(Node& n, modem::PinEvent ev) {
    if (!n.modem.apply_pin_event(ev, now())) ++n.stats.timing_violations;
  }

  void start_modem(Node& n) {
    if (n.modem.powered()) {
      pin(n, modem::PinEvent::PowerOff);
      close_connection(n);
    }
    const auto life = ++n.life;
    pin(n, modem::PinEvent::PowerOn);
    clock_.schedule(now() + kPowerToIgnitionMs, [this, &n, life] {
      if (n.life == life) pin(n, modem::PinEvent::IgnitionLow);
    });
    clock_.schedule(now() + kPowerToIgnitionMs + kIgnitionHoldMs, [this, &n, life] {
      if (n.life != life) return;
      pin(n, modem::PinEvent::IgnitionHigh);
      after(n);
    });
  }

  void toggle_ignition(Node& n) {
    ++n.stats.ignition_toggles;
    trace(TraceKind::IgnitionToggle, n.id);
    const auto life = n.life;
    pin(n, modem::PinEvent::IgnitionLow);
    clock_.schedule(now() + kIgnitionHoldMs, [this, &n, life] {
      if (n.life != life) return;
      const bool was_open = n.modem.state() == modem::ModemState::TcpOpen;
      pin(n, modem::PinEvent::IgnitionHigh);
      if (n.modem.state() == modem::ModemState::Booting && was_open) close_connection(n);
      after(n);
    });
  }

  void connect(Node& n) {
    using modem::ModemState;
    bool ok = false;
    const auto st = [&] { return n.modem.state(); };
    if (n.modem.powered() && st() != ModemState::Off && st() != ModemState::Booting) {
      const auto at = [&](std::string_view cmd) { return n.modem.submit_at(cmd, now()); };
      if (at("AT").ok) {
        if (st() == ModemState::TcpOpen) {
          at("AT+CIPCLOSE");
          close_connection(n);
        }
        if (st() == ModemState::SimReady) at("AT+CREG?");
        if (st() == ModemState::NetRegistered) at("AT+CGATT=1");
        if (st() == ModemState::GprsAttached) {
          const auto& hmi = n.te.config().hmi;
          ok = at("AT+CIPSTART=" + hmi.host + "," + std::to_string(hmi.port)).text == "CONNECT OK";
        }
      }
    }
    if (ok) {
      ++n.epoch;
      n.te_reader = protocol::FrameReader{};
    }
    trace(TraceKind::Connected, n.id, ok ? 1 : 0);
    apply(n, n.te.on_connected(ok, now()));
  }

  void disconnect(Node& n) {
    if (n.modem.state() == modem::ModemState::TcpOpen) n.modem.submit_at("AT+CIPCLOSE", now());
    if (n.modem.state() == modem::ModemState::GprsAttached) n.modem.submit_at("AT+CGATT=0", now());
    close_connection(n);
  }

  void close_connection(Node& n) {
    ++n.epoch;
    n.te_reader = protocol::FrameReader{};
    n.stats.heartbeats_orphaned += n.stats.outstanding_heartbeats.size();
    n.stats.outstanding_heartbeats.clear();
  }

  void send_frame(Node& n, const terminal::action::SendFrame& s) {
    const auto bytes = protocol::encode_frame(s.message, n.id, s.seq);
    const auto type = static_cast<std::uint32_t>(protocol::type_of(s.message));
    auto r = n.modem.tcp_send(bytes, now());
    const bool ok = r.has_value() && r->accepted();
    const Millis done_at = r.has_value() ? r->departs_at : now();
    trace(ok ? TraceKind::FrameSent : TraceKind::FrameSendFailed, n.id, type, s.seq);
    if (ok && std::holds_alternative<protocol::msg::Heartbeat>(s.message))
      n.stats.outstanding_heartbeats[s.seq] = now();
    const auto life = n.life;
    const auto epoch = n.epoch;
    clock_.schedule(done_at, [this, &n, ok, life, epoch] {
      if (n.life != life || n.epoch != epoch) return;
      apply(n, n.te.on_send_result(ok, now()));
      // A burst that ended without forcing a reconnect is recovered here.
      if (n.online && !n.unrecovered_bursts.empty()) {
        for (auto idx : n.unrecovered_bursts) bursts_[idx].recovered_at = now();
        n.unrecovered_bursts.clear();
      }
    });
  }

  bool uplink(Node& n, std::span<const std::uint8_t> data, Millis departs) {
    auto arrival = n.up.admit(now(), departs);
    if (n.up.burst_ends().size() != n.bursts_seen) {
      n.bursts_seen = n.up.burst_ends().size();
      trace(TraceKind::BurstEnded, n.id);
      for (std::size_t i = 0; i < bursts_.size(); ++i) {
        if (bursts_[i].te_id == n.id && !bursts_[i].ended_at) {
          bursts_[i].ended_at = now();
          n.unrecovered_bursts.push_back(i);
          break;
        }
      }
    }
    if (!arrival) return false;
    ++n.up_in_flight;
    clock_.schedule(*arrival, [this, &n, bytes = std::vector<std::uint8_t>(data.begin(), data.end()),
                               epoch = n.epoch] {
      --n.up_in_flight;
      if (epoch != n.epoch) {
        n.up.mark_discarded();
        return;
      }
      n.up.mark_delivered();
      if (n.hmi_reader_epoch != epoch) {
        n.hmi_reader = protocol::FrameReader{};
        n.hmi_reader_epoch = epoch;
      }
      n.hmi_reader.feed(bytes);
      while (auto f = n.hmi_reader.next()) {
        trace(TraceKind::HmiReceived, n.id, static_cast<std::uint32_t>(protocol::type_of(f->message)), f->seq);
        external_.erase(f->te_id);
        hmi_.enqueue_inbound("sim:" + Scenario::te_phone(n.id) + "#" + std::to_string(epoch), std::move(*f), now());
      }
      schedule_pump();
    });
    return true;
  }

  void downlink(TeId id, const protocol::Frame& f) {
    if (auto it = external_.find(id); it != external_.end()) {
      it->second(f);
      return;
    }
    Node* n = find(id);
    if (!n) return;
    auto bytes = protocol::encode_frame(f);
    auto arrival = n->down.admit_serialized(bytes.size(), now());
    if (!arrival) return;
    ++n->down_in_flight;
    clock_.schedule(*arrival, [this, n, bytes = std::move(bytes), epoch = n->epoch] {
      --n->down_in_flight;
      if (epoch != n->epoch || !n->powered) {
        n->down.mark_discarded();
        return;
      }
      n->down.mark_delivered();
      n->te_reader.feed(bytes);
      while (auto fr = n->te_reader.next()) {
        trace(TraceKind::TeReceived, n->id, static_cast<std::uint32_t>(protocol::type_of(fr->message)), fr->seq);
        if (std::holds_alternative<protocol::msg::HeartbeatAck>(fr->message) &&
            n->stats.outstanding_heartbeats.erase(fr->seq)) {
          ++n->stats.heartbeats_acked;
        }
        apply(*n, n->te.on_frame(*fr, now()));
      }
    });
  }

  // --- SMS --------------------------------------------------------------------

  void send_sms(Node& n, const std::string& to, const std::string& text) {
    auto id = sms_.submit(Scenario::te_phone(n.id), to, text, now());
    if (!id) {
      ++n.stats.sms_rejected;
      return;
    }
    note_submitted(n.id, sms_.messages().back());
    if (alert_context_) alarms_[*alert_context_].sms_ids.push_back(*id);
  }

  void note_submitted(TeId node_id, const smsgw::SmsMessage& m) {
    trace(TraceKind::SmsSubmitted, node_id, static_cast<std::uint32_t>(m.id), m.lost ? 1 : 0);
    if (m.delivered_at) schedule_sms_drive(*m.delivered_at);
  }

  void schedule_sms_drive(Millis at) {
    if (!sms_drives_.insert(at).second) return;
    clock_.schedule(at, [this, at] {
      sms_drives_.erase(at);
      auto r = sms_.drive_agents(now());
      for (const auto& m : r.submitted) note_submitted(te_of_phone(m.to), m);
      for (const auto& m : r.delivered) trace(TraceKind::SmsDelivered, te_of_phone(m.to), static_cast<std::uint32_t>(m.id));
    });
  }

  static TeId te_of_phone(const std::string& phone) {
    const auto dash = phone.find('-');
    if (dash == std::string::npos) return 0;
    TeId id = 0;
    for (char c : phone.substr(dash + 1)) {
      if (c < '0' || c > '9') return 0;
      id = id * 10 + static_cast<TeId>(c - '0');
    }
    return id;
  }

  void sms_to_te(const smsgw::SmsMessage& m, Millis now_ms) {
    Node* n = find(te_of_phone(m.to));
    if (!n || m.to != Scenario::te_phone(n->id)) return;
    if (auto reply = n->te.handle_sms(m.text, m.from, now_ms)) send_sms(*n, m.from, *reply);
    after(*n);
  }

  // --- HMI side ---------------------------------------------------------------

  void schedule_pump() {
    if (pump_scheduled_) return;
    pump_scheduled_ = true;
    clock_.schedule(now(), [this] {
      pump_scheduled_ = false;
      hmi_.pump(now());
      if (hmi_.has_pending()) schedule_pump();
    });
  }

  void schedule_sweep(Millis at) {
    clock_.schedule(at, [this] {
      hmi_.sweep_offline(now());
      schedule_sweep(now() + sc_.sweep_period_ms);
    });
  }

  hmi::RequestCallback completion(std::size_t idx, hmi::RequestCallback extra) {
    return [this, idx, extra = std::move(extra)](const hmi::RequestOutcome& o) {
      auto& rec = operator_log_[idx];
      rec.status = o.status;
      rec.completed_at = o.completed_at;
      rec.control_result = o.control_result;
      rec.report = o.report;
      trace(TraceKind::RequestDone, o.te_id, static_cast<std::uint32_t>(o.request_id),
            static_cast<std::uint32_t>(o.status));
      if (extra) extra(o);
    };
  }

  void on_publish(const hmi::StreamRecord& r) {
    if (const auto* ev = std::get_if<hmi::AlarmEvent>(&r)) {
      trace(TraceKind::AlarmPublished, ev->te_id, static_cast<std::uint32_t>(ev->event_id), ev->frame_seq);
      if (auto it = alarm_index_.find(key(ev->te_id, ev->frame_seq)); it != alarm_index_.end()) {
        auto& rec = alarms_[it->second];
        ++rec.hmi_events;
        if (!rec.published_at) rec.published_at = now();
      }
      return;
    }
    const auto& sc = std::get<hmi::StateChange>(r);
    trace(TraceKind::SessionState, sc.te_id, sc.state == hmi::SessionState::Online ? 0 : 1);
    TransitionRecord t{sc.te_id, sc.state, sc.at, false};
    if (sc.state == hmi::SessionState::Offline) {
      if (const Node* n = node_ptr(sc.te_id)) {
        // False: the TE held an Online session for the whole silence window.
        const Millis window = sc_.hmi.offline_threshold_s * 1000;
        t.false_offline = n->online && n->stats.online_since && *n->stats.online_since <= now() - window;
        if (t.false_offline) ++false_offline_;
      }
      for (auto& k : kills_) {
        if (k.te_id == sc.te_id && !k.offline_at) k.offline_at = now();
      }
    }
    transitions_.push_back(t);
  }

  Scenario sc_;
  VirtualClock clock_;
  hmi::Hmi hmi_;
  smsgw::SmsGateway sms_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<TeId, ExternalSink> external_;
  bool pump_scheduled_ = false;
  std::set<Millis> sms_drives_;

  std::vector<TraceRecord> trace_;
  std::vector<AlarmRecord> alarms_;
  std::unordered_map<std::uint64_t, std::size_t> alarm_index_;
  std::optional<std::size_t> alert_context_;
  std::vector<BurstRecord> bursts_;
  std::vector<KillRecord> kills_;
  std::vector<TransitionRecord> transitions_;
  std::vector<OperatorRecord> operator_log_;
  std::uint64_t false_offline_ = 0;
};

}  // namespace cpas::sim

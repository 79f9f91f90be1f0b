#pragma once

// Scenario files: JSON with "schema": "cpas.scenario/1". Documented in
// docs/scenario.md. Unknown keys are rejected so typos surface as errors.

#include <algorithm>
#include <climits>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cpas/common.hpp"
#include "cpas/hmi.hpp"
#include "cpas/modem.hpp"
#include "cpas/protocol.hpp"
#include "cpas/sim/link.hpp"
#include "cpas/smsgw.hpp"
#include "cpas/terminal.hpp"

namespace cpas::sim {

inline constexpr std::string_view kScenarioSchema = "cpas.scenario/1";

class ScenarioParseError : public std::runtime_error {
 public:
  ScenarioParseError(std::string field, std::string message, std::size_t line = 0, std::size_t column = 0)
      : std::runtime_error(format(field, message, line, column)),
        field_(std::move(field)),
        line_(line),
        column_(column) {}

  const std::string& field() const noexcept { return field_; }
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  static std::string format(const std::string& field, const std::string& message, std::size_t line,
                            std::size_t column) {
    std::string out = "scenario";
    if (line) out += ":" + std::to_string(line) + ":" + std::to_string(column);
    if (!field.empty()) out += ": " + field;
    return out + ": " + message;
  }

  std::string field_;
  std::size_t line_;
  std::size_t column_;
};

struct SensorScript {
  TeId te_id = 0;
  Millis at = 0;
  std::uint8_t zone = 0;
  protocol::AlarmType type = protocol::AlarmType::IR;
};

struct UserScript {
  TeId te_id = 0;
  Millis at = 0;
  std::string text;
};

struct FailureBurst {
  TeId te_id = 0;
  Millis at = 0;
  int count = 0;
};

struct PowerEvent {
  TeId te_id = 0;
  Millis at = 0;
};

struct OperatorAction {
  enum class Kind { Control, Status };
  Millis at = 0;
  TeId te_id = 0;
  Kind kind = Kind::Control;
  protocol::ControlCmd cmd;
  std::string op = "scenario";
};

struct Assertion {
  std::string type;
  std::optional<std::int64_t> value;
  std::optional<std::int64_t> min;
  std::optional<std::int64_t> max;
};

inline const std::vector<std::string_view>& assertion_types() {
  static const std::vector<std::string_view> types = {
      "alarm_latency_p95_max_ms", "alarm_latency_max_ms", "double_protection",   "no_false_offline",
      "no_session_leaks",         "all_heartbeats_acked", "heartbeats_per_te",   "no_idle_disconnect",
      "reconnects_match_bursts",  "recovery_within_ms",   "all_online_at_end",   "offline_detected_within_ms",
  };
  return types;
}

struct Scenario {
  std::string name = "unnamed";
  std::uint64_t seed = 1;
  Millis duration_ms = 0;
  std::uint32_t te_count = 0;
  Millis startup_spread_ms = 0;
  Millis sweep_period_ms = 1000;

  terminal::TeConfig te_defaults;
  std::map<TeId, nlohmann::json> te_overrides;
  modem::ModemConfig modem;
  hmi::HmiConfig hmi;
  LinkParams link;
  std::map<TeId, nlohmann::json> link_overrides;
  smsgw::SmsConfig sms;

  std::vector<SensorScript> sensors;
  std::vector<UserScript> user_sms;
  std::vector<FailureBurst> failure_bursts;
  std::vector<PowerEvent> kills;
  std::vector<PowerEvent> revives;
  std::vector<OperatorAction> operator_actions;
  std::vector<Assertion> assertions;

  nlohmann::json source;  // as parsed, seed normalized

  static std::string te_phone(TeId id) { return "te-" + std::to_string(id); }
  static std::string user_phone(TeId id) { return "user-" + std::to_string(id); }

  terminal::TeConfig te_config(TeId id) const;
  LinkParams link_params(TeId id) const;
};

namespace detail {

class Fields {
 public:
  Fields(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ScenarioParseError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string path(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

  bool has(std::string_view key) {
    seen_.emplace_back(key);
    return obj_.contains(std::string(key));
  }

  const nlohmann::json& raw(std::string_view key) const { return obj_.at(std::string(key)); }
  const nlohmann::json& json() const noexcept { return obj_; }

  std::int64_t integer(std::string_view key, std::optional<std::int64_t> fallback = std::nullopt,
                       std::int64_t min = INT64_MIN, std::int64_t max = INT64_MAX) {
    if (!has(key)) {
      if (fallback) return *fallback;
      throw ScenarioParseError(path(key), "required field missing");
    }
    const auto& v = raw(key);
    if (!v.is_number_integer()) throw ScenarioParseError(path(key), "expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < min || x > max)
      throw ScenarioParseError(path(key), "value " + std::to_string(x) + " outside [" + std::to_string(min) + ", " +
                                              std::to_string(max) + "]");
    return x;
  }

  double number(std::string_view key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_number()) throw ScenarioParseError(path(key), "expected a number");
    return v.get<double>();
  }

  bool boolean(std::string_view key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_boolean()) throw ScenarioParseError(path(key), "expected true or false");
    return v.get<bool>();
  }

  std::string string(std::string_view key, std::optional<std::string> fallback = std::nullopt) {
    if (!has(key)) {
      if (fallback) return *fallback;
      throw ScenarioParseError(path(key), "required field missing");
    }
    const auto& v = raw(key);
    if (!v.is_string()) throw ScenarioParseError(path(key), "expected a string");
    return v.get<std::string>();
  }

  const nlohmann::json* array(std::string_view key) {
    if (!has(key)) return nullptr;
    const auto& v = raw(key);
    if (!v.is_array()) throw ScenarioParseError(path(key), "expected an array");
    return &v;
  }

  const nlohmann::json* object(std::string_view key) {
    if (!has(key)) return nullptr;
    const auto& v = raw(key);
    if (!v.is_object()) throw ScenarioParseError(path(key), "expected an object");
    return &v;
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (std::find(seen_.begin(), seen_.end(), k) == seen_.end()) throw ScenarioParseError(path(k), "unknown field");
    }
  }

 private:
  const nlohmann::json& obj_;
  std::string path_;
  std::vector<std::string> seen_;
};

inline void read_terminal(Fields& f, terminal::TeConfig& c) {
  c.heartbeat_period_s = f.integer("heartbeat_period_s", c.heartbeat_period_s, 1);
  c.retry_threshold = static_cast<int>(f.integer("retry_threshold", c.retry_threshold, 1, 1000));
  c.retry_delay_s = f.integer("retry_delay_s", c.retry_delay_s, 0);
  c.fire_sensors_always_alarm = f.boolean("fire_sensors_always_alarm", c.fire_sensors_always_alarm);
  c.register_timeout_s = f.integer("register_timeout_s", c.register_timeout_s, 1);
  c.alarm_ack_timeout_s = f.integer("alarm_ack_timeout_s", c.alarm_ack_timeout_s, 1);
  c.battery = static_cast<std::uint8_t>(f.integer("battery", c.battery, 0, 15));
  c.armed = f.boolean("armed", c.armed);
  c.alarm_via_gprs = f.boolean("alarm_via_gprs", c.alarm_via_gprs);
  c.alarm_via_sms = f.boolean("alarm_via_sms", c.alarm_via_sms);
  c.fw_version = static_cast<std::uint8_t>(f.integer("fw_version", c.fw_version, 0, 255));
  c.zone_count = static_cast<std::uint8_t>(f.integer("zone_count", c.zone_count, 0, 255));
  c.clock_epoch_s = static_cast<std::uint32_t>(f.integer("clock_epoch_s", c.clock_epoch_s, 0, 0xFFFFFFFFll));
  c.hmi.host = f.string("hmi_host", c.hmi.host);
  c.hmi.port = static_cast<int>(f.integer("hmi_port", c.hmi.port, 1, 65535));
}

inline void read_link(Fields& f, LinkParams& p) {
  p.latency_ms = f.integer("latency_ms", p.latency_ms, 0);
  p.jitter_ms = f.integer("jitter_ms", p.jitter_ms, 0);
  p.drop_prob = f.number("drop_prob", p.drop_prob);
  p.bandwidth_bps = f.integer("bandwidth_bps", p.bandwidth_bps);
  if (const auto* arr = f.array("outages")) {
    p.outages.clear();
    for (std::size_t i = 0; i < arr->size(); ++i) {
      const auto path = f.path("outages") + "[" + std::to_string(i) + "]";
      const auto& w = (*arr)[i];
      if (!w.is_array() || w.size() != 2 || !w[0].is_number_integer() || !w[1].is_number_integer())
        throw ScenarioParseError(path, "expected [start_ms, end_ms]");
      p.outages.push_back(Window{w[0].get<Millis>(), w[1].get<Millis>()});
    }
  }
}

template <typename Fn>
void each_entry(Fields& f, std::string_view key, Fn&& fn) {
  if (const auto* arr = f.array(key)) {
    for (std::size_t i = 0; i < arr->size(); ++i) {
      Fields entry((*arr)[i], f.path(key) + "[" + std::to_string(i) + "]");
      fn(entry);
      entry.finish();
    }
  }
}

template <typename Fn>
void checked(const std::string& field, Fn&& fn) {
  try {
    fn();
  } catch (const std::invalid_argument& e) {
    throw ScenarioParseError(field, e.what());
  }
}

inline std::pair<std::size_t, std::size_t> line_column(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace detail

inline terminal::TeConfig Scenario::te_config(TeId id) const {
  terminal::TeConfig c = te_defaults;
  if (auto it = te_overrides.find(id); it != te_overrides.end()) {
    detail::Fields f(it->second, "terminal_overrides[te_id=" + std::to_string(id) + "]");
    f.has("te_id");
    detail::read_terminal(f, c);
    f.finish();
  }
  c.te_id = id;
  c.user_phone = user_phone(id);
  c.watchdog_toggle_period_s = modem.watchdog_toggle_period_s;
  return c;
}

inline LinkParams Scenario::link_params(TeId id) const {
  LinkParams p = link;
  if (auto it = link_overrides.find(id); it != link_overrides.end()) {
    detail::Fields f(it->second, "link_overrides[te_id=" + std::to_string(id) + "]");
    f.has("te_id");
    detail::read_link(f, p);
    f.finish();
  }
  return p;
}

inline Scenario parse_scenario_json(const nlohmann::json& root) {
  using detail::Fields;
  Scenario sc;
  Fields f(root, "");
  const auto schema = f.string("schema");
  if (schema != kScenarioSchema)
    throw ScenarioParseError("schema", "unsupported schema \"" + schema + "\", expected " + std::string(kScenarioSchema));
  sc.name = f.string("name", sc.name);
  if (f.has("seed")) {
    const auto& v = f.raw("seed");
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      throw ScenarioParseError("seed", "expected a non-negative integer");
    sc.seed = v.get<std::uint64_t>();
  }
  sc.duration_ms = f.integer("duration_ms", std::nullopt, 1);
  sc.te_count = static_cast<std::uint32_t>(f.integer("te_count", std::nullopt, 1, 1'000'000));
  sc.startup_spread_ms = f.integer("startup_spread_ms", 0, 0);
  sc.sweep_period_ms = f.integer("sweep_period_ms", sc.sweep_period_ms, 1);

  if (const auto* o = f.object("modem")) {
    Fields m(*o, "modem");
    sc.modem.idle_timeout_s = m.integer("idle_timeout_s", sc.modem.idle_timeout_s);
    sc.modem.boot_duration_ms = m.integer("boot_duration_ms", sc.modem.boot_duration_ms, 0);
    sc.modem.watchdog_toggle_period_s = m.integer("watchdog_toggle_period_s", sc.modem.watchdog_toggle_period_s, 1);
    sc.modem.bandwidth_bps = m.integer("bandwidth_bps", sc.modem.bandwidth_bps);
    m.finish();
  }
  detail::checked("modem", [&] { sc.modem.validate(); });

  if (const auto* o = f.object("terminal")) {
    Fields t(*o, "terminal");
    detail::read_terminal(t, sc.te_defaults);
    t.finish();
  }
  sc.te_defaults.watchdog_toggle_period_s = sc.modem.watchdog_toggle_period_s;
  detail::checked("terminal", [&] { sc.te_defaults.validate(sc.modem.idle_timeout_s); });

  if (const auto* o = f.object("hmi")) {
    Fields h(*o, "hmi");
    sc.hmi.offline_threshold_s = h.integer("offline_threshold_s", sc.hmi.offline_threshold_s, 1);
    sc.hmi.max_sessions = static_cast<std::size_t>(h.integer("max_sessions", static_cast<std::int64_t>(sc.hmi.max_sessions), 1));
    sc.hmi.round_budget = h.integer("round_budget", sc.hmi.round_budget, 1);
    sc.hmi.request_timeout_ms = h.integer("request_timeout_ms", sc.hmi.request_timeout_ms, 1);
    h.finish();
  }
  detail::checked("hmi", [&] { sc.hmi.validate(sc.te_defaults.heartbeat_period_s); });

  if (const auto* o = f.object("link")) {
    Fields l(*o, "link");
    detail::read_link(l, sc.link);
    l.finish();
  }
  detail::checked("link", [&] { sc.link.validate(); });

  if (const auto* o = f.object("sms")) {
    Fields s(*o, "sms");
    sc.sms.latency_ms = s.integer("latency_ms", sc.sms.latency_ms, 0);
    sc.sms.latency_jitter_ms = s.integer("latency_jitter_ms", sc.sms.latency_jitter_ms, 0);
    sc.sms.loss_prob = s.number("loss_prob", sc.sms.loss_prob);
    s.finish();
  }
  detail::checked("sms", [&] { sc.sms.validate(); });

  const auto te_id_in = [&](Fields& e) {
    return static_cast<TeId>(e.integer("te_id", std::nullopt, 1, sc.te_count));
  };
  const auto time_in = [&](Fields& e, std::string_view key) {
    return e.integer(key, std::nullopt, 0, sc.duration_ms - 1);
  };

  detail::each_entry(f, "terminal_overrides", [&](Fields& e) {
    const TeId id = te_id_in(e);
    terminal::TeConfig probe = sc.te_defaults;
    detail::read_terminal(e, probe);
    detail::checked(e.path("te_id"), [&] { probe.validate(sc.modem.idle_timeout_s); });
    sc.te_overrides[id] = e.json();  // re-applied lazily by te_config()
  });

  detail::each_entry(f, "link_overrides", [&](Fields& e) {
    const TeId id = te_id_in(e);
    LinkParams probe = sc.link;
    detail::read_link(e, probe);
    detail::checked(e.path("te_id"), [&] { probe.validate(); });
    sc.link_overrides[id] = e.json();
  });

  detail::each_entry(f, "sensors", [&](Fields& e) {
    SensorScript s;
    s.te_id = te_id_in(e);
    s.at = time_in(e, "at_ms");
    s.zone = static_cast<std::uint8_t>(e.integer("zone", std::nullopt, 0, 255));
    const auto type = e.string("type");
    auto t = protocol::alarm_type_from_name(type);
    if (!t) throw ScenarioParseError(e.path("type"), "expected IR, SMOKE or TEMP");
    s.type = *t;
    sc.sensors.push_back(s);
  });

  detail::each_entry(f, "user_sms", [&](Fields& e) {
    UserScript u;
    u.te_id = te_id_in(e);
    u.at = time_in(e, "at_ms");
    u.text = e.string("text");
    if (!sms::is_sms_text(u.text)) throw ScenarioParseError(e.path("text"), "not a valid SMS text");
    sc.user_sms.push_back(u);
  });

  detail::each_entry(f, "failure_bursts", [&](Fields& e) {
    FailureBurst b;
    b.te_id = te_id_in(e);
    b.at = time_in(e, "at_ms");
    b.count = static_cast<int>(e.integer("count", std::nullopt, 1, 1000));
    sc.failure_bursts.push_back(b);
  });

  detail::each_entry(f, "kills", [&](Fields& e) { sc.kills.push_back({te_id_in(e), time_in(e, "at_ms")}); });
  detail::each_entry(f, "revives", [&](Fields& e) { sc.revives.push_back({te_id_in(e), time_in(e, "at_ms")}); });

  detail::each_entry(f, "operator", [&](Fields& e) {
    OperatorAction a;
    a.at = time_in(e, "at_ms");
    a.te_id = te_id_in(e);
    const auto kind = e.string("action");
    if (kind == "control") {
      a.kind = OperatorAction::Kind::Control;
      auto cmd = protocol::control_from_name(e.string("cmd"));
      if (!cmd) throw ScenarioParseError(e.path("cmd"), "expected arm, disarm, siren_on, siren_off or reboot");
      a.cmd = *cmd;
    } else if (kind == "status") {
      a.kind = OperatorAction::Kind::Status;
    } else {
      throw ScenarioParseError(e.path("action"), "expected \"control\" or \"status\"");
    }
    a.op = e.string("operator", a.op);
    sc.operator_actions.push_back(a);
  });

  detail::each_entry(f, "assertions", [&](Fields& e) {
    Assertion a;
    a.type = e.string("type");
    const auto& known = assertion_types();
    if (std::find(known.begin(), known.end(), a.type) == known.end())
      throw ScenarioParseError(e.path("type"), "unknown assertion type \"" + a.type + "\"");
    if (e.has("value")) a.value = e.integer("value");
    if (e.has("min")) a.min = e.integer("min");
    if (e.has("max")) a.max = e.integer("max");
    const bool needs_value = a.type.ends_with("_ms");
    if (needs_value && !a.value) throw ScenarioParseError(e.path("value"), "required field missing");
    if (a.type == "heartbeats_per_te" && (!a.min || !a.max))
      throw ScenarioParseError(e.path("min"), "heartbeats_per_te needs min and max");
    sc.assertions.push_back(a);
  });

  f.finish();
  sc.source = root;
  sc.source["seed"] = sc.seed;
  return sc;
}

inline Scenario parse_scenario(std::string_view text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const auto [line, col] = detail::line_column(text, e.byte > 0 ? e.byte - 1 : 0);
    throw ScenarioParseError("", "invalid JSON", line, col);
  }
  return parse_scenario_json(root);
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioParseError("", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

}  // namespace cpas::sim

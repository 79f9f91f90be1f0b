#pragma once

// Run report (schema "cpas.report/1", see docs/report.md). Built only from
// virtual-time observations, so a replay reproduces it byte for byte.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cpas/sim/world.hpp"

namespace cpas::sim {

using ReportJson = nlohmann::ordered_json;

inline constexpr std::string_view kReportSchema = "cpas.report/1";
inline constexpr std::string_view kLatencyDefinition =
    "sensor event at the TE -> AlarmEvent publication on the HMI operator stream, virtual ms";

// Nearest-rank percentile: the ceil(q * n)-th smallest sample.
inline std::optional<Millis> nearest_rank(std::vector<Millis> samples, double q) {
  if (samples.empty()) return std::nullopt;
  std::sort(samples.begin(), samples.end());
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(samples.size())));
  rank = std::clamp<std::size_t>(rank, 1, samples.size());
  return samples[rank - 1];
}

namespace detail {

template <typename T>
ReportJson opt(const std::optional<T>& v) {
  return v ? ReportJson(*v) : ReportJson(nullptr);
}

struct Observed {
  std::vector<Millis> latencies;
  std::size_t unpublished_alarms = 0;
  std::size_t double_protection_failures = 0;
  std::uint64_t heartbeats_unacked = 0;
  std::uint64_t idle_disconnects = 0;
  std::uint64_t min_heartbeats = UINT64_MAX;
  std::uint64_t max_heartbeats = 0;
  std::size_t reconnect_mismatches = 0;
  std::optional<Millis> worst_recovery;
  std::size_t unrecovered_bursts = 0;
  std::size_t not_online_at_end = 0;
  std::optional<Millis> worst_offline_detection;
  std::size_t undetected_kills = 0;
  std::size_t session_leaks = 0;
};

inline std::size_t delivered_alerts(const World& w, const AlarmRecord& a) {
  std::size_t n = 0;
  const auto& log = w.sms().messages();
  for (auto id : a.sms_ids) {
    const auto& m = log.at(static_cast<std::size_t>(id - 1));
    if (m.delivered && m.to == Scenario::user_phone(a.te_id)) ++n;
  }
  return n;
}

inline ReportJson assertion(const Assertion& a, bool passed, ReportJson observed, std::string detail = {}) {
  ReportJson j;
  j["type"] = a.type;
  if (a.value) j["value"] = *a.value;
  if (a.min) j["min"] = *a.min;
  if (a.max) j["max"] = *a.max;
  j["observed"] = std::move(observed);
  j["passed"] = passed;
  if (!passed && !detail.empty()) j["detail"] = detail;
  return j;
}

}  // namespace detail

inline ReportJson build_report(const World& w) {
  const Scenario& sc = w.scenario();
  const Millis end = w.now();
  detail::Observed ob;
  ReportJson r;
  r["schema"] = kReportSchema;
  r["latency_definition"] = kLatencyDefinition;
  r["scenario"] = sc.name;
  r["seed"] = sc.seed;
  r["duration_ms"] = sc.duration_ms;
  r["ended_at_ms"] = end;
  r["te_count"] = sc.te_count;

  // Alarms.
  ReportJson alarms = ReportJson::array();
  for (const auto& a : w.alarms()) {
    const auto delivered = detail::delivered_alerts(w, a);
    std::optional<Millis> sms_at;
    for (auto id : a.sms_ids) {
      const auto& m = w.sms().messages().at(static_cast<std::size_t>(id - 1));
      if (m.delivered && m.delivered_at) sms_at = *m.delivered_at;
    }
    if (auto l = a.latency()) ob.latencies.push_back(*l);
    else ++ob.unpublished_alarms;
    if (a.hmi_events != 1 || delivered != 1) ++ob.double_protection_failures;
    ReportJson j;
    j["te_id"] = a.te_id;
    j["zone"] = a.zone;
    j["type"] = protocol::alarm_type_name(a.type);
    j["sensor_at_ms"] = a.sensor_at;
    j["frame_seq"] = detail::opt(a.frame_seq);
    j["published_at_ms"] = detail::opt(a.published_at);
    j["latency_ms"] = detail::opt(a.latency());
    j["hmi_events"] = a.hmi_events;
    j["sms_alerts_delivered"] = delivered;
    j["sms_delivered_at_ms"] = detail::opt(sms_at);
    alarms.push_back(std::move(j));
  }
  r["alarms"] = std::move(alarms);
  const auto p50 = nearest_rank(ob.latencies, 0.50);
  const auto p95 = nearest_rank(ob.latencies, 0.95);
  const auto pmax = ob.latencies.empty() ? std::optional<Millis>{}
                                         : std::optional<Millis>{*std::max_element(ob.latencies.begin(), ob.latencies.end())};
  r["alarm_latency"] = {{"count", ob.latencies.size()},
                        {"unpublished", ob.unpublished_alarms},
                        {"p50_ms", detail::opt(p50)},
                        {"p95_ms", detail::opt(p95)},
                        {"max_ms", detail::opt(pmax)}};

  // Terminals.
  ReportJson tes = ReportJson::array();
  std::uint64_t sent = 0, delivered = 0, dropped = 0, in_flight = 0;
  bool conserved = true;
  std::map<TeId, std::uint64_t> bursts_per_te;
  for (const auto& b : w.bursts()) ++bursts_per_te[b.te_id];
  for (const auto& np : w.nodes()) {
    const auto& n = *np;
    const auto& c = n.te.counters();
    const Millis grace = 2 * n.up.params().latency_ms + 2 * n.up.params().jitter_ms + 1000;
    std::uint64_t unacked = n.stats.heartbeats_orphaned;
    for (const auto& [seq, at] : n.stats.outstanding_heartbeats) {
      if (at < end - grace) ++unacked;
    }
    ob.heartbeats_unacked += unacked;
    ob.idle_disconnects += n.stats.idle_disconnects;
    ob.min_heartbeats = std::min(ob.min_heartbeats, c.heartbeats_sent);
    ob.max_heartbeats = std::max(ob.max_heartbeats, c.heartbeats_sent);
    const std::uint64_t expected_pairs = bursts_per_te.count(n.id) ? bursts_per_te.at(n.id) : 0;
    if (n.stats.disconnect_reconnect_pairs != expected_pairs) ++ob.reconnect_mismatches;
    if (n.powered && !n.online) ++ob.not_online_at_end;
    const hmi::Session* s = w.hmi().session(n.id);
    if (n.powered && n.online && (!s || s->state != hmi::SessionState::Online)) ++ob.not_online_at_end;

    for (const Link* l : {&n.up, &n.down}) {
      sent += l->counters().sent;
      delivered += l->counters().delivered;
      dropped += l->counters().dropped;
    }
    in_flight += n.up_in_flight + n.down_in_flight;
    if (n.up.counters().sent != n.up.counters().delivered + n.up.counters().dropped + n.up_in_flight ||
        n.down.counters().sent != n.down.counters().delivered + n.down.counters().dropped + n.down_in_flight)
      conserved = false;

    ReportJson j;
    j["te_id"] = n.id;
    j["powered"] = n.powered;
    j["phase"] = terminal::phase_name(n.te.phase());
    j["online_at_end"] = n.online;
    j["first_online_at_ms"] = detail::opt(n.stats.first_online_at);
    j["downtime_ms"] = w.downtime_ms(n);
    j["reconnects"] = n.stats.disconnect_reconnect_pairs;
    j["link_losses"] = c.link_losses;
    j["idle_disconnects"] = n.stats.idle_disconnects;
    j["ignition_toggles"] = n.stats.ignition_toggles;
    j["send_failures"] = c.send_failures;
    j["frames_sent"] = c.frames_sent;
    j["heartbeats_sent"] = c.heartbeats_sent;
    j["heartbeats_acked"] = n.stats.heartbeats_acked;
    j["heartbeats_unacked"] = unacked;
    j["alarm_retransmissions"] = c.alarm_retransmissions;
    j["phase_transitions"] = n.stats.phase_transitions;
    j["timing_violations"] = n.stats.timing_violations;
    tes.push_back(std::move(j));
  }
  r["terminals"] = std::move(tes);

  // Bursts and kills.
  ReportJson bursts = ReportJson::array();
  for (const auto& b : w.bursts()) {
    std::optional<Millis> rec;
    if (b.ended_at && b.recovered_at) rec = *b.recovered_at - *b.ended_at;
    if (!rec) ++ob.unrecovered_bursts;
    else ob.worst_recovery = std::max(ob.worst_recovery.value_or(0), *rec);
    bursts.push_back({{"te_id", b.te_id},
                      {"scripted_at_ms", b.scripted_at},
                      {"count", b.count},
                      {"ended_at_ms", detail::opt(b.ended_at)},
                      {"recovered_at_ms", detail::opt(b.recovered_at)},
                      {"recovery_ms", detail::opt(rec)}});
  }
  r["bursts"] = std::move(bursts);

  ReportJson kills = ReportJson::array();
  for (const auto& k : w.kills()) {
    std::optional<Millis> det;
    if (k.offline_at) det = *k.offline_at - k.at;
    if (!det) ++ob.undetected_kills;
    else ob.worst_offline_detection = std::max(ob.worst_offline_detection.value_or(0), *det);
    kills.push_back({{"te_id", k.te_id}, {"at_ms", k.at}, {"offline_at_ms", detail::opt(k.offline_at)},
                     {"detection_ms", detail::opt(det)}});
  }
  r["kills"] = std::move(kills);

  ReportJson transitions = ReportJson::array();
  for (const auto& t : w.transitions()) {
    transitions.push_back({{"te_id", t.te_id}, {"state", hmi::state_name(t.state)}, {"at_ms", t.at},
                           {"false_offline", t.false_offline}});
  }
  r["transitions"] = std::move(transitions);

  // HMI.
  const auto& hc = w.hmi().counters();
  for (const auto& s : w.hmi().list_tes()) {
    const auto* n = w.node_ptr(s.te_id);
    // A session nobody owns, or one still Online for a TE dead past the threshold.
    const Millis stale = sc.hmi.offline_threshold_s * 1000 + sc.sweep_period_ms;
    if (!n || (s.state == hmi::SessionState::Online && !n->powered && n->last_kill_at && end - *n->last_kill_at > stale))
      ++ob.session_leaks;
  }
  r["hmi"] = {{"sessions", w.hmi().session_count()},
              {"online", w.hmi().online_count()},
              {"frames_processed", hc.frames_processed},
              {"unregistered_frames", hc.unregistered_frames},
              {"duplicate_alarms", hc.duplicate_alarms},
              {"heartbeats_acked", hc.heartbeats_acked},
              {"rejected_registrations", hc.rejected_registrations},
              {"pump_rounds", hc.pump_rounds},
              {"alarm_events", w.hmi().events().size()},
              {"false_offline", w.false_offline()},
              {"session_leaks", ob.session_leaks},
              {"outstanding_requests", w.hmi().outstanding_requests()}};

  r["links"] = {{"sent", sent}, {"delivered", delivered}, {"dropped", dropped}, {"in_flight", in_flight},
                {"conserved", conserved}};

  // SMS.
  std::uint64_t sms_delivered = 0, sms_lost = 0;
  ReportJson messages = ReportJson::array();
  for (const auto& m : w.sms().messages()) {
    if (m.delivered) ++sms_delivered;
    if (m.lost) ++sms_lost;
    messages.push_back({{"id", m.id},
                        {"from", m.from},
                        {"to", m.to},
                        {"text", m.text},
                        {"submitted_at_ms", m.submitted_at},
                        {"delivered_at_ms", m.delivered ? detail::opt(m.delivered_at) : ReportJson(nullptr)},
                        {"lost", m.lost}});
  }
  ReportJson mailboxes = ReportJson::object();
  for (const auto& [phone, agent] : w.sms().agents()) {
    if (agent.mailbox.empty()) continue;
    ReportJson box = ReportJson::array();
    for (const auto& m : agent.mailbox) {
      box.push_back({{"id", m.id}, {"from", m.from}, {"text", m.text}, {"delivered_at_ms", detail::opt(m.delivered_at)}});
    }
    mailboxes[phone] = std::move(box);
  }
  r["sms"] = {{"submitted", w.sms().messages().size()},
              {"delivered", sms_delivered},
              {"lost", sms_lost},
              {"pending", w.sms().pending()},
              {"messages", std::move(messages)},
              {"mailboxes", std::move(mailboxes)}};

  // Operator requests.
  ReportJson ops = ReportJson::array();
  for (const auto& o : w.operator_log()) {
    ReportJson j;
    j["request_id"] = o.request_id;
    j["te_id"] = o.te_id;
    j["kind"] = o.kind == hmi::RequestKind::Control ? "control" : "status";
    j["cmd"] = o.cmd;
    j["issued_at_ms"] = o.issued_at;
    j["error"] = detail::opt(o.error);
    j["queued_offline"] = o.queued_offline;
    j["status"] = o.status ? ReportJson(hmi::request_status_name(*o.status)) : ReportJson(nullptr);
    j["completed_at_ms"] = detail::opt(o.completed_at);
    if (o.kind == hmi::RequestKind::Control) {
      j["result"] = o.control_result;
    } else if (o.report) {
      j["armed"] = o.report->status.armed;
      j["alarm_active"] = o.report->status.alarm_active;
      j["battery"] = o.report->status.battery;
      j["uptime_s"] = o.report->uptime_s;
    }
    ops.push_back(std::move(j));
  }
  r["operator"] = std::move(ops);

  r["clock"] = {{"scheduled", w.clock().scheduled()},
                {"fired", w.clock().fired()},
                {"cancelled", w.clock().cancelled()},
                {"pending", w.clock().pending()}};
  r["trace_records"] = w.trace_records().size();

  // Assertions.
  ReportJson results = ReportJson::array();
  bool all = true;
  for (const auto& a : sc.assertions) {
    ReportJson res;
    if (a.type == "alarm_latency_p95_max_ms") {
      const bool ok = p95 && ob.unpublished_alarms == 0 && *p95 <= *a.value;
      res = detail::assertion(a, ok, detail::opt(p95),
                              ob.unpublished_alarms ? std::to_string(ob.unpublished_alarms) + " alarm(s) never published" : "");
    } else if (a.type == "alarm_latency_max_ms") {
      const bool ok = pmax && ob.unpublished_alarms == 0 && *pmax <= *a.value;
      res = detail::assertion(a, ok, detail::opt(pmax));
    } else if (a.type == "double_protection") {
      const bool ok = !w.alarms().empty() && ob.double_protection_failures == 0;
      res = detail::assertion(a, ok, ob.double_protection_failures,
                              w.alarms().empty() ? "no alarms were raised"
                                                 : std::to_string(ob.double_protection_failures) +
                                                       " alarm(s) without exactly one event and one SMS alert");
    } else if (a.type == "no_false_offline") {
      res = detail::assertion(a, w.false_offline() == 0, w.false_offline());
    } else if (a.type == "no_session_leaks") {
      res = detail::assertion(a, ob.session_leaks == 0 && conserved, ob.session_leaks,
                              conserved ? "" : "link frame accounting does not balance");
    } else if (a.type == "all_heartbeats_acked") {
      res = detail::assertion(a, ob.heartbeats_unacked == 0, ob.heartbeats_unacked);
    } else if (a.type == "heartbeats_per_te") {
      const bool ok = w.nodes().size() > 0 && static_cast<std::int64_t>(ob.min_heartbeats) >= *a.min &&
                      static_cast<std::int64_t>(ob.max_heartbeats) <= *a.max;
      res = detail::assertion(a, ok, {{"min", ob.min_heartbeats}, {"max", ob.max_heartbeats}});
    } else if (a.type == "no_idle_disconnect") {
      res = detail::assertion(a, ob.idle_disconnects == 0, ob.idle_disconnects);
    } else if (a.type == "reconnects_match_bursts") {
      res = detail::assertion(a, ob.reconnect_mismatches == 0, ob.reconnect_mismatches,
                              "TEs whose Disconnect+Reconnect count differs from their burst count");
    } else if (a.type == "recovery_within_ms") {
      const bool ok = ob.unrecovered_bursts == 0 && (!ob.worst_recovery || *ob.worst_recovery <= *a.value);
      res = detail::assertion(a, ok, detail::opt(ob.worst_recovery),
                              ob.unrecovered_bursts ? std::to_string(ob.unrecovered_bursts) + " burst(s) not recovered" : "");
    } else if (a.type == "all_online_at_end") {
      res = detail::assertion(a, ob.not_online_at_end == 0, ob.not_online_at_end);
    } else if (a.type == "offline_detected_within_ms") {
      const bool ok = ob.undetected_kills == 0 && (!ob.worst_offline_detection || *ob.worst_offline_detection <= *a.value);
      res = detail::assertion(a, ok, detail::opt(ob.worst_offline_detection));
    }
    all = all && res["passed"].get<bool>();
    results.push_back(std::move(res));
  }
  r["assertions"] = std::move(results);
  r["passed"] = all;
  return r;
}

inline std::string report_text(const ReportJson& r) { return r.dump(2) + "\n"; }

// Human summary for `cpas report`.
inline std::string render_report_table(const ReportJson& r) {
  std::ostringstream out;
  const auto num = [](const ReportJson& v) { return v.is_null() ? std::string("-") : v.dump(); };
  out << "scenario " << r.value("scenario", std::string("?")) << "  seed " << num(r.at("seed")) << "  duration "
      << num(r.at("duration_ms")) << " ms  TEs " << num(r.at("te_count")) << "\n";
  out << "latency: " << r.value("latency_definition", std::string()) << "\n\n";
  const auto& lat = r.at("alarm_latency");
  out << "alarms " << num(lat.at("count")) << "  p50 " << num(lat.at("p50_ms")) << " ms  p95 " << num(lat.at("p95_ms"))
      << " ms  max " << num(lat.at("max_ms")) << " ms  unpublished " << num(lat.at("unpublished")) << "\n\n";

  std::uint64_t reconnects = 0;
  Millis downtime = 0, worst = 0;
  for (const auto& t : r.at("terminals")) {
    reconnects += t.at("reconnects").get<std::uint64_t>();
    const auto d = t.at("downtime_ms").get<Millis>();
    downtime += d;
    worst = std::max(worst, d);
  }
  // Large fleets list only the TEs that had trouble.
  std::ostringstream rows;
  std::size_t shown = 0;
  for (const auto& t : r.at("terminals")) {
    const bool interesting = t.at("reconnects").get<std::uint64_t>() > 0 || t.at("downtime_ms").get<Millis>() > 0 ||
                             !t.at("online_at_end").get<bool>();
    if (!interesting && r.at("terminals").size() > 20) continue;
    if (++shown > 50) break;
    rows << std::left << std::setw(8) << num(t.at("te_id")) << std::setw(14) << t.at("phase").get<std::string>()
         << std::setw(12) << num(t.at("reconnects")) << std::setw(14) << num(t.at("downtime_ms")) << std::setw(12)
         << num(t.at("heartbeats_sent")) << "\n";
  }
  if (shown > 0) {
    out << std::left << std::setw(8) << "te_id" << std::setw(14) << "phase" << std::setw(12) << "reconnects"
        << std::setw(14) << "downtime_ms" << std::setw(12) << "heartbeats" << "\n"
        << rows.str();
  } else {
    out << "no TE reconnected or lost time online\n";
  }
  out << "total reconnects " << reconnects << "  total downtime " << downtime << " ms  worst " << worst << " ms\n\n";
  for (const auto& a : r.at("assertions")) {
    out << (a.at("passed").get<bool>() ? "PASS " : "FAIL ") << a.at("type").get<std::string>() << "  observed "
        << a.at("observed").dump();
    if (a.contains("value")) out << "  limit " << a.at("value").dump();
    if (a.contains("detail")) out << "  (" << a.at("detail").get<std::string>() << ")";
    out << "\n";
  }
  out << (r.at("passed").get<bool>() ? "PASSED" : "FAILED") << "\n";
  return out.str();
}

struct RunOutput {
  ReportJson report;
  TraceFile trace;
};

inline RunOutput run_scenario(Scenario sc) {
  World w(std::move(sc));
  w.run();
  return RunOutput{build_report(w), w.trace_file()};
}

// Re-runs the embedded scenario and checks every record against the file.
inline RunOutput replay_trace(const TraceFile& file) {
  Scenario sc;
  try {
    sc = parse_scenario(file.scenario_json);
  } catch (const ScenarioParseError& e) {
    throw TraceParseError(std::string("embedded scenario: ") + e.what());
  }
  if (sc.seed != file.seed) throw TraceParseError("embedded scenario seed differs from trace header");
  auto out = run_scenario(std::move(sc));
  const auto& got = out.trace.records;
  const auto& want = file.records;
  const std::size_t n = std::min(got.size(), want.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (!(got[i] == want[i])) {
      throw DivergedTrace(i, "expected kind " + std::to_string(static_cast<int>(want[i].kind)) + " at " +
                                 std::to_string(want[i].time) + " ms, got kind " +
                                 std::to_string(static_cast<int>(got[i].kind)) + " at " + std::to_string(got[i].time) +
                                 " ms");
    }
  }
  if (got.size() != want.size())
    throw DivergedTrace(n, "record count " + std::to_string(got.size()) + " vs " + std::to_string(want.size()));
  return out;
}

}  // namespace cpas::sim

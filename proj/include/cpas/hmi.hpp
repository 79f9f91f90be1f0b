#pragma once

// HMI core: TE session registry, alarm event log, operator requests and the
// operator event stream. Transport agnostic and single threaded; hosts
// serialize calls (see cpas/live.hpp). Inbound frames are queued per TE and
// drained by pump() under the time-slice scheduler, one tick per frame.

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "cpas/common.hpp"
#include "cpas/protocol.hpp"
#include "cpas/scheduler.hpp"

namespace cpas::hmi {

using protocol::Frame;
using protocol::StatusByte;

struct HmiConfig {
  std::int64_t offline_threshold_s = 180;
  std::size_t max_sessions = 4096;
  sched::Ticks round_budget = 100;
  Millis request_timeout_ms = 10000;
  std::string event_log_path;  // append-only JSON lines; empty disables

  void validate(std::int64_t heartbeat_period_s) const {
    if (offline_threshold_s < 2 * heartbeat_period_s)
      throw std::invalid_argument("hmi.offline_threshold_s must be at least twice the heartbeat period");
    if (max_sessions < 2000) throw std::invalid_argument("hmi.max_sessions must be >= 2000");
    if (round_budget < 1) throw std::invalid_argument("hmi.round_budget must be >= 1");
    if (request_timeout_ms <= 0) throw std::invalid_argument("hmi.request_timeout_ms must be > 0");
  }
};

enum class SessionState { Online, Offline };

inline std::string_view state_name(SessionState s) noexcept {
  return s == SessionState::Online ? "online" : "offline";
}

struct Session {
  TeId te_id = 0;
  SessionState state = SessionState::Online;
  Millis last_seen = 0;
  Millis registered_at = 0;
  std::string remote;
  std::uint16_t next_expected_seq = 0;
  std::uint64_t seq_gaps = 0;
  std::uint64_t frames_in = 0;
  std::optional<StatusByte> last_status;
  std::set<std::uint16_t> seen_alarm_seqs;
};

struct AlarmEvent {
  std::uint64_t event_id = 0;
  TeId te_id = 0;
  std::uint8_t zone = 0;
  protocol::AlarmType alarm_type = protocol::AlarmType::IR;
  std::uint32_t te_timestamp = 0;
  Millis received_at = 0;
  std::uint16_t frame_seq = 0;
  std::optional<std::string> acked_by;
  std::optional<Millis> acked_at;
};

struct StateChange {
  TeId te_id = 0;
  SessionState state = SessionState::Online;
  Millis at = 0;
};

using StreamRecord = std::variant<AlarmEvent, StateChange>;

enum class HmiError { UnknownTe, TeOffline, UnknownEvent, TooManySessions };

inline std::string_view error_name(HmiError e) noexcept {
  switch (e) {
    case HmiError::UnknownTe: return "UnknownTe";
    case HmiError::TeOffline: return "TeOffline";
    case HmiError::UnknownEvent: return "UnknownEvent";
    case HmiError::TooManySessions: return "TooManySessions";
  }
  return "?";
}

enum class RequestKind { Control, StatusQuery };
enum class RequestStatus { Ok, TimedOut, Lost };

inline std::string_view request_status_name(RequestStatus s) noexcept {
  switch (s) {
    case RequestStatus::Ok: return "ok";
    case RequestStatus::TimedOut: return "timeout";
    case RequestStatus::Lost: return "lost";
  }
  return "?";
}

struct RequestOutcome {
  std::uint64_t request_id = 0;
  TeId te_id = 0;
  RequestKind kind = RequestKind::Control;
  RequestStatus status = RequestStatus::Ok;
  std::uint8_t control_result = 0;
  std::optional<protocol::msg::StatusReport> report;
  Millis completed_at = 0;
};

using RequestCallback = std::function<void(const RequestOutcome&)>;

struct ControlTicket {
  std::uint64_t request_id = 0;
  bool te_offline = false;  // queued for delivery on reconnect
};

struct TeSummary {
  TeId te_id = 0;
  SessionState state = SessionState::Online;
  Millis last_seen = 0;
  std::optional<bool> armed;
};

namespace action {
struct SendToTe {
  TeId te_id = 0;
  Frame frame;
};
struct Publish {
  StreamRecord record;
};
}  // namespace action

using Action = std::variant<action::SendToTe, action::Publish>;
using Actions = std::vector<Action>;

// Fan-out of stream records to any number of concurrent subscribers; each
// subscriber receives every record published after it subscribed, in order.
class StreamHub {
 public:
  class Subscription {
   public:
    // Waits up to `timeout` for the next record; nullopt on timeout or close.
    template <typename Rep, typename Period>
    std::optional<StreamRecord> next(std::chrono::duration<Rep, Period> timeout) {
      std::unique_lock lock(mu_);
      cv_.wait_for(lock, timeout, [&] { return !pending_.empty() || closed_; });
      if (pending_.empty()) return std::nullopt;
      auto r = std::move(pending_.front());
      pending_.pop_front();
      return r;
    }
    bool closed() const {
      std::lock_guard lock(mu_);
      return closed_;
    }

   private:
    friend class StreamHub;
    void push(const StreamRecord& r) {
      {
        std::lock_guard lock(mu_);
        pending_.push_back(r);
      }
      cv_.notify_one();
    }
    void close() {
      {
        std::lock_guard lock(mu_);
        closed_ = true;
      }
      cv_.notify_all();
    }
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<StreamRecord> pending_;
    bool closed_ = false;
  };

  std::shared_ptr<Subscription> subscribe() {
    auto sub = std::make_shared<Subscription>();
    std::lock_guard lock(mu_);
    subs_.push_back(sub);
    return sub;
  }

  void unsubscribe(const std::shared_ptr<Subscription>& sub) {
    std::lock_guard lock(mu_);
    std::erase(subs_, sub);
  }

  void publish(const StreamRecord& r) {
    std::lock_guard lock(mu_);
    for (auto& s : subs_) s->push(r);
  }

  void close_all() {
    std::lock_guard lock(mu_);
    for (auto& s : subs_) s->close();
    subs_.clear();
  }

  std::size_t subscribers() const {
    std::lock_guard lock(mu_);
    return subs_.size();
  }

 private:
  mutable std::mutex mu_;
  std::vector<std::shared_ptr<Subscription>> subs_;
};

struct HmiCounters {
  std::uint64_t frames_processed = 0;
  std::uint64_t unregistered_frames = 0;
  std::uint64_t duplicate_alarms = 0;
  std::uint64_t heartbeats_acked = 0;
  std::uint64_t rejected_registrations = 0;
  std::uint64_t pump_rounds = 0;
};

class Hmi {
 public:
  using Downlink = std::function<void(TeId, const Frame&)>;
  using Publisher = std::function<void(const StreamRecord&)>;

  explicit Hmi(HmiConfig config = {}) : cfg_(std::move(config)), sched_(cfg_.round_budget) {
    if (!cfg_.event_log_path.empty()) event_log_.open(cfg_.event_log_path, std::ios::app);
  }

  void set_downlink(Downlink d) { downlink_ = std::move(d); }
  // Extra observer called for each published record (after the stream log).
  void set_publisher(Publisher p) { publisher_ = std::move(p); }
  StreamHub& hub() noexcept { return hub_; }

  const HmiConfig& config() const noexcept { return cfg_; }
  const HmiCounters& counters() const noexcept { return counters_; }
  const std::vector<StreamRecord>& stream_log() const noexcept { return stream_log_; }
  const std::vector<AlarmEvent>& events() const noexcept { return events_; }
  std::size_t session_count() const noexcept { return sessions_.size(); }
  std::size_t online_count() const {
    return static_cast<std::size_t>(std::count_if(sessions_.begin(), sessions_.end(), [](const auto& kv) {
      return kv.second.state == SessionState::Online;
    }));
  }
  const Session* session(TeId id) const {
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : &it->second;
  }
  const sched::TaskQueue<TeId>& scheduler() const noexcept { return sched_; }
  std::size_t pending_frames() const noexcept { return static_cast<std::size_t>(sched_.total_work()); }
  bool has_pending() const noexcept { return !sched_.empty(); }

  // --- TE-facing ------------------------------------------------------------

  void enqueue_inbound(std::string remote, Frame frame, Millis now) {
    const TeId id = frame.te_id;
    inbound_[id].push_back(Inbound{std::move(remote), std::move(frame), now});
    sched_.add_work(id, 1);
  }

  // One scheduling round: serves queue heads until R ticks are used.
  std::size_t pump(Millis now) {
    ++counters_.pump_rounds;
    std::size_t processed = 0;
    sched::Ticks used = 0;
    while (used < sched_.round_budget() && !sched_.empty()) {
      const auto slice = sched_.next_slice();
      const sched::Ticks grant = std::min(slice.slice, sched_.round_budget() - used);
      auto& q = inbound_[slice.task_id];
      sched::Ticks done = 0;
      while (done < grant && !q.empty()) {
        Inbound in = std::move(q.front());
        q.pop_front();
        execute(on_frame(in.remote, in.frame, now));
        ++done;
      }
      if (q.empty()) inbound_.erase(slice.task_id);
      sched_.run_slice(done);
      used += done;
      processed += static_cast<std::size_t>(done);
      last_served_round_[slice.task_id] = counters_.pump_rounds;
    }
    return processed;
  }

  Actions on_frame(const std::string& remote, const Frame& frame, Millis now) {
    namespace m = protocol::msg;
    Actions out;
    ++counters_.frames_processed;
    const TeId id = frame.te_id;

    if (const auto* reg = std::get_if<m::Register>(&frame.message)) {
      (void)reg;
      auto it = sessions_.find(id);
      if (it == sessions_.end()) {
        if (sessions_.size() >= cfg_.max_sessions) {
          ++counters_.rejected_registrations;
          return out;
        }
        it = sessions_.emplace(id, Session{}).first;
        it->second.te_id = id;
        it->second.state = SessionState::Offline;  // flipped below
      }
      Session& s = it->second;
      if (frame.seq == 0) s.seen_alarm_seqs.clear();  // fresh power cycle
      s.remote = remote;
      s.registered_at = now;
      touch(s, frame.seq, now, out);
      fail_outstanding(id, now);
      out.push_back(action::SendToTe{id, Frame{id, frame.seq, m::RegisterAck{}}});
      flush_store_and_forward(id, now, out);
      return out;
    }

    auto it = sessions_.find(id);
    if (it == sessions_.end()) {
      ++counters_.unregistered_frames;
      return out;
    }
    Session& s = it->second;
    touch(s, frame.seq, now, out);

    std::visit(protocol::overloaded{
                   [&](const m::Heartbeat& h) {
                     s.last_status = h.status;
                     ++counters_.heartbeats_acked;
                     out.push_back(action::SendToTe{id, Frame{id, frame.seq, m::HeartbeatAck{}}});
                   },
                   [&](const m::Alarm& a) {
                     if (s.seen_alarm_seqs.insert(frame.seq).second) {
                       AlarmEvent ev{++last_event_id_, id,  a.zone,      a.alarm_type,
                                     a.ts,            now, frame.seq, std::nullopt, std::nullopt};
                       events_.push_back(ev);
                       event_index_[ev.event_id] = events_.size() - 1;
                       append_event_log(ev);
                       out.push_back(action::Publish{ev});
                     } else {
                       ++counters_.duplicate_alarms;
                     }
                     out.push_back(action::SendToTe{id, Frame{id, frame.seq, m::AlarmAck{}}});
                   },
                   [&](const m::ControlAck& c) {
                     if (auto req = pop_outstanding(id, RequestKind::Control)) {
                       RequestOutcome o{req->id, id, RequestKind::Control, RequestStatus::Ok, c.result,
                                        std::nullopt, now};
                       complete(*req, o);
                     }
                   },
                   [&](const m::StatusReport& r) {
                     s.last_status = r.status;
                     if (auto req = pop_outstanding(id, RequestKind::StatusQuery)) {
                       RequestOutcome o{req->id, id, RequestKind::StatusQuery, RequestStatus::Ok, 0, r, now};
                       complete(*req, o);
                     }
                   },
                   [](const auto&) {},
               },
               frame.message);
    return out;
  }

  // Flips silent sessions Offline exactly once; also expires operator requests.
  std::vector<TeId> sweep_offline(Millis now) {
    std::vector<TeId> flipped;
    for (auto& [id, s] : sessions_) {
      if (s.state == SessionState::Online && now - s.last_seen > cfg_.offline_threshold_s * 1000) {
        s.state = SessionState::Offline;
        flipped.push_back(id);
      }
    }
    std::sort(flipped.begin(), flipped.end());
    Actions out;
    for (TeId id : flipped) out.push_back(action::Publish{StateChange{id, SessionState::Offline, now}});
    execute(out);
    expire_requests(now);
    return flipped;
  }

  // --- operator API -----------------------------------------------------------

  std::vector<TeSummary> list_tes() const {
    std::vector<TeSummary> out;
    out.reserve(sessions_.size());
    for (const auto& [id, s] : sessions_) {
      std::optional<bool> armed;
      if (s.last_status) armed = s.last_status->armed;
      out.push_back(TeSummary{id, s.state, s.last_seen, armed});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.te_id < b.te_id; });
    return out;
  }

  Expected<ControlTicket, HmiError> send_control(TeId te_id, protocol::ControlCmd cmd, std::string op,
                                                 Millis now, RequestCallback done = {}) {
    auto it = sessions_.find(te_id);
    if (it == sessions_.end()) return HmiError::UnknownTe;
    Request req{++last_request_id_, te_id, RequestKind::Control, cmd, std::move(op), now, std::nullopt,
                false, std::move(done)};
    const bool offline = it->second.state == SessionState::Offline;
    if (offline) {
      store_forward_[te_id].push_back(std::move(req));
      return ControlTicket{last_request_id_, true};
    }
    Actions out;
    transmit(std::move(req), now, out);
    execute(out);
    return ControlTicket{last_request_id_, false};
  }

  Expected<std::uint64_t, HmiError> query_status(TeId te_id, Millis now, RequestCallback done = {}) {
    auto it = sessions_.find(te_id);
    if (it == sessions_.end()) return HmiError::UnknownTe;
    if (it->second.state == SessionState::Offline) return HmiError::TeOffline;
    Request req{++last_request_id_, te_id, RequestKind::StatusQuery, {}, {}, now, std::nullopt, false,
                std::move(done)};
    Actions out;
    transmit(std::move(req), now, out);
    execute(out);
    return last_request_id_;
  }

  // First operator wins; later acks return the event unchanged.
  Expected<AlarmEvent, HmiError> ack_alarm(std::uint64_t event_id, const std::string& op, Millis now) {
    auto it = event_index_.find(event_id);
    if (it == event_index_.end()) return HmiError::UnknownEvent;
    auto& ev = events_[it->second];
    if (!ev.acked_by) {
      ev.acked_by = op;
      ev.acked_at = now;
    }
    return ev;
  }

  std::vector<AlarmEvent> events_since(std::uint64_t since) const {
    std::vector<AlarmEvent> out;
    for (const auto& ev : events_) {
      if (ev.event_id > since) out.push_back(ev);
    }
    return out;
  }

  std::size_t outstanding_requests() const {
    std::size_t n = 0;
    for (const auto& [id, q] : outstanding_) n += q.size();
    for (const auto& [id, q] : store_forward_) n += q.size();
    return n;
  }

  std::uint64_t last_served_round(TeId id) const {
    auto it = last_served_round_.find(id);
    return it == last_served_round_.end() ? 0 : it->second;
  }

  void execute(const Actions& actions) {
    for (const auto& a : actions) {
      std::visit(protocol::overloaded{
                     [&](const action::SendToTe& s) {
                       if (downlink_) downlink_(s.te_id, s.frame);
                     },
                     [&](const action::Publish& p) {
                       stream_log_.push_back(p.record);
                       if (publisher_) publisher_(p.record);
                       hub_.publish(p.record);
                     },
                 },
                 a);
    }
  }

 private:
  struct Inbound {
    std::string remote;
    Frame frame;
    Millis arrived_at = 0;
  };

  struct Request {
    std::uint64_t id = 0;
    TeId te_id = 0;
    RequestKind kind = RequestKind::Control;
    protocol::ControlCmd cmd;
    std::string op;
    Millis created_at = 0;
    std::optional<Millis> sent_at;
    bool timed_out = false;
    RequestCallback done;
  };

  void touch(Session& s, std::uint16_t seq, Millis now, Actions& out) {
    if (s.frames_in > 0 && seq != s.next_expected_seq) ++s.seq_gaps;
    s.next_expected_seq = static_cast<std::uint16_t>(seq + 1);
    ++s.frames_in;
    s.last_seen = now;
    if (s.state == SessionState::Offline) {
      s.state = SessionState::Online;
      out.push_back(action::Publish{StateChange{s.te_id, SessionState::Online, now}});
    }
  }

  void transmit(Request req, Millis now, Actions& out) {
    req.sent_at = now;
    Frame f{req.te_id, static_cast<std::uint16_t>(req.id), protocol::msg::StatusQuery{}};
    if (req.kind == RequestKind::Control) f.message = protocol::msg::Control{req.cmd};
    out.push_back(action::SendToTe{req.te_id, f});
    outstanding_[req.te_id].push_back(std::move(req));
  }

  void flush_store_and_forward(TeId id, Millis now, Actions& out) {
    auto it = store_forward_.find(id);
    if (it == store_forward_.end()) return;
    auto pending = std::move(it->second);
    store_forward_.erase(it);
    for (auto& r : pending) transmit(std::move(r), now, out);
  }

  // Replies come back in request order on one connection.
  std::optional<Request> pop_outstanding(TeId id, RequestKind kind) {
    auto it = outstanding_.find(id);
    if (it == outstanding_.end()) return std::nullopt;
    auto& q = it->second;
    auto pos = std::find_if(q.begin(), q.end(), [&](const Request& r) { return r.kind == kind; });
    if (pos == q.end()) return std::nullopt;
    Request r = std::move(*pos);
    q.erase(pos);
    if (q.empty()) outstanding_.erase(it);
    return r;
  }

  void complete(Request& req, const RequestOutcome& o) {
    if (req.timed_out) return;  // caller already told
    if (req.done) req.done(o);
  }

  // A new connection means replies to earlier requests can no longer arrive.
  void fail_outstanding(TeId id, Millis now) {
    auto it = outstanding_.find(id);
    if (it == outstanding_.end()) return;
    auto q = std::move(it->second);
    outstanding_.erase(it);
    for (auto& r : q) {
      complete(r, RequestOutcome{r.id, id, r.kind, RequestStatus::Lost, 0, std::nullopt, now});
    }
  }

  void expire_requests(Millis now) {
    for (auto& [id, q] : outstanding_) {
      for (auto& r : q) {
        if (!r.timed_out && r.sent_at && now - *r.sent_at >= cfg_.request_timeout_ms) {
          if (r.done) r.done(RequestOutcome{r.id, id, r.kind, RequestStatus::TimedOut, 0, std::nullopt, now});
          r.timed_out = true;
        }
      }
    }
  }

  void append_event_log(const AlarmEvent& ev) {
    if (!event_log_.is_open()) return;
    event_log_ << "{\"event_id\":" << ev.event_id << ",\"te_id\":" << ev.te_id << ",\"zone\":" << int{ev.zone}
               << ",\"alarm_type\":\"" << protocol::alarm_type_name(ev.alarm_type) << "\",\"te_timestamp\":"
               << ev.te_timestamp << ",\"received_at\":" << ev.received_at << "}\n";
    event_log_.flush();
  }

  HmiConfig cfg_;
  sched::TaskQueue<TeId> sched_;
  std::map<TeId, Session> sessions_;
  std::unordered_map<TeId, std::deque<Inbound>> inbound_;
  std::unordered_map<TeId, std::uint64_t> last_served_round_;
  std::vector<AlarmEvent> events_;
  std::unordered_map<std::uint64_t, std::size_t> event_index_;
  std::vector<StreamRecord> stream_log_;
  std::map<TeId, std::deque<Request>> outstanding_;
  std::map<TeId, std::vector<Request>> store_forward_;
  std::uint64_t last_event_id_ = 0;
  std::uint64_t last_request_id_ = 0;
  Downlink downlink_;
  Publisher publisher_;
  StreamHub hub_;
  HmiCounters counters_;
  std::ofstream event_log_;
};

}  // namespace cpas::hmi

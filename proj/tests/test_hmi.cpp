#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "cpas/hmi.hpp"

using namespace cpas;
using namespace cpas::hmi;
namespace msg = cpas::protocol::msg;
using namespace std::chrono_literals;

namespace {

struct Sent {
  TeId te;
  Frame frame;
};

struct Fixture {
  Hmi hmi;
  std::vector<Sent> sent;

  explicit Fixture(HmiConfig c = {}) : hmi(std::move(c)) {
    hmi.set_downlink([this](TeId te, const Frame& f) { sent.push_back({te, f}); });
  }

  void feed(TeId te, std::uint16_t seq, protocol::Message m, Millis now) {
    hmi.execute(hmi.on_frame("10.0.0." + std::to_string(te), Frame{te, seq, std::move(m)}, now));
  }
  void reg(TeId te, Millis now, std::uint16_t seq = 0) { feed(te, seq, msg::Register{1, 8}, now); }

  template <typename M>
  std::size_t sent_count(TeId te) const {
    std::size_t n = 0;
    for (const auto& s : sent) n += s.te == te && std::holds_alternative<M>(s.frame.message);
    return n;
  }
};

const StateChange* as_change(const StreamRecord& r) { return std::get_if<StateChange>(&r); }

}  // namespace

TEST(HmiSession, RegisterOpensSessionAndAcks) {
  Fixture f;
  f.reg(5, 1000, 0);
  ASSERT_NE(f.hmi.session(5), nullptr);
  EXPECT_EQ(f.hmi.session(5)->state, SessionState::Online);
  EXPECT_EQ(f.hmi.session(5)->remote, "10.0.0.5");
  ASSERT_EQ(f.sent.size(), 1u);
  EXPECT_TRUE(std::holds_alternative<msg::RegisterAck>(f.sent[0].frame.message));
  EXPECT_EQ(f.sent[0].frame.seq, 0);
  ASSERT_EQ(f.hmi.stream_log().size(), 1u);
  const auto* c = as_change(f.hmi.stream_log()[0]);
  ASSERT_NE(c, nullptr);
  EXPECT_EQ(c->state, SessionState::Online);
}

TEST(HmiSession, FramesBeforeRegisterAreDropped) {
  Fixture f;
  f.feed(9, 3, msg::Heartbeat{{}}, 0);
  EXPECT_TRUE(f.sent.empty());
  EXPECT_EQ(f.hmi.counters().unregistered_frames, 1u);
  EXPECT_EQ(f.hmi.session_count(), 0u);
}

TEST(HmiSession, HeartbeatAckedWithSameSeq) {
  Fixture f;
  f.reg(5, 0);
  f.feed(5, 1, msg::Heartbeat{{true, false, 12}}, 60000);
  ASSERT_EQ(f.sent.size(), 2u);
  EXPECT_TRUE(std::holds_alternative<msg::HeartbeatAck>(f.sent[1].frame.message));
  EXPECT_EQ(f.sent[1].frame.seq, 1);
  const auto tes = f.hmi.list_tes();
  ASSERT_EQ(tes.size(), 1u);
  EXPECT_EQ(tes[0].armed, true);
  EXPECT_EQ(tes[0].last_seen, 60000);
  EXPECT_EQ(f.hmi.session(5)->seq_gaps, 0u);
  f.feed(5, 7, msg::Heartbeat{{}}, 61000);
  EXPECT_EQ(f.hmi.session(5)->seq_gaps, 1u);
}

// Offline once silence exceeds the threshold: 180 s of silence is still online.
TEST(HmiSweep, ThresholdBoundary) {
  Fixture f;
  f.reg(5, 1000);
  EXPECT_TRUE(f.hmi.sweep_offline(181000).empty());
  EXPECT_EQ(f.hmi.session(5)->state, SessionState::Online);
  EXPECT_EQ(f.hmi.sweep_offline(181001), std::vector<TeId>{5});
  EXPECT_EQ(f.hmi.session(5)->state, SessionState::Offline);
  EXPECT_TRUE(f.hmi.sweep_offline(400000).empty());
  std::size_t offline_changes = 0;
  for (const auto& r : f.hmi.stream_log()) {
    if (auto* c = as_change(r); c && c->state == SessionState::Offline) ++offline_changes;
  }
  EXPECT_EQ(offline_changes, 1u);

  f.feed(5, 1, msg::Heartbeat{{}}, 500000);
  EXPECT_EQ(f.hmi.session(5)->state, SessionState::Online);
  const auto* back = as_change(f.hmi.stream_log().back());
  ASSERT_NE(back, nullptr);
  EXPECT_EQ(back->state, SessionState::Online);
  EXPECT_EQ(back->at, 500000);
}

TEST(HmiSweep, OnlySilentSessionsFlip) {
  Fixture f;
  for (TeId te = 1; te <= 10; ++te) f.reg(te, 0);
  for (TeId te = 1; te <= 10; te += 2) f.feed(te, 1, msg::Heartbeat{{}}, 120000);
  EXPECT_EQ(f.hmi.sweep_offline(200000), (std::vector<TeId>{2, 4, 6, 8, 10}));
  EXPECT_EQ(f.hmi.online_count(), 5u);
}

TEST(HmiAlarm, DuplicateSeqLoggedOnceAckedTwice) {
  Fixture f;
  f.reg(5, 0);
  f.feed(5, 1, msg::Alarm{2, protocol::AlarmType::Smoke, 77}, 1000);
  f.feed(5, 1, msg::Alarm{2, protocol::AlarmType::Smoke, 77}, 6000);
  ASSERT_EQ(f.hmi.events().size(), 1u);
  const auto& ev = f.hmi.events()[0];
  EXPECT_EQ(ev.event_id, 1u);
  EXPECT_EQ(ev.zone, 2);
  EXPECT_EQ(ev.te_timestamp, 77u);
  EXPECT_EQ(ev.received_at, 1000);
  EXPECT_EQ(f.sent_count<msg::AlarmAck>(5), 2u);
  EXPECT_EQ(f.hmi.counters().duplicate_alarms, 1u);

  // A power cycle restarts seq at 0 and the same seq is a new alarm.
  f.reg(5, 10000, 0);
  f.feed(5, 1, msg::Alarm{2, protocol::AlarmType::Smoke, 90}, 11000);
  EXPECT_EQ(f.hmi.events().size(), 2u);
}

TEST(HmiAlarm, AckFirstOperatorWins) {
  Fixture f;
  f.reg(5, 0);
  f.feed(5, 1, msg::Alarm{1, protocol::AlarmType::IR, 1}, 100);
  auto a = f.hmi.ack_alarm(1, "alice", 200);
  ASSERT_TRUE(a);
  EXPECT_EQ(a->acked_by, "alice");
  auto b = f.hmi.ack_alarm(1, "bob", 300);
  ASSERT_TRUE(b);
  EXPECT_EQ(b->acked_by, "alice");
  EXPECT_EQ(b->acked_at, 200);
  EXPECT_EQ(f.hmi.ack_alarm(99, "bob", 300).error(), HmiError::UnknownEvent);
}

TEST(HmiAlarm, EventsSince) {
  Fixture f;
  f.reg(5, 0);
  for (std::uint16_t s = 1; s <= 5; ++s) f.feed(5, s, msg::Alarm{1, protocol::AlarmType::IR, s}, s * 10);
  EXPECT_EQ(f.hmi.events_since(0).size(), 5u);
  const auto tail = f.hmi.events_since(3);
  ASSERT_EQ(tail.size(), 2u);
  EXPECT_EQ(tail[0].event_id, 4u);
  EXPECT_TRUE(f.hmi.events_since(5).empty());
}

TEST(HmiAlarm, EventLogWritesJsonLines) {
  const auto path = std::filesystem::temp_directory_path() / "cpas_hmi_events_test.jsonl";
  std::filesystem::remove(path);
  {
    HmiConfig c;
    c.event_log_path = path.string();
    Fixture f(c);
    f.reg(5, 0);
    f.feed(5, 1, msg::Alarm{3, protocol::AlarmType::Temperature, 9}, 100);
  }
  std::ifstream in(path);
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  EXPECT_EQ(line,
            R"({"event_id":1,"te_id":5,"zone":3,"alarm_type":"TEMP","te_timestamp":9,"received_at":100})");
  std::filesystem::remove(path);
}

TEST(HmiControl, UnknownTe) {
  Fixture f;
  auto r = f.hmi.send_control(3, {protocol::ControlCmd::kArm}, "op", 0);
  ASSERT_FALSE(r);
  EXPECT_EQ(r.error(), HmiError::UnknownTe);
  EXPECT_EQ(f.hmi.query_status(3, 0).error(), HmiError::UnknownTe);
}

TEST(HmiControl, RoundTripToOnlineTe) {
  Fixture f;
  f.reg(5, 0);
  std::vector<RequestOutcome> done;
  auto t = f.hmi.send_control(5, {protocol::ControlCmd::kSirenOn}, "op", 100,
                              [&](const RequestOutcome& o) { done.push_back(o); });
  ASSERT_TRUE(t);
  EXPECT_FALSE(t->te_offline);
  ASSERT_EQ(f.sent_count<msg::Control>(5), 1u);
  EXPECT_EQ(std::get<msg::Control>(f.sent.back().frame.message).cmd.code, protocol::ControlCmd::kSirenOn);
  EXPECT_EQ(f.hmi.outstanding_requests(), 1u);
  f.feed(5, 1, msg::ControlAck{protocol::kControlOk}, 900);
  ASSERT_EQ(done.size(), 1u);
  EXPECT_EQ(done[0].status, RequestStatus::Ok);
  EXPECT_EQ(done[0].request_id, t->request_id);
  EXPECT_EQ(done[0].completed_at, 900);
  EXPECT_EQ(f.hmi.outstanding_requests(), 0u);
}

TEST(HmiControl, RepliesMatchedInOrder) {
  Fixture f;
  f.reg(5, 0);
  std::vector<std::uint64_t> order;
  auto cb = [&](const RequestOutcome& o) { order.push_back(o.request_id); };
  const auto a = f.hmi.send_control(5, {protocol::ControlCmd::kArm}, "op", 1, cb)->request_id;
  const auto q = *f.hmi.query_status(5, 2, cb);
  const auto b = f.hmi.send_control(5, {protocol::ControlCmd::kDisarm}, "op", 3, cb)->request_id;
  f.feed(5, 1, msg::ControlAck{0}, 10);
  f.feed(5, 2, msg::StatusReport{{true, false, 15}, 5}, 11);
  f.feed(5, 3, msg::ControlAck{0}, 12);
  EXPECT_EQ(order, (std::vector<std::uint64_t>{a, q, b}));
}

TEST(HmiControl, StoreAndForwardToOfflineTe) {
  Fixture f;
  f.reg(5, 0);
  f.hmi.sweep_offline(200000);
  ASSERT_EQ(f.hmi.session(5)->state, SessionState::Offline);
  EXPECT_EQ(f.hmi.query_status(5, 200000).error(), HmiError::TeOffline);
  std::optional<RequestOutcome> done;
  auto t = f.hmi.send_control(5, {protocol::ControlCmd::kArm}, "op", 200000,
                              [&](const RequestOutcome& o) { done = o; });
  ASSERT_TRUE(t);
  EXPECT_TRUE(t->te_offline);
  EXPECT_EQ(f.sent_count<msg::Control>(5), 0u);
  EXPECT_EQ(f.hmi.outstanding_requests(), 1u);

  // Timeouts count from transmission, not from queueing.
  f.hmi.sweep_offline(900000);
  EXPECT_FALSE(done);

  f.sent.clear();
  f.reg(5, 1'000'000, 0);
  ASSERT_EQ(f.sent.size(), 2u);
  EXPECT_TRUE(std::holds_alternative<msg::RegisterAck>(f.sent[0].frame.message));
  EXPECT_TRUE(std::holds_alternative<msg::Control>(f.sent[1].frame.message));
  f.feed(5, 1, msg::ControlAck{0}, 1'000'500);
  ASSERT_TRUE(done);
  EXPECT_EQ(done->status, RequestStatus::Ok);
}

TEST(HmiControl, TimeoutReportedOnceLateReplyIgnored) {
  Fixture f;
  f.reg(5, 0);
  std::vector<RequestOutcome> done;
  f.hmi.query_status(5, 1000, [&](const RequestOutcome& o) { done.push_back(o); });
  f.hmi.sweep_offline(10999);
  EXPECT_TRUE(done.empty());
  f.hmi.sweep_offline(11000);
  ASSERT_EQ(done.size(), 1u);
  EXPECT_EQ(done[0].status, RequestStatus::TimedOut);
  f.hmi.sweep_offline(12000);
  f.feed(5, 1, msg::StatusReport{{}, 1}, 13000);
  EXPECT_EQ(done.size(), 1u);
}

TEST(HmiControl, ReregistrationLosesOutstanding) {
  Fixture f;
  f.reg(5, 0);
  std::optional<RequestOutcome> done;
  f.hmi.send_control(5, {protocol::ControlCmd::kReboot}, "op", 10, [&](const RequestOutcome& o) { done = o; });
  f.reg(5, 5000, 0);
  ASSERT_TRUE(done);
  EXPECT_EQ(done->status, RequestStatus::Lost);
  EXPECT_EQ(f.hmi.outstanding_requests(), 0u);
}

TEST(HmiCapacity, RejectsBeyondMaxSessions) {
  HmiConfig c;
  c.max_sessions = 2000;
  Fixture f(c);
  for (TeId te = 1; te <= 2001; ++te) f.reg(te, 0);
  EXPECT_EQ(f.hmi.session_count(), 2000u);
  EXPECT_EQ(f.hmi.counters().rejected_registrations, 1u);
  EXPECT_EQ(f.hmi.session(2001), nullptr);
}

// 2000 quiet TEs plus one flooding TE: every quiet TE is served within the
// rounds needed to visit each queue once, regardless of the flood.
TEST(HmiPump, FairUnderFlood) {
  Fixture f;
  constexpr TeId kQuiet = 2000;
  constexpr TeId kFlood = 9999;
  for (TeId te = 1; te <= kQuiet; ++te) f.reg(te, 0);
  f.reg(kFlood, 0);
  f.sent.clear();
  for (std::uint16_t s = 1; s <= 5000; ++s) f.hmi.enqueue_inbound("x", Frame{kFlood, s, msg::Heartbeat{{}}}, 1);
  for (TeId te = 1; te <= kQuiet; ++te) f.hmi.enqueue_inbound("x", Frame{te, 1, msg::Heartbeat{{}}}, 1);
  const std::uint64_t start = f.hmi.counters().pump_rounds;
  while (f.hmi.has_pending()) f.hmi.pump(2);
  const auto r = f.hmi.config().round_budget;
  const std::uint64_t bound = (kQuiet + 1 + static_cast<std::uint64_t>(r) - 1) / static_cast<std::uint64_t>(r) + 1;
  for (TeId te = 1; te <= kQuiet; ++te) {
    ASSERT_GT(f.hmi.last_served_round(te), start) << te;
    ASSERT_LE(f.hmi.last_served_round(te) - start, bound) << te;
  }
  EXPECT_EQ(f.sent.size(), 5000u + kQuiet);
  EXPECT_EQ(f.hmi.pending_frames(), 0u);
}

TEST(HmiPump, RoundBudgetCapsWork) {
  Fixture f;
  f.reg(1, 0);
  for (std::uint16_t s = 1; s <= 250; ++s) f.hmi.enqueue_inbound("x", Frame{1, s, msg::Heartbeat{{}}}, 1);
  EXPECT_EQ(f.hmi.pump(2), 100u);
  EXPECT_EQ(f.hmi.pump(3), 100u);
  EXPECT_EQ(f.hmi.pump(4), 50u);
  EXPECT_EQ(f.hmi.pump(5), 0u);
}

TEST(HmiStream, SubscribersSeeRecordsInOrder) {
  StreamHub hub;
  auto a = hub.subscribe();
  auto b = hub.subscribe();
  auto gone = hub.subscribe();
  hub.unsubscribe(gone);
  EXPECT_EQ(hub.subscribers(), 2u);
  constexpr int kRecords = 500;
  std::vector<std::vector<TeId>> got(2);
  std::vector<std::thread> readers;
  for (int i = 0; i < 2; ++i) {
    readers.emplace_back([&, i] {
      auto sub = i == 0 ? a : b;
      while (got[i].size() < kRecords) {
        auto r = sub->next(2s);
        if (!r) break;
        got[i].push_back(std::get<StateChange>(*r).te_id);
      }
    });
  }
  for (int k = 0; k < kRecords; ++k) hub.publish(StateChange{static_cast<TeId>(k), SessionState::Online, k});
  for (auto& t : readers) t.join();
  for (const auto& g : got) {
    ASSERT_EQ(g.size(), static_cast<std::size_t>(kRecords));
    for (int k = 0; k < kRecords; ++k) ASSERT_EQ(g[k], static_cast<TeId>(k));
  }
  EXPECT_FALSE(gone->next(0ms));
}

TEST(HmiStream, CloseWakesWaiters) {
  StreamHub hub;
  auto s = hub.subscribe();
  std::thread t([&] {
    std::this_thread::sleep_for(50ms);
    hub.close_all();
  });
  const auto start = std::chrono::steady_clock::now();
  EXPECT_FALSE(s->next(10s));
  EXPECT_LT(std::chrono::steady_clock::now() - start, 5s);
  EXPECT_TRUE(s->closed());
  t.join();
}

TEST(HmiStream, HmiPublishesAlarmsToHub) {
  Fixture f;
  auto sub = f.hmi.hub().subscribe();
  f.reg(5, 0);
  f.feed(5, 1, msg::Alarm{1, protocol::AlarmType::IR, 4}, 10);
  auto first = sub->next(0ms);
  ASSERT_TRUE(first);
  EXPECT_TRUE(std::holds_alternative<StateChange>(*first));
  auto second = sub->next(0ms);
  ASSERT_TRUE(second);
  EXPECT_EQ(std::get<AlarmEvent>(*second).te_timestamp, 4u);
}

TEST(HmiConfigTest, Validation) {
  HmiConfig c;
  EXPECT_NO_THROW(c.validate(60));
  c.offline_threshold_s = 119;
  EXPECT_THROW(c.validate(60), std::invalid_argument);
  c = {};
  c.max_sessions = 1999;
  EXPECT_THROW(c.validate(60), std::invalid_argument);
}

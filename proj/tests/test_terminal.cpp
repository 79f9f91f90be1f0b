#include <gtest/gtest.h>

#include <functional>
#include <map>

#include "cpas/rng.hpp"
#include "cpas/terminal.hpp"

using namespace cpas;
using namespace cpas::terminal;
namespace msg = cpas::protocol::msg;

namespace {

constexpr TeId kTe = 42;
const std::string kPhone = "+4915100000042";

TeConfig config() {
  TeConfig c;
  c.te_id = kTe;
  c.user_phone = kPhone;
  return c;
}

template <typename M>
const M* frame_of(const Action& a) {
  const auto* s = std::get_if<action::SendFrame>(&a);
  return s ? std::get_if<M>(&s->message) : nullptr;
}

template <typename A>
std::size_t count(const Actions& acts) {
  std::size_t n = 0;
  for (const auto& a : acts) n += std::holds_alternative<A>(a);
  return n;
}

protocol::Frame from_hmi(protocol::Message m, std::uint16_t seq = 0) { return {kTe, seq, std::move(m)}; }

// Plays the host side: answers every action immediately. Send outcomes come
// from `outcome`; the HMI acks whatever was delivered.
struct Driver {
  Terminal te;
  Millis now = 0;
  std::function<bool(const action::SendFrame&)> outcome = [](const action::SendFrame&) { return true; };
  bool hmi_acks_alarms = true;
  std::vector<action::SendFrame> attempts;
  std::vector<action::SendFrame> delivered;
  std::vector<action::SendSms> sms;
  std::size_t reconnects = 0;

  explicit Driver(TeConfig c = config()) : te(std::move(c)) {}

  void run(Actions acts) {
    std::deque<Action> work(acts.begin(), acts.end());
    while (!work.empty()) {
      auto a = std::move(work.front());
      work.pop_front();
      Actions next;
      if (std::holds_alternative<action::PowerOnModem>(a)) {
        next = te.on_modem_ready(now);
      } else if (std::holds_alternative<action::ToggleIgnition>(a)) {
        if (te.phase() == Phase::Reconnecting) next = te.on_modem_ready(now);
      } else if (std::holds_alternative<action::ConnectTcp>(a) || std::holds_alternative<action::Reconnect>(a)) {
        reconnects += std::holds_alternative<action::Reconnect>(a);
        next = te.on_connected(true, now);
      } else if (auto* s = std::get_if<action::SendSms>(&a)) {
        sms.push_back(*s);
      } else if (auto* f = std::get_if<action::SendFrame>(&a)) {
        attempts.push_back(*f);
        const bool ok = outcome(*f);
        next = te.on_send_result(ok, now);
        if (ok) {
          delivered.push_back(*f);
          Actions reply;
          if (std::holds_alternative<msg::Register>(f->message)) {
            reply = te.on_frame(from_hmi(msg::RegisterAck{}, f->seq), now);
          } else if (std::holds_alternative<msg::Heartbeat>(f->message)) {
            reply = te.on_frame(from_hmi(msg::HeartbeatAck{}, f->seq), now);
          } else if (std::holds_alternative<msg::Alarm>(f->message) && hmi_acks_alarms) {
            reply = te.on_frame(from_hmi(msg::AlarmAck{}, f->seq), now);
          }
          next.insert(next.end(), reply.begin(), reply.end());
        }
      }
      work.insert(work.end(), next.begin(), next.end());
    }
  }

  void boot() { run(te.power_on(now)); }

  void advance_to(Millis t) {
    while (auto d = te.next_deadline()) {
      if (*d > t) break;
      now = std::max(now, *d);
      run(te.on_timer(now));
    }
    now = t;
  }
};

}  // namespace

TEST(TerminalBoot, ReachesOnlineThroughRegister) {
  Terminal te(config());
  auto a = te.power_on(0);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_TRUE(std::holds_alternative<action::PowerOnModem>(a[0]));
  a = te.on_modem_ready(2121);
  ASSERT_EQ(count<action::ConnectTcp>(a), 1u);
  EXPECT_EQ(te.phase(), Phase::Connecting);
  a = te.on_connected(true, 2200);
  EXPECT_EQ(te.phase(), Phase::Registering);
  ASSERT_EQ(a.size(), 1u);
  const auto* reg = frame_of<msg::Register>(a[0]);
  ASSERT_NE(reg, nullptr);
  EXPECT_EQ(reg->fw_version, 1);
  EXPECT_EQ(reg->zone_count, 8);
  EXPECT_TRUE(te.on_send_result(true, 2300).empty());
  te.on_frame(from_hmi(msg::RegisterAck{}), 2400);
  EXPECT_EQ(te.phase(), Phase::Online);
  EXPECT_EQ(te.last_heartbeat_at(), 2400);
}

TEST(TerminalBoot, FailedConnectRetriesAfterDelay) {
  Terminal te(config());
  te.power_on(0);
  te.on_modem_ready(2000);
  EXPECT_TRUE(te.on_connected(false, 2100).empty());
  EXPECT_EQ(te.next_deadline(), 4100);
  EXPECT_TRUE(te.on_timer(4099).empty());
  EXPECT_EQ(count<action::ConnectTcp>(te.on_timer(4100)), 1u);
}

TEST(TerminalBoot, RegisterResentWhenUnanswered) {
  Terminal te(config());
  te.power_on(0);
  te.on_modem_ready(2000);
  te.on_connected(true, 2000);
  te.on_send_result(true, 2010);
  EXPECT_TRUE(te.on_timer(7009).empty());
  auto a = te.on_timer(7010);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_NE(frame_of<msg::Register>(a[0]), nullptr);
}

TEST(TerminalHeartbeat, PeriodBoundary) {
  Driver d;
  d.boot();
  ASSERT_EQ(d.te.phase(), Phase::Online);
  const Millis online = d.te.last_heartbeat_at();
  EXPECT_EQ(d.te.next_deadline(), online + 60000);
  EXPECT_TRUE(d.te.on_timer(online + 59999).empty());
  auto a = d.te.on_timer(online + 60000);
  ASSERT_EQ(a.size(), 1u);
  const auto* hb = frame_of<msg::Heartbeat>(a[0]);
  ASSERT_NE(hb, nullptr);
  EXPECT_EQ(hb->status.battery, 15);
  EXPECT_FALSE(hb->status.armed);
}

TEST(TerminalHeartbeat, OnePerPeriodOverAnHour) {
  Driver d;
  d.boot();
  const Millis start = d.now;
  d.advance_to(start + 3600 * 1000);
  EXPECT_EQ(d.te.counters().heartbeats_sent, 60u);
  EXPECT_EQ(d.te.counters().heartbeat_acks, 60u);
  Millis prev = -1;
  for (const auto& f : d.delivered) {
    if (!std::holds_alternative<msg::Heartbeat>(f.message)) continue;
    if (prev >= 0) {
      EXPECT_GT(f.seq, prev);
    }
    prev = f.seq;
  }
}

// Failure n <= threshold retries the same frame after the delay; the failure
// that pushes n past the threshold disconnects and reconnects.
TEST(TerminalRetry, ThresholdCrossingReconnects) {
  Driver d;
  d.boot();
  Terminal& te = d.te;
  auto a = te.on_timer(d.te.last_heartbeat_at() + 60000);
  ASSERT_EQ(a.size(), 1u);
  const auto seq = std::get<action::SendFrame>(a[0]).seq;
  Millis t = te.last_heartbeat_at();
  for (int n = 1; n <= 3; ++n) {
    a = te.on_send_result(false, t);
    EXPECT_TRUE(a.empty()) << n;
    EXPECT_EQ(te.failure_count(), n);
    EXPECT_EQ(te.retry_at(), t + 2000);
    EXPECT_TRUE(te.on_timer(t + 1999).empty());
    t += 2000;
    a = te.on_timer(t);
    ASSERT_EQ(a.size(), 1u) << n;
    EXPECT_EQ(std::get<action::SendFrame>(a[0]).seq, seq);
  }
  a = te.on_send_result(false, t);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_TRUE(std::holds_alternative<action::Disconnect>(a[0]));
  EXPECT_TRUE(std::holds_alternative<action::Reconnect>(a[1]));
  EXPECT_EQ(te.failure_count(), 0);
  EXPECT_EQ(te.phase(), Phase::Reconnecting);
  EXPECT_EQ(te.counters().reconnects, 1u);

  // The pending heartbeat goes out again once registered.
  a = te.on_connected(true, t + 500);
  ASSERT_NE(frame_of<msg::Register>(a.at(0)), nullptr);
  te.on_send_result(true, t + 600);
  a = te.on_frame(from_hmi(msg::RegisterAck{}), t + 700);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(std::get<action::SendFrame>(a[0]).seq, seq);
}

TEST(TerminalRetry, SuccessResetsCounter) {
  Driver d;
  d.boot();
  Terminal& te = d.te;
  const Millis t = te.last_heartbeat_at() + 60000;
  te.on_timer(t);
  te.on_send_result(false, t);
  te.on_send_result(false, t);  // ignored: nothing in flight
  EXPECT_EQ(te.failure_count(), 1);
  te.on_timer(t + 2000);
  te.on_send_result(true, t + 2000);
  EXPECT_EQ(te.failure_count(), 0);
}

// Random failure patterns: reconnects happen exactly when a run of
// threshold + 1 consecutive failures completes.
TEST(TerminalRetry, RandomFailurePatternsMatchCounterModel) {
  std::size_t total = 0;
  for (int threshold : {1, 2, 3, 5}) {
    for (std::uint64_t seed = 1; seed <= 25; ++seed) {
      auto c = config();
      c.retry_threshold = threshold;
      Driver d(c);
      SplitMix64 rng(seed * 7919 + static_cast<std::uint64_t>(threshold));
      const double p_fail = 0.2 + 0.1 * static_cast<double>(seed % 6);
      int run = 0;
      std::size_t model_reconnects = 0;
      d.outcome = [&](const action::SendFrame&) {
        const bool ok = !rng.chance(p_fail);
        if (ok) {
          run = 0;
        } else if (++run > threshold) {
          run = 0;
          ++model_reconnects;
        }
        return ok;
      };
      d.boot();
      d.advance_to(d.now + 2 * 3600 * 1000);
      ASSERT_EQ(d.reconnects, model_reconnects) << "threshold " << threshold << " seed " << seed;
      ASSERT_EQ(d.te.counters().reconnects, model_reconnects);
      total += model_reconnects;
    }
  }
  EXPECT_GT(total, 100u);
}

TEST(TerminalSensor, ArmedIntrusionUsesBothChannels) {
  auto c = config();
  c.armed = true;
  c.clock_epoch_s = 1000;
  Driver d(c);
  d.hmi_acks_alarms = false;
  d.boot();
  d.now = 500'000;
  d.run(d.te.on_sensor({3, protocol::AlarmType::IR, 500'000}, d.now));
  ASSERT_EQ(d.sms.size(), 1u);
  EXPECT_EQ(d.sms[0].to, kPhone);
  EXPECT_EQ(d.sms[0].text, "ALARM ZONE 3 TYPE IR AT 1500");
  const auto* al = std::get_if<msg::Alarm>(&d.delivered.back().message);
  ASSERT_NE(al, nullptr);
  EXPECT_EQ(al->zone, 3);
  EXPECT_EQ(al->ts, 1500u);
  EXPECT_TRUE(d.te.alarm_active());
  EXPECT_EQ(d.te.unacked_alarms(), 1u);
}

TEST(TerminalSensor, DisarmedIntrusionIgnoredFireAlwaysAlarms) {
  Driver d;
  d.boot();
  EXPECT_TRUE(d.te.on_sensor({1, protocol::AlarmType::IR, 10}, 10).empty());
  auto a = d.te.on_sensor({2, protocol::AlarmType::Smoke, 20}, 20);
  EXPECT_EQ(count<action::SendSms>(a), 1u);
  EXPECT_EQ(count<action::SendFrame>(a), 1u);

  auto c = config();
  c.fire_sensors_always_alarm = false;
  Driver quiet(c);
  quiet.boot();
  EXPECT_TRUE(quiet.te.on_sensor({2, protocol::AlarmType::Temperature, 20}, 20).empty());
}

TEST(TerminalSensor, ChannelSwitches) {
  auto c = config();
  c.armed = true;
  c.alarm_via_sms = false;
  Driver d(c);
  d.boot();
  auto a = d.te.on_sensor({1, protocol::AlarmType::IR, 0}, 0);
  EXPECT_EQ(count<action::SendSms>(a), 0u);
  EXPECT_EQ(count<action::SendFrame>(a), 1u);

  c.alarm_via_sms = true;
  c.alarm_via_gprs = false;
  Driver g(c);
  g.boot();
  a = g.te.on_sensor({1, protocol::AlarmType::IR, 0}, 0);
  EXPECT_EQ(count<action::SendSms>(a), 1u);
  EXPECT_EQ(count<action::SendFrame>(a), 0u);
  EXPECT_EQ(g.te.unacked_alarms(), 0u);
}

TEST(TerminalSensor, AlarmBeforeOnlineIsHeldThenSent) {
  auto c = config();
  c.armed = true;
  Terminal te(c);
  te.power_on(0);
  auto a = te.on_sensor({4, protocol::AlarmType::IR, 100}, 100);
  EXPECT_EQ(count<action::SendFrame>(a), 0u);
  EXPECT_EQ(count<action::SendSms>(a), 1u);
  te.on_modem_ready(2000);
  te.on_connected(true, 2000);
  te.on_send_result(true, 2000);
  a = te.on_frame(from_hmi(msg::RegisterAck{}), 2100);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_NE(frame_of<msg::Alarm>(a[0]), nullptr);
}

TEST(TerminalAlarm, RetransmitsWithSameSeqUntilAcked) {
  auto c = config();
  c.armed = true;
  Driver d(c);
  d.hmi_acks_alarms = false;
  d.boot();
  const Millis t0 = d.now;
  d.run(d.te.on_sensor({1, protocol::AlarmType::IR, t0}, t0));
  const auto seq = *d.te.last_alarm_seq();
  d.advance_to(t0 + 4999);
  EXPECT_EQ(d.te.counters().alarm_retransmissions, 0u);
  d.advance_to(t0 + 5000);
  EXPECT_EQ(d.te.counters().alarm_retransmissions, 1u);
  std::size_t copies = 0;
  for (const auto& f : d.delivered) copies += std::holds_alternative<msg::Alarm>(f.message) && f.seq == seq;
  EXPECT_EQ(copies, 2u);
  d.te.on_frame(from_hmi(msg::AlarmAck{}, seq), d.now);
  EXPECT_EQ(d.te.unacked_alarms(), 0u);
  d.advance_to(t0 + 60000);
  EXPECT_EQ(d.te.counters().alarm_retransmissions, 1u);
}

TEST(TerminalAlarm, RetainedAcrossLinkLoss) {
  auto c = config();
  c.armed = true;
  Driver d(c);
  d.hmi_acks_alarms = false;
  d.boot();
  d.run(d.te.on_sensor({6, protocol::AlarmType::Smoke, d.now}, d.now));
  const auto seq = *d.te.last_alarm_seq();
  d.now += 1000;
  d.attempts.clear();
  d.hmi_acks_alarms = true;
  d.run(d.te.on_link_lost(d.now));
  EXPECT_EQ(d.te.phase(), Phase::Online);
  ASSERT_GE(d.attempts.size(), 2u);
  EXPECT_NE(std::get_if<msg::Register>(&d.attempts[0].message), nullptr);
  EXPECT_EQ(d.attempts[1].seq, seq);
  EXPECT_EQ(d.te.unacked_alarms(), 0u);
  EXPECT_EQ(d.te.counters().link_losses, 1u);
}

TEST(TerminalControl, CommandsAreAppliedAndAcked) {
  Driver d;
  d.boot();
  const std::vector<std::pair<std::uint8_t, std::uint8_t>> cmds = {
      {protocol::ControlCmd::kArm, protocol::kControlOk},
      {protocol::ControlCmd::kSirenOn, protocol::kControlOk},
      {0x09, protocol::kControlUnknown},
      {protocol::ControlCmd::kSirenOff, protocol::kControlOk},
      {protocol::ControlCmd::kDisarm, protocol::kControlOk}};
  std::vector<bool> armed, siren;
  for (auto [code, want] : cmds) {
    d.delivered.clear();
    d.run(d.te.on_frame(from_hmi(msg::Control{{code}}, 9), d.now));
    ASSERT_EQ(d.delivered.size(), 1u);
    const auto* ack = std::get_if<msg::ControlAck>(&d.delivered[0].message);
    ASSERT_NE(ack, nullptr);
    EXPECT_EQ(ack->result, want);
    armed.push_back(d.te.armed());
    siren.push_back(d.te.siren());
  }
  EXPECT_EQ(armed, (std::vector<bool>{true, true, true, true, false}));
  EXPECT_EQ(siren, (std::vector<bool>{false, true, true, false, false}));
}

TEST(TerminalControl, RebootAfterAckKeepsSeq) {
  Driver d;
  d.boot();
  const auto before = d.te.seq_counter();
  Actions a = d.te.on_frame(from_hmi(msg::Control{{protocol::ControlCmd::kReboot}}), d.now);
  ASSERT_EQ(a.size(), 1u);
  ASSERT_NE(frame_of<msg::ControlAck>(a[0]), nullptr);
  a = d.te.on_send_result(true, d.now);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_TRUE(std::holds_alternative<action::PowerOnModem>(a[0]));
  EXPECT_EQ(d.te.phase(), Phase::Boot);
  EXPECT_GT(d.te.seq_counter(), before);
}

TEST(TerminalStatus, QueryAnsweredWithStatusAndUptime) {
  auto c = config();
  c.battery = 11;
  Driver d(c);
  d.boot();
  d.now = 123'456;
  d.delivered.clear();
  d.run(d.te.on_frame(from_hmi(msg::StatusQuery{}), d.now));
  ASSERT_EQ(d.delivered.size(), 1u);
  const auto* r = std::get_if<msg::StatusReport>(&d.delivered[0].message);
  ASSERT_NE(r, nullptr);
  EXPECT_EQ(r->uptime_s, 123u);
  EXPECT_EQ(r->status.battery, 11);
}

TEST(TerminalFrames, OtherTerminalsFramesIgnored) {
  Driver d;
  d.boot();
  EXPECT_TRUE(d.te.on_frame({kTe + 1, 0, msg::Control{{protocol::ControlCmd::kArm}}}, d.now).empty());
  EXPECT_FALSE(d.te.armed());
}

TEST(TerminalSms, OnlyUserPhoneIsObeyed) {
  Driver d;
  d.boot();
  EXPECT_FALSE(d.te.handle_sms("ARM", "+490000", 0));
  EXPECT_FALSE(d.te.armed());
  EXPECT_FALSE(d.te.handle_sms("MAKE COFFEE", kPhone, 0));
  EXPECT_EQ(d.te.handle_sms("ARM", kPhone, 0), "OK ARMED");
  EXPECT_TRUE(d.te.armed());
  EXPECT_EQ(d.te.handle_sms("STATUS", kPhone, 0), "STATUS ARMED BAT 15");
  EXPECT_EQ(d.te.handle_sms("DISARM", kPhone, 0), "OK DISARMED");
  EXPECT_FALSE(d.te.armed());
}

TEST(TerminalSeq, NewFramesGetIncreasingSeq) {
  auto c = config();
  c.armed = true;
  Driver d(c);
  SplitMix64 rng(5);
  d.outcome = [&](const action::SendFrame&) { return !rng.chance(0.15); };
  d.boot();
  for (Millis t = 10'000; t < 1'800'000; t += 37'000) {
    d.advance_to(t);
    d.run(d.te.on_sensor({1, protocol::AlarmType::IR, t}, t));
    d.run(d.te.on_frame(from_hmi(msg::StatusQuery{}), t));
  }
  // First appearance of each seq is increasing; a repeated seq always carries the same message type.
  std::map<std::uint16_t, std::size_t> kind;
  int last_new = -1;
  for (const auto& f : d.attempts) {
    auto [it, fresh] = kind.emplace(f.seq, f.message.index());
    if (fresh) {
      EXPECT_GT(static_cast<int>(f.seq), last_new);
      last_new = f.seq;
    } else {
      EXPECT_EQ(it->second, f.message.index());
    }
  }
  EXPECT_GT(kind.size(), 100u);
}

TEST(TerminalConfigTest, Validation) {
  TeConfig c;
  EXPECT_NO_THROW(c.validate(300));
  c.heartbeat_period_s = 300;
  EXPECT_THROW(c.validate(300), std::invalid_argument);
  c = {};
  c.retry_threshold = 0;
  EXPECT_THROW(c.validate(300), std::invalid_argument);
  c = {};
  c.battery = 16;
  EXPECT_THROW(c.validate(300), std::invalid_argument);
}

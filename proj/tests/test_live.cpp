#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <thread>

#include "httplib.h"

#include "cpas/live.hpp"

using namespace cpas;
using namespace std::chrono_literals;
using live::Json;

namespace {

sim::Scenario scenario() {
  return sim::parse_scenario(R"({"schema": "cpas.scenario/1", "name": "live", "seed": 3,
                                 "duration_ms": 86400000, "te_count": 3})");
}

template <typename Pred>
bool eventually(Pred p, std::chrono::milliseconds limit = 5s) {
  const auto end = std::chrono::steady_clock::now() + limit;
  while (std::chrono::steady_clock::now() < end) {
    if (p()) return true;
    std::this_thread::sleep_for(10ms);
  }
  return p();
}

// At 1000 virtual ms per wall ms the TEs register within a few wall ms and
// the 180 s offline threshold passes in under 200 ms.
class LiveTest : public ::testing::Test {
 protected:
  virtual double speed() const { return 1000; }
  void SetUp() override {
    live::LiveOptions o;
    o.speed = speed();
    o.api_port = 0;
    o.te_port = 0;
    server_ = std::make_unique<live::LiveServer>(scenario(), o);
    server_->start();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", server_->api_port());
    client_->set_read_timeout(15, 0);
    ASSERT_TRUE(eventually([&] { return online() == 3; }));
  }
  void TearDown() override { server_->stop(); }

  std::size_t online() {
    auto r = client_->Get("/tes");
    if (!r || r->status != 200) return 0;
    std::size_t n = 0;
    for (const auto& t : Json::parse(r->body)) n += t["state"] == "online";
    return n;
  }

  std::unique_ptr<live::LiveServer> server_;
  std::unique_ptr<httplib::Client> client_;
};

// A real socket peer answers in wall time, so the 10 s request timeout needs
// a slower clock.
class LiveTcpTest : public LiveTest {
 protected:
  double speed() const override { return 10; }
};

int connect_to(int port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_port = htons(static_cast<std::uint16_t>(port));
  ::inet_pton(AF_INET, "127.0.0.1", &a.sin_addr);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&a), sizeof a) != 0) {
    ::close(fd);
    return -1;
  }
  timeval tv{5, 0};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  return fd;
}

void send_all(int fd, const std::vector<std::uint8_t>& b) {
  ASSERT_EQ(::send(fd, b.data(), b.size(), MSG_NOSIGNAL), static_cast<ssize_t>(b.size()));
}

std::optional<protocol::Frame> read_frame(int fd, protocol::FrameReader& reader) {
  while (true) {
    if (auto f = reader.next()) return f;
    std::uint8_t buf[512];
    const auto n = ::recv(fd, buf, sizeof buf, 0);
    if (n <= 0) return std::nullopt;
    reader.feed(std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)));
  }
}

}  // namespace

TEST_F(LiveTest, ListsTerminals) {
  auto r = client_->Get("/tes");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
  const auto j = Json::parse(r->body);
  ASSERT_EQ(j.size(), 3u);
  EXPECT_EQ(j[0]["te_id"], 1);
  // Unknown until the first heartbeat.
  EXPECT_TRUE(j[0]["armed"].is_null() || j[0]["armed"] == false);
}

TEST_F(LiveTest, ControlThenStatus) {
  auto r = client_->Post("/tes/2/control", R"({"cmd": "arm", "operator": "alice"})", "application/json");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200) << r->body;
  EXPECT_EQ(Json::parse(r->body)["result"], "ok");
  r = client_->Get("/tes/2/status");
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200) << r->body;
  const auto s = Json::parse(r->body);
  EXPECT_EQ(s["te_id"], 2);
  EXPECT_EQ(s["armed"], true);
  EXPECT_EQ(s["battery"], 15);
}

TEST_F(LiveTest, RequestErrors) {
  auto r = client_->Post("/tes/77/control", R"({"cmd": "arm"})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 404);
  EXPECT_EQ(Json::parse(r->body)["error"], "UnknownTe");
  r = client_->Post("/tes/1/control", R"({"cmd": "explode"})", "application/json");
  EXPECT_EQ(r->status, 400);
  r = client_->Post("/tes/1/control", "not json", "application/json");
  EXPECT_EQ(r->status, 400);
  r = client_->Get("/tes/77/status");
  EXPECT_EQ(r->status, 404);
  r = client_->Get("/events?since=abc");
  EXPECT_EQ(r->status, 400);
  r = client_->Post("/events/1/ack", R"({})", "application/json");
  EXPECT_EQ(r->status, 400);
  r = client_->Post("/events/9/ack", R"({"operator": "bob"})", "application/json");
  EXPECT_EQ(r->status, 404);
}

TEST_F(LiveTest, OfflineTerminal) {
  ASSERT_TRUE(server_->call([](sim::World& w) { return w.kill(3); }));
  ASSERT_TRUE(eventually([&] { return online() == 2; }));
  auto r = client_->Get("/tes/3/status");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 409);
  r = client_->Post("/tes/3/control", R"({"cmd": "siren_on"})", "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 202);
  EXPECT_EQ(Json::parse(r->body)["result"], "queued");
  // Delivered once the TE is back.
  ASSERT_TRUE(server_->call([](sim::World& w) { return w.revive(3); }));
  EXPECT_TRUE(eventually([&] { return server_->call([](sim::World& w) { return w.node_ptr(3)->te.siren(); }); }));
}

TEST_F(LiveTest, EventsAndAck) {
  server_->call([](sim::World& w) { return w.inject_alarm(1, 4, protocol::AlarmType::Smoke); });
  ASSERT_TRUE(eventually([&] {
    auto r = client_->Get("/events");
    return r && Json::parse(r->body).size() == 1;
  }));
  const auto ev = Json::parse(client_->Get("/events")->body)[0];
  EXPECT_EQ(ev["te_id"], 1);
  EXPECT_EQ(ev["zone"], 4);
  EXPECT_EQ(ev["alarm_type"], "SMOKE");
  const auto id = ev["event_id"].get<std::uint64_t>();
  EXPECT_TRUE(Json::parse(client_->Get("/events?since=" + std::to_string(id))->body).empty());

  auto r = client_->Post("/events/" + std::to_string(id) + "/ack", R"({"operator": "alice"})", "application/json");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(Json::parse(r->body)["acked_by"], "alice");
  r = client_->Post("/events/" + std::to_string(id) + "/ack", R"({"operator": "bob"})", "application/json");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(Json::parse(r->body)["acked_by"], "alice");
}

TEST_F(LiveTest, StreamDeliversAlarm) {
  httplib::Client sc("127.0.0.1", server_->api_port());
  sc.set_read_timeout(10, 0);
  std::mutex mu;
  std::string got;
  std::atomic<bool> done{false};
  std::atomic<bool> give_up{false};
  std::thread reader([&] {
    sc.Get("/stream", [&](const char* data, std::size_t len) {
      std::lock_guard lock(mu);
      got.append(data, len);
      const auto at = got.find("event: alarm\n");
      if (at != std::string::npos && got.find("\n\n", at) != std::string::npos) done = true;
      return !done && !give_up;
    });
  });
  ASSERT_TRUE(eventually([&] { return server_->call([](sim::World& w) { return w.hmi().hub().subscribers(); }) > 0; }));
  server_->call([](sim::World& w) { return w.inject_alarm(2, 1, protocol::AlarmType::Smoke); });
  const bool seen = eventually([&] { return done.load(); });
  give_up = true;
  reader.join();
  ASSERT_TRUE(seen) << got;
  const auto pos = got.find("event: alarm\ndata: ");
  ASSERT_NE(pos, std::string::npos) << got;
  const auto line_end = got.find('\n', pos + 19);
  const auto j = Json::parse(got.substr(pos + 19, line_end - pos - 19));
  EXPECT_EQ(j["event"]["te_id"], 2);
}

TEST_F(LiveTcpTest, RealTerminalOverTcp) {
  const int fd = connect_to(server_->te_port());
  ASSERT_GE(fd, 0);
  protocol::FrameReader reader;
  // Leading noise must not stop the stream.
  auto reg = protocol::encode_frame(protocol::msg::Register{2, 4}, 500, 0);
  std::vector<std::uint8_t> noisy = {0x00, 0xAA, 0x13};
  noisy.insert(noisy.end(), reg.begin(), reg.end());
  send_all(fd, noisy);
  auto f = read_frame(fd, reader);
  ASSERT_TRUE(f);
  EXPECT_EQ(f->te_id, 500u);
  EXPECT_TRUE(std::holds_alternative<protocol::msg::RegisterAck>(f->message));

  send_all(fd, protocol::encode_frame(protocol::msg::Heartbeat{{true, false, 9}}, 500, 1));
  f = read_frame(fd, reader);
  ASSERT_TRUE(f);
  EXPECT_TRUE(std::holds_alternative<protocol::msg::HeartbeatAck>(f->message));
  EXPECT_EQ(f->seq, 1);

  auto tes = Json::parse(client_->Get("/tes")->body);
  ASSERT_EQ(tes.size(), 4u);
  EXPECT_EQ(tes[3]["te_id"], 500);
  EXPECT_EQ(tes[3]["armed"], true);

  // Operator control reaches the socket; the reply completes the request.
  std::thread op([&] {
    auto r = client_->Post("/tes/500/control", R"({"cmd": "disarm"})", "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200) << r->body;
  });
  f = read_frame(fd, reader);
  ASSERT_TRUE(f);
  const auto* ctl = std::get_if<protocol::msg::Control>(&f->message);
  ASSERT_NE(ctl, nullptr);
  EXPECT_EQ(ctl->cmd.code, protocol::ControlCmd::kDisarm);
  send_all(fd, protocol::encode_frame(protocol::msg::ControlAck{protocol::kControlOk}, 500, 2));
  op.join();
  ::close(fd);
}

TEST(LiveServerPorts, BusyPortIsReported) {
  live::LiveOptions o;
  o.api_port = 0;
  o.te_port = 0;
  live::LiveServer a(scenario(), o);
  a.start();
  live::LiveOptions clash = o;
  clash.te_port = a.te_port();
  live::LiveServer b(scenario(), clash);
  EXPECT_THROW(b.start(), live::PortBindError);
  a.stop();
  EXPECT_THROW((live::LiveServer{scenario(), live::LiveOptions{0.0}}), std::invalid_argument);
}

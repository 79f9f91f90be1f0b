#pragma once

// Serve mode: the simulated world advanced against a scaled wall clock, with
// the HMI operator API over HTTP (JSON + server-sent events) and a TCP
// listener that speaks the binary TE framing. One sim thread owns the World;
// every other thread hands it closures through an ordered command queue.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "cpas/hmi.hpp"
#include "cpas/protocol.hpp"
#include "cpas/sim/world.hpp"

namespace cpas::live {

using Json = nlohmann::ordered_json;

class PortBindError : public std::runtime_error {
 public:
  PortBindError(const std::string& what, int port)
      : std::runtime_error("cannot bind " + what + " port " + std::to_string(port)), port_(port) {}
  int port() const noexcept { return port_; }

 private:
  int port_;
};

struct LiveOptions {
  double speed = 1.0;  // virtual ms per wall ms
  std::string host = "127.0.0.1";
  int api_port = 8080;  // 0 picks a free port
  int te_port = 7001;
  std::chrono::milliseconds tick{10};
};

inline Json to_json(const hmi::AlarmEvent& ev) {
  Json j;
  j["event_id"] = ev.event_id;
  j["te_id"] = ev.te_id;
  j["zone"] = ev.zone;
  j["alarm_type"] = protocol::alarm_type_name(ev.alarm_type);
  j["te_timestamp"] = ev.te_timestamp;
  j["received_at"] = ev.received_at;
  j["acked_by"] = ev.acked_by ? Json(*ev.acked_by) : Json(nullptr);
  j["acked_at"] = ev.acked_at ? Json(*ev.acked_at) : Json(nullptr);
  return j;
}

inline Json to_json(const hmi::StreamRecord& r) {
  if (const auto* ev = std::get_if<hmi::AlarmEvent>(&r)) return Json{{"kind", "alarm"}, {"event", to_json(*ev)}};
  const auto& sc = std::get<hmi::StateChange>(r);
  return Json{{"kind", "te_state_change"}, {"te_id", sc.te_id}, {"state", hmi::state_name(sc.state)}, {"at", sc.at}};
}

inline Json status_json(TeId id, const protocol::msg::StatusReport& r) {
  return Json{{"te_id", id},
              {"armed", r.status.armed},
              {"alarm_active", r.status.alarm_active},
              {"battery", r.status.battery},
              {"uptime_s", r.uptime_s}};
}

class LiveServer {
 public:
  using Command = std::function<void(sim::World&)>;

  LiveServer(sim::Scenario scenario, LiveOptions opts) : opts_(std::move(opts)), world_(std::move(scenario)) {
    if (!(opts_.speed > 0.0)) throw std::invalid_argument("speed must be > 0");
  }

  ~LiveServer() { stop(); }

  LiveServer(const LiveServer&) = delete;
  LiveServer& operator=(const LiveServer&) = delete;

  void start() {
    setup_routes();
    api_port_ = opts_.api_port == 0 ? http_.bind_to_any_port(opts_.host) : opts_.api_port;
    if (opts_.api_port != 0 && !http_.bind_to_port(opts_.host, opts_.api_port)) api_port_ = -1;
    if (api_port_ <= 0) throw PortBindError("api", opts_.api_port);
    te_port_ = open_te_listener();

    running_ = true;
    wall_start_ = std::chrono::steady_clock::now();
    sim_thread_ = std::thread([this] { sim_loop(); });
    http_thread_ = std::thread([this] { http_.listen_after_bind(); });
    accept_thread_ = std::thread([this] { accept_loop(); });
    http_.wait_until_ready();
  }

  void stop() {
    if (!running_.exchange(false)) return;
    world_.hmi().hub().close_all();
    http_.stop();
    if (listen_fd_ >= 0) {
      ::shutdown(listen_fd_, SHUT_RDWR);
      ::close(listen_fd_);
      listen_fd_ = -1;
    }
    {
      std::lock_guard lock(conn_mu_);
      for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
    }
    cv_.notify_all();
    if (http_thread_.joinable()) http_thread_.join();
    if (accept_thread_.joinable()) accept_thread_.join();
    if (sim_thread_.joinable()) sim_thread_.join();
    for (auto& t : conn_threads_) {
      if (t.joinable()) t.join();
    }
    // Anything queued after the loop exited still runs, so callers never hang.
    std::deque<Command> rest;
    {
      std::lock_guard lock(mu_);
      rest.swap(queue_);
    }
    for (auto& c : rest) c(world_);
  }

  bool running() const noexcept { return running_; }
  int api_port() const noexcept { return api_port_; }
  int te_port() const noexcept { return te_port_; }

  // Runs `cmd` on the sim thread, in submission order.
  void post(Command cmd) {
    {
      std::lock_guard lock(mu_);
      if (!running_) {
        cmd(world_);
        return;
      }
      queue_.push_back(std::move(cmd));
    }
    cv_.notify_all();
  }

  template <typename F>
  auto call(F&& f) -> decltype(f(std::declval<sim::World&>())) {
    using R = decltype(f(std::declval<sim::World&>()));
    auto p = std::make_shared<std::promise<R>>();
    auto fut = p->get_future();
    post([p, fn = std::forward<F>(f)](sim::World& w) mutable {
      try {
        if constexpr (std::is_void_v<R>) {
          fn(w);
          p->set_value();
        } else {
          p->set_value(fn(w));
        }
      } catch (...) {
        p->set_exception(std::current_exception());
      }
    });
    return fut.get();
  }

  Millis virtual_now() const {
    const auto wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - wall_start_).count();
    return static_cast<Millis>(wall * opts_.speed);
  }

 private:
  void sim_loop() {
    while (running_) {
      std::deque<Command> batch;
      {
        std::unique_lock lock(mu_);
        cv_.wait_for(lock, opts_.tick, [&] { return !queue_.empty() || !running_; });
        batch.swap(queue_);
      }
      world_.run_until(std::max(world_.now(), virtual_now()));
      for (auto& c : batch) c(world_);
    }
  }

  // --- operator API -----------------------------------------------------------

  static void reply(httplib::Response& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static std::optional<std::uint64_t> parse_id(const std::string& s) {
    if (s.empty() || s.size() > 19) return std::nullopt;
    std::uint64_t v = 0;
    for (char c : s) {
      if (c < '0' || c > '9') return std::nullopt;
      v = v * 10 + static_cast<std::uint64_t>(c - '0');
    }
    return v;
  }

  static int http_status(hmi::HmiError e) {
    switch (e) {
      case hmi::HmiError::UnknownTe:
      case hmi::HmiError::UnknownEvent: return 404;
      case hmi::HmiError::TeOffline: return 409;
      case hmi::HmiError::TooManySessions: return 503;
    }
    return 500;
  }

  std::chrono::milliseconds request_wait() const {
    const double virt = static_cast<double>(world_.scenario().hmi.request_timeout_ms);
    return std::chrono::milliseconds(static_cast<std::int64_t>(virt / opts_.speed) + 2000);
  }

  // Outcome of an operator request, delivered once from the sim thread.
  struct Pending {
    std::promise<hmi::RequestOutcome> promise;
    std::atomic<bool> set{false};
    void resolve(const hmi::RequestOutcome& o) {
      if (!set.exchange(true)) promise.set_value(o);
    }
  };

  void setup_routes() {
    http_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                               {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                               {"Access-Control-Allow-Headers", "Content-Type"}});
    http_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    http_.Get("/tes", [this](const httplib::Request&, httplib::Response& res) {
      auto list = call([](sim::World& w) { return w.hmi().list_tes(); });
      Json out = Json::array();
      for (const auto& t : list) {
        out.push_back({{"te_id", t.te_id},
                       {"state", hmi::state_name(t.state)},
                       {"last_seen", t.last_seen},
                       {"armed", t.armed ? Json(*t.armed) : Json(nullptr)}});
      }
      reply(res, 200, out);
    });

    http_.Post(R"(/tes/(\d+)/control)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto id = parse_id(req.matches[1]);
      Json body = Json::parse(req.body, nullptr, false);
      if (!id || body.is_discarded() || !body.is_object() || !body.contains("cmd") || !body["cmd"].is_string())
        return reply(res, 400, {{"error", "expected {\"cmd\": \"arm|disarm|siren_on|siren_off|reboot\"}"}});
      const auto cmd = protocol::control_from_name(body["cmd"].get<std::string>());
      if (!cmd) return reply(res, 400, {{"error", "unknown cmd"}});
      const std::string op = body.contains("operator") && body["operator"].is_string() ? body["operator"].get<std::string>()
                                                                                        : "console";
      auto pending = std::make_shared<Pending>();
      auto ticket = call([&, pending](sim::World& w) {
        return w.control(static_cast<TeId>(*id), *cmd, op, [pending](const hmi::RequestOutcome& o) { pending->resolve(o); });
      });
      if (!ticket) return reply(res, http_status(ticket.error()), {{"error", hmi::error_name(ticket.error())}});
      if (ticket->te_offline) return reply(res, 202, {{"request_id", ticket->request_id}, {"result", "queued"}});
      auto fut = pending->promise.get_future();
      if (fut.wait_for(request_wait()) != std::future_status::ready)
        return reply(res, 504, {{"request_id", ticket->request_id}, {"result", "timeout"}});
      const auto o = fut.get();
      if (o.status != hmi::RequestStatus::Ok)
        return reply(res, 504, {{"request_id", o.request_id}, {"result", hmi::request_status_name(o.status)}});
      reply(res, 200,
            {{"request_id", o.request_id}, {"result", o.control_result == protocol::kControlOk ? "ok" : "unknown_cmd"}});
    });

    http_.Get(R"(/tes/(\d+)/status)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto id = parse_id(req.matches[1]);
      if (!id) return reply(res, 400, {{"error", "bad te id"}});
      auto pending = std::make_shared<Pending>();
      auto r = call([&, pending](sim::World& w) {
        return w.query_status(static_cast<TeId>(*id), [pending](const hmi::RequestOutcome& o) { pending->resolve(o); });
      });
      if (!r) return reply(res, http_status(r.error()), {{"error", hmi::error_name(r.error())}});
      auto fut = pending->promise.get_future();
      if (fut.wait_for(request_wait()) != std::future_status::ready)
        return reply(res, 504, {{"request_id", *r}, {"result", "timeout"}});
      const auto o = fut.get();
      if (o.status != hmi::RequestStatus::Ok || !o.report)
        return reply(res, 504, {{"request_id", o.request_id}, {"result", hmi::request_status_name(o.status)}});
      reply(res, 200, status_json(static_cast<TeId>(*id), *o.report));
    });

    http_.Get("/events", [this](const httplib::Request& req, httplib::Response& res) {
      std::uint64_t since = 0;
      if (req.has_param("since")) {
        auto v = parse_id(req.get_param_value("since"));
        if (!v) return reply(res, 400, {{"error", "since must be an event id"}});
        since = *v;
      }
      auto events = call([since](sim::World& w) { return w.hmi().events_since(since); });
      Json out = Json::array();
      for (const auto& ev : events) out.push_back(to_json(ev));
      reply(res, 200, out);
    });

    http_.Post(R"(/events/(\d+)/ack)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto id = parse_id(req.matches[1]);
      Json body = Json::parse(req.body, nullptr, false);
      if (!id || body.is_discarded() || !body.is_object() || !body.contains("operator") || !body["operator"].is_string())
        return reply(res, 400, {{"error", "expected {\"operator\": \"name\"}"}});
      const auto op = body["operator"].get<std::string>();
      auto ev = call([&](sim::World& w) { return w.hmi().ack_alarm(*id, op, w.now()); });
      if (!ev) return reply(res, http_status(ev.error()), {{"error", hmi::error_name(ev.error())}});
      reply(res, 200, to_json(*ev));
    });

    http_.Get("/stream", [this](const httplib::Request&, httplib::Response& res) {
      auto sub = world_.hmi().hub().subscribe();
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider(
          "text/event-stream",
          [this, sub](std::size_t, httplib::DataSink& sink) {
            if (!running_ || sub->closed()) return false;
            std::string chunk;
            if (auto rec = sub->next(std::chrono::milliseconds(500))) {
              const auto j = to_json(*rec);
              chunk = "event: " + j["kind"].get<std::string>() + "\ndata: " + j.dump() + "\n\n";
            } else {
              chunk = ": keepalive\n\n";
            }
            return sink.write(chunk.data(), chunk.size());
          },
          [this, sub](bool) { world_.hmi().hub().unsubscribe(sub); });
    });
  }

  // --- TE listener ------------------------------------------------------------

  int open_te_listener() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw PortBindError("te", opts_.te_port);
    int yes = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(opts_.te_port));
    if (::inet_pton(AF_INET, opts_.host.c_str(), &addr.sin_addr) != 1) addr.sin_addr.s_addr = htonl(INADDR_ANY);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 64) != 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
      http_.stop();
      throw PortBindError("te", opts_.te_port);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    return ntohs(addr.sin_port);
  }

  void accept_loop() {
    while (running_) {
      sockaddr_in peer{};
      socklen_t len = sizeof peer;
      const int fd = ::accept(listen_fd_, reinterpret_cast<sockaddr*>(&peer), &len);
      if (fd < 0) {
        if (!running_) return;
        continue;
      }
      char ip[INET_ADDRSTRLEN] = {};
      ::inet_ntop(AF_INET, &peer.sin_addr, ip, sizeof ip);
      const std::string remote = "tcp:" + std::string(ip) + ":" + std::to_string(ntohs(peer.sin_port));
      std::lock_guard lock(conn_mu_);
      conn_fds_.insert(fd);
      conn_threads_.emplace_back([this, fd, remote] { serve_te(fd, remote); });
    }
  }

  void serve_te(int fd, std::string remote) {
    auto write_mu = std::make_shared<std::mutex>();
    auto open = std::make_shared<std::atomic<bool>>(true);
    auto sink = [fd, write_mu, open](const protocol::Frame& f) {
      if (!*open) return;
      const auto bytes = protocol::encode_frame(f);
      std::lock_guard lock(*write_mu);
      std::size_t off = 0;
      while (off < bytes.size()) {
        const auto n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
        if (n <= 0) return;
        off += static_cast<std::size_t>(n);
      }
    };
    protocol::FrameReader reader;
    std::set<TeId> ids;
    std::uint8_t buf[4096];
    while (running_) {
      const auto n = ::recv(fd, buf, sizeof buf, 0);
      if (n <= 0) break;
      reader.feed(std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)));
      while (auto f = reader.next()) {
        ids.insert(f->te_id);
        post([remote, frame = std::move(*f), sink](sim::World& w) { w.external_frame(remote, frame, sink); });
      }
    }
    *open = false;
    post([ids](sim::World& w) {
      for (TeId id : ids) w.external_closed(id);
    });
    {
      std::lock_guard lock(conn_mu_);
      conn_fds_.erase(fd);
    }
    ::close(fd);
  }

  LiveOptions opts_;
  sim::World world_;
  httplib::Server http_;
  int api_port_ = -1;
  int te_port_ = -1;
  int listen_fd_ = -1;

  std::atomic<bool> running_{false};
  std::chrono::steady_clock::time_point wall_start_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Command> queue_;

  std::mutex conn_mu_;
  std::set<int> conn_fds_;
  std::vector<std::thread> conn_threads_;
  std::thread sim_thread_;
  std::thread http_thread_;
  std::thread accept_thread_;
};

}  // namespace cpas::live

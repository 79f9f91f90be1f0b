#pragma once

// Simulated SMS channel between TEs and their users. Out of band: GPRS link
// impairments never touch it. Messages between one (from, to) pair are
// delivered in submission order.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cpas/common.hpp"
#include "cpas/rng.hpp"
#include "cpas/sms_text.hpp"

namespace cpas::smsgw {

struct SmsConfig {
  Millis latency_ms = 3000;
  Millis latency_jitter_ms = 0;  // uniform extra delay in [0, jitter]
  double loss_prob = 0.0;

  void validate() const {
    if (latency_ms < 0 || latency_jitter_ms < 0) throw std::invalid_argument("sms latency must be >= 0");
    if (loss_prob < 0.0 || loss_prob > 1.0) throw std::invalid_argument("sms.loss_prob must lie in [0, 1]");
  }
};

struct SmsMessage {
  std::uint64_t id = 0;
  std::string from;
  std::string to;
  std::string text;
  Millis submitted_at = 0;
  std::optional<Millis> delivered_at;  // when delivered, or scheduled delivery while pending
  bool lost = false;
  bool delivered = false;
};

enum class SmsError { TextTooLong, NotAscii };

inline std::string_view error_name(SmsError e) noexcept {
  return e == SmsError::TextTooLong ? "TextTooLong" : "NotAscii";
}

struct ScriptedSms {
  Millis at = 0;
  std::string to;
  std::string text;
};

struct UserAgent {
  std::string phone;
  std::vector<ScriptedSms> script;  // sorted by `at`
  std::vector<SmsMessage> mailbox;
  std::size_t next_script = 0;
};

struct DriveResult {
  std::vector<SmsMessage> submitted;
  std::vector<SmsMessage> delivered;
};

class SmsGateway {
 public:
  // Delivery to a recipient that is not a scripted user agent (a TE).
  using EndpointHandler = std::function<void(const SmsMessage&, Millis now)>;

  explicit SmsGateway(SmsConfig config = {}, SplitMix64 rng = SplitMix64{0}) : cfg_(config), rng_(rng) {
    cfg_.validate();
  }

  void set_endpoint_handler(EndpointHandler h) { endpoint_ = std::move(h); }

  void add_agent(UserAgent agent) {
    std::stable_sort(agent.script.begin(), agent.script.end(),
                     [](const ScriptedSms& a, const ScriptedSms& b) { return a.at < b.at; });
    const auto phone = agent.phone;
    agents_.insert_or_assign(phone, std::move(agent));
  }

  const UserAgent* agent(const std::string& phone) const {
    auto it = agents_.find(phone);
    return it == agents_.end() ? nullptr : &it->second;
  }
  const std::map<std::string, UserAgent>& agents() const noexcept { return agents_; }
  const std::vector<SmsMessage>& messages() const noexcept { return log_; }
  const SmsConfig& config() const noexcept { return cfg_; }

  Expected<std::uint64_t, SmsError> submit(std::string from, std::string to, std::string text, Millis now) {
    if (text.size() > sms::kMaxSmsLength) return SmsError::TextTooLong;
    if (!sms::is_sms_text(text)) return SmsError::NotAscii;

    SmsMessage m{next_id_++, std::move(from), std::move(to), std::move(text), now, std::nullopt, false, false};
    if (rng_.chance(cfg_.loss_prob)) {
      m.lost = true;
    } else {
      Millis at = now + cfg_.latency_ms + (cfg_.latency_jitter_ms > 0 ? rng_.between(0, cfg_.latency_jitter_ms) : 0);
      auto& last = last_delivery_[{m.from, m.to}];
      at = std::max(at, last);
      last = at;
      m.delivered_at = at;
      due_.emplace(std::make_pair(at, m.id), log_.size());
    }
    log_.push_back(m);
    return m.id;
  }

  // Fires scripted user commands due at `now`, then delivers due messages.
  DriveResult drive_agents(Millis now) {
    DriveResult out;
    for (auto& [phone, agent] : agents_) {
      while (agent.next_script < agent.script.size() && agent.script[agent.next_script].at <= now) {
        const ScriptedSms cmd = agent.script[agent.next_script++];
        if (submit(phone, cmd.to, cmd.text, now)) out.submitted.push_back(log_.back());
      }
    }
    while (!due_.empty() && due_.begin()->first.first <= now) {
      const std::size_t index = due_.begin()->second;
      due_.erase(due_.begin());
      log_[index].delivered = true;
      const SmsMessage m = log_[index];  // handlers may submit and grow log_
      out.delivered.push_back(m);
      if (auto it = agents_.find(m.to); it != agents_.end()) {
        it->second.mailbox.push_back(m);
      } else if (endpoint_) {
        endpoint_(m, now);
      }
    }
    return out;
  }

  // Next time drive_agents() has work: a pending delivery or scripted command.
  std::optional<Millis> next_due() const {
    std::optional<Millis> best;
    if (!due_.empty()) best = due_.begin()->first.first;
    for (const auto& [phone, agent] : agents_) {
      if (agent.next_script < agent.script.size()) {
        const Millis t = agent.script[agent.next_script].at;
        if (!best || t < *best) best = t;
      }
    }
    return best;
  }

  std::size_t pending() const noexcept { return due_.size(); }

 private:
  SmsConfig cfg_;
  SplitMix64 rng_;
  std::uint64_t next_id_ = 1;
  std::map<std::string, UserAgent> agents_;
  std::vector<SmsMessage> log_;
  std::map<std::pair<Millis, std::uint64_t>, std::size_t> due_;
  std::map<std::pair<std::string, std::string>, Millis> last_delivery_;
  EndpointHandler endpoint_;
};

}  // namespace cpas::smsgw

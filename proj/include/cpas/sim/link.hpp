#pragma once

// One direction of a TE's GPRS path. Acceptance is decided at send time
// (outage window, forced failure burst, random drop); accepted segments
// arrive in order after serialization plus one-way latency.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cpas/common.hpp"
#include "cpas/modem.hpp"
#include "cpas/rng.hpp"

namespace cpas::sim {

struct Window {
  Millis start = 0;
  Millis end = 0;  // exclusive

  bool contains(Millis t) const noexcept { return t >= start && t < end; }
};

struct LinkParams {
  Millis latency_ms = 150;
  Millis jitter_ms = 0;
  double drop_prob = 0.0;
  std::int64_t bandwidth_bps = 25000;
  std::vector<Window> outages;

  void validate() const {
    if (latency_ms < 0 || jitter_ms < 0) throw std::invalid_argument("link latency must be >= 0");
    if (drop_prob < 0.0 || drop_prob > 1.0) throw std::invalid_argument("link.drop_prob must lie in [0, 1]");
    if (bandwidth_bps < 20000 || bandwidth_bps > 171200)
      throw std::invalid_argument("link.bandwidth_bps must lie in [20000, 171200]");
    for (const auto& w : outages) {
      if (w.end <= w.start) throw std::invalid_argument("link outage windows need start < end");
    }
  }
};

struct LinkCounters {
  std::uint64_t sent = 0;
  std::uint64_t delivered = 0;
  std::uint64_t dropped = 0;

  std::uint64_t in_flight() const noexcept { return sent - delivered - dropped; }
};

class Link {
 public:
  Link(LinkParams params, SplitMix64 rng) : params_(std::move(params)), rng_(rng) { params_.validate(); }

  const LinkParams& params() const noexcept { return params_; }
  const LinkCounters& counters() const noexcept { return counters_; }
  const std::vector<Millis>& burst_ends() const noexcept { return burst_ends_; }
  int forced_failures_left() const noexcept { return forced_; }

  bool in_outage(Millis t) const noexcept {
    return std::any_of(params_.outages.begin(), params_.outages.end(), [&](const Window& w) { return w.contains(t); });
  }

  // The next `count` send attempts fail.
  void force_failures(int count) { forced_ += std::max(0, count); }

  // Decides acceptance of a segment whose last bit leaves at `departs_at`.
  // Returns the arrival time, or nullopt when refused.
  std::optional<Millis> admit(Millis now, Millis departs_at) {
    ++counters_.sent;
    if (refuse(now)) {
      ++counters_.dropped;
      return std::nullopt;
    }
    Millis arrival = departs_at + params_.latency_ms + (params_.jitter_ms > 0 ? rng_.between(0, params_.jitter_ms) : 0);
    arrival = std::max(arrival, last_arrival_);
    last_arrival_ = arrival;
    return arrival;
  }

  // Serializes at the link bandwidth (used for the HMI -> TE direction).
  std::optional<Millis> admit_serialized(std::size_t octets, Millis now) {
    const Millis departs = std::max(now, busy_until_) + modem::serialization_delay_ms(octets, params_.bandwidth_bps);
    auto arrival = admit(now, departs);
    if (arrival) busy_until_ = departs;
    return arrival;
  }

  void mark_delivered() { ++counters_.delivered; }
  // Arrived, but the receiving socket was already gone.
  void mark_discarded() { ++counters_.dropped; }

 private:
  bool refuse(Millis now) {
    if (in_outage(now)) return true;
    if (forced_ > 0) {
      if (--forced_ == 0) burst_ends_.push_back(now);
      return true;
    }
    return rng_.chance(params_.drop_prob);
  }

  LinkParams params_;
  SplitMix64 rng_;
  LinkCounters counters_;
  int forced_ = 0;
  Millis last_arrival_ = 0;
  Millis busy_until_ = 0;
  std::vector<Millis> burst_ends_;
};

}  // namespace cpas::sim

#pragma once

#include <cstdint>
#include <functional>
#include <queue>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cpas/common.hpp"

namespace cpas::sim {

// Discrete-event clock. Events at equal times fire in scheduling order.
class VirtualClock {
 public:
  using EventId = std::uint64_t;
  using Callback = std::function<void()>;

  Millis now() const noexcept { return now_; }

  EventId schedule(Millis at, Callback fn) {
    if (at < now_) throw std::invalid_argument("cannot schedule an event in the past");
    const EventId id = next_id_++;
    queue_.push(Key{at, id});
    callbacks_.emplace(id, std::move(fn));
    ++scheduled_;
    return id;
  }

  EventId schedule_in(Millis delay, Callback fn) { return schedule(now_ + delay, std::move(fn)); }

  // True if the event was still pending.
  bool cancel(EventId id) {
    if (callbacks_.erase(id) == 0) return false;
    ++cancelled_;
    return true;
  }

  // Fires every event with time <= limit, then advances to limit.
  void run_until(Millis limit) {
    while (step(limit)) {
    }
    if (limit > now_) now_ = limit;
  }

  // Fires the earliest pending event if its time is <= limit.
  bool step(Millis limit) {
    while (!queue_.empty()) {
      const Key top = queue_.top();
      if (top.at > limit) return false;
      queue_.pop();
      auto it = callbacks_.find(top.id);
      if (it == callbacks_.end()) continue;  // cancelled
      Callback fn = std::move(it->second);
      callbacks_.erase(it);
      now_ = top.at;
      ++fired_;
      fn();
      return true;
    }
    return false;
  }

  std::size_t pending() const noexcept { return callbacks_.size(); }
  std::uint64_t scheduled() const noexcept { return scheduled_; }
  std::uint64_t fired() const noexcept { return fired_; }
  std::uint64_t cancelled() const noexcept { return cancelled_; }

 private:
  struct Key {
    Millis at;
    EventId id;
    bool operator>(const Key& o) const noexcept { return at != o.at ? at > o.at : id > o.id; }
  };

  Millis now_ = 0;
  EventId next_id_ = 1;
  std::priority_queue<Key, std::vector<Key>, std::greater<Key>> queue_;
  std::unordered_map<EventId, Callback> callbacks_;
  std::uint64_t scheduled_ = 0;
  std::uint64_t fired_ = 0;
  std::uint64_t cancelled_ = 0;
};

}  // namespace cpas::sim

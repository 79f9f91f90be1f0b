#pragma once

// Time-slice rotation scheduling over a weighted ready queue.
//
// The process is the weighted composition of the queued tasks,
// P = sum_i x_i T_i, with sum_i x_i = 1 and x_i >= x_{i+1}. Weights are
// position based and recomputed after every mutation:
//
//   x_i = (m - i + 1) / (m (m + 1) / 2),   i = 1..m
//
// The head always receives the largest slice, max(1, round(x_1 R)). A task
// whose slice expires moves to the tail; a finished task leaves the queue.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

namespace cpas::sched {

using Ticks = std::int64_t;

template <typename Id>
struct TaskEntry {
  Id task_id{};
  double weight = 0.0;
  Ticks remaining_work = 0;
};

template <typename Id>
struct Slice {
  Id task_id{};
  Ticks slice = 0;
};

struct Expired {};

template <typename Id>
struct Completed {
  Id task_id{};
};

template <typename Id>
using SliceOutcome = std::variant<Expired, Completed<Id>>;

class EmptyQueue : public std::logic_error {
 public:
  EmptyQueue() : std::logic_error("ready queue is empty") {}
};

// Linear descending weights for a queue of m entries.
inline std::vector<double> linear_weights(std::size_t m) {
  std::vector<double> w(m);
  const double total = static_cast<double>(m) * static_cast<double>(m + 1) / 2.0;
  for (std::size_t i = 0; i < m; ++i) w[i] = static_cast<double>(m - i) / total;
  return w;
}

template <typename Id>
class TaskQueue {
 public:
  static constexpr Ticks kDefaultRoundBudget = 100;

  explicit TaskQueue(Ticks round_budget = kDefaultRoundBudget) : round_budget_(round_budget) {
    if (round_budget_ < 1) throw std::invalid_argument("round budget must be >= 1");
  }

  Ticks round_budget() const noexcept { return round_budget_; }
  std::size_t size() const noexcept { return queue_.size(); }
  bool empty() const noexcept { return queue_.empty(); }
  const std::deque<TaskEntry<Id>>& entries() const noexcept { return queue_; }

  bool contains(const Id& id) const { return index_.contains(id); }

  // Appends a task at the tail, or adds work to an existing entry in place.
  void add_work(const Id& id, Ticks work) {
    if (work < 0) throw std::invalid_argument("work must be >= 0");
    if (index_.contains(id)) {
      for (auto& e : queue_) {
        if (e.task_id == id) {
          e.remaining_work += work;
          return;
        }
      }
    }
    queue_.push_back(TaskEntry<Id>{id, 0.0, work});
    index_.insert(id);
    assign_weights();
  }

  void assign_weights() {
    const auto w = linear_weights(queue_.size());
    for (std::size_t i = 0; i < queue_.size(); ++i) queue_[i].weight = w[i];
  }

  Slice<Id> next_slice() const {
    if (queue_.empty()) throw EmptyQueue();
    const auto& head = queue_.front();
    const auto ticks = static_cast<Ticks>(std::llround(head.weight * static_cast<double>(round_budget_)));
    return {head.task_id, std::max<Ticks>(1, ticks)};
  }

  // Charges `elapsed` ticks of work to the head issued by next_slice().
  SliceOutcome<Id> run_slice(Ticks elapsed) {
    if (queue_.empty()) throw EmptyQueue();
    auto head = queue_.front();
    queue_.pop_front();
    head.remaining_work -= std::min(std::max<Ticks>(elapsed, 0), head.remaining_work);
    if (head.remaining_work == 0) {
      index_.erase(head.task_id);
      assign_weights();
      return Completed<Id>{head.task_id};
    }
    queue_.push_back(head);
    assign_weights();
    return Expired{};
  }

  Ticks total_work() const noexcept {
    Ticks sum = 0;
    for (const auto& e : queue_) sum += e.remaining_work;
    return sum;
  }

 private:
  Ticks round_budget_;
  std::deque<TaskEntry<Id>> queue_;
  std::unordered_set<Id> index_;
};

template <typename Id>
struct SliceRecord {
  Id task_id{};
  Ticks slice = 0;
  Ticks used = 0;
  Ticks start = 0;
};

template <typename Id>
struct Schedule {
  std::vector<Id> completion_order;
  std::unordered_map<Id, Ticks> finish_tick;
  std::vector<SliceRecord<Id>> slices;
};

// Runs tasks 1..n with the given work amounts to completion.
inline Schedule<std::uint32_t> simulate(const std::vector<Ticks>& works,
                                        Ticks round_budget = TaskQueue<std::uint32_t>::kDefaultRoundBudget) {
  TaskQueue<std::uint32_t> queue(round_budget);
  for (std::size_t i = 0; i < works.size(); ++i) {
    if (works[i] <= 0) throw std::invalid_argument("work amounts must be > 0");
    queue.add_work(static_cast<std::uint32_t>(i + 1), works[i]);
  }
  Schedule<std::uint32_t> out;
  Ticks now = 0;
  while (!queue.empty()) {
    const auto s = queue.next_slice();
    const Ticks used = std::min(s.slice, queue.entries().front().remaining_work);
    out.slices.push_back({s.task_id, s.slice, used, now});
    now += used;
    const auto outcome = queue.run_slice(used);
    if (const auto* done = std::get_if<Completed<std::uint32_t>>(&outcome)) {
      out.completion_order.push_back(done->task_id);
      out.finish_tick[done->task_id] = now;
    }
  }
  return out;
}

}  // namespace cpas::sched

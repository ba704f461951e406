/* Copyright 2026 The disagsim Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <cstdint>
#include <functional>
#include <queue>
#include <unordered_set>
#include <vector>

namespace disagsim {

using EventId = uint64_t;

// Single-threaded discrete-event core. Events fire in timestamp order;
// equal timestamps fire in scheduling order.
class EventEngine {
 public:
  using Callback = std::function<void()>;

  double now() const { return now_; }

  // Throws InvariantViolation when at < now().
  EventId schedule_at(double at, Callback cb);
  EventId schedule_after(double delay, Callback cb) {
    return schedule_at(now_ + delay, std::move(cb));
  }
  void cancel(EventId id);

  // Dispatches one event; false when none remain.
  bool step();
  // Dispatches events with time <= horizon.
  void run_until(double horizon);
  void run();

  size_t pending() const { return live_.size(); }
  uint64_t dispatched() const { return dispatched_; }

 private:
  struct Entry {
    double at;
    EventId seq;
    // Mutable so the callback can be moved out of the priority queue top.
    mutable Callback cb;
  };
  struct Later {
    bool operator()(const Entry& a, const Entry& b) const {
      if (a.at != b.at) return a.at > b.at;
      return a.seq > b.seq;
    }
  };

  double now_ = 0.0;
  EventId next_seq_ = 0;
  uint64_t dispatched_ = 0;
  std::priority_queue<Entry, std::vector<Entry>, Later> queue_;
  std::unordered_set<EventId> live_;
  std::unordered_set<EventId> cancelled_;
};

}  // namespace disagsim

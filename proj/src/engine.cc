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

#include "disagsim/engine.h"

#include <fmt/format.h>

#include "disagsim/common.h"

namespace disagsim {

EventId EventEngine::schedule_at(double at, Callback cb) {
  if (at < now_) {
    throw InvariantViolation(fmt::format(
        "event scheduled in the past: {} < now {}", at, now_));
  }
  EventId id = next_seq_++;
  queue_.push(Entry{at, id, std::move(cb)});
  live_.insert(id);
  return id;
}

void EventEngine::cancel(EventId id) {
  if (live_.erase(id)) cancelled_.insert(id);
}

bool EventEngine::step() {
  while (!queue_.empty()) {
    const Entry& top = queue_.top();
    EventId id = top.seq;
    double at = top.at;
    Callback cb = std::move(top.cb);
    queue_.pop();
    if (auto it = cancelled_.find(id); it != cancelled_.end()) {
      cancelled_.erase(it);
      continue;
    }
    live_.erase(id);
    now_ = at;
    ++dispatched_;
    cb();
    return true;
  }
  return false;
}

void EventEngine::run_until(double horizon) {
  while (!queue_.empty()) {
    const Entry& top = queue_.top();
    if (top.at > horizon) break;
    if (cancelled_.count(top.seq)) {
      cancelled_.erase(top.seq);
      queue_.pop();
      continue;
    }
    step();
  }
}

void EventEngine::run() {
  while (step()) {
  }
}

}  // namespace disagsim

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

#include "disagsim/transport.h"

#include <charconv>
#include <cmath>

#include <fmt/format.h>

namespace disagsim {

PayloadHandle PayloadRegistry::allocate(uint64_t size, uint32_t producer) {
  if (size == 0) throw ValidationError("payload size must be > 0");
  PayloadHandle h{next_id_++, size, producer, 0};
  live_.emplace(h.payload_id, h.generation);
  return h;
}

void PayloadRegistry::release(const PayloadHandle& handle) {
  auto it = live_.find(handle.payload_id);
  if (it == live_.end() || it->second != handle.generation) {
    throw InvariantViolation(fmt::format(
        "payload {} released twice or after reuse", handle.payload_id));
  }
  live_.erase(it);
}

bool PayloadRegistry::is_live(const PayloadHandle& handle) const {
  auto it = live_.find(handle.payload_id);
  return it != live_.end() && it->second == handle.generation;
}

JitterSpec parse_jitter(std::string_view text) {
  if (text == "none" || text.empty()) return {0.0, 0.0};
  if (text == "stable") return {0.05, 0.2};
  if (text == "mild") return {0.10, 0.2};
  if (text == "moderate") return {0.10, 2.0};
  if (text == "severe") return {0.20, 2.0};
  // Literal form P%/Ds.
  auto pct = text.find('%');
  auto slash = text.find('/');
  if (pct != std::string_view::npos && slash == pct + 1 && text.back() == 's') {
    double p = 0.0;
    double d = 0.0;
    auto r1 = std::from_chars(text.data(), text.data() + pct, p);
    auto r2 = std::from_chars(text.data() + slash + 1,
                              text.data() + text.size() - 1, d);
    if (r1.ec == std::errc() && r1.ptr == text.data() + pct &&
        r2.ec == std::errc() && r2.ptr == text.data() + text.size() - 1 &&
        p >= 0.0 && p <= 100.0 && d >= 0.0) {
      return {p / 100.0, d};
    }
  }
  throw ConfigError(fmt::format(
      "unknown jitter '{}' (none|stable|mild|moderate|severe|P%/Ds)", text));
}

void LinkModel::validate() const {
  if (!(bandwidth > 0.0)) throw ValidationError("link bandwidth must be > 0");
  if (!(latency >= 0.0)) throw ValidationError("link latency must be >= 0");
  if (!(jitter.probability >= 0.0 && jitter.probability <= 1.0)) {
    throw ValidationError("jitter probability must be in [0, 1]");
  }
  if (!(jitter.delay >= 0.0)) {
    throw ValidationError("jitter delay must be >= 0");
  }
  if (!(drop_probability >= 0.0 && drop_probability < 1.0)) {
    throw ValidationError("drop probability must be in [0, 1)");
  }
}

double transfer_time(const LinkModel& link, uint64_t size, double draw) {
  double t = link.latency + static_cast<double>(size) / link.bandwidth;
  if (draw < link.jitter.probability) t += link.jitter.delay;
  return t;
}

LinkSampler::LinkSampler(LinkModel link) : link_(link), rng_(link.seed) {
  link_.validate();
}

TransferSample LinkSampler::next(uint64_t size) {
  ++draws_;
  TransferSample s;
  s.seconds = transfer_time(link_, size, unit_interval(rng_()));
  if (link_.drop_probability > 0.0) {
    s.dropped = unit_interval(rng_()) < link_.drop_probability;
  }
  return s;
}

double RetryPolicy::backoff(uint32_t attempt) const {
  return base_delay * std::pow(multiplier, static_cast<double>(attempt - 1));
}

void RetryPolicy::validate() const {
  if (!(base_delay >= 0.0)) throw ValidationError("retry base delay < 0");
  if (!(multiplier > 1.0)) throw ValidationError("retry multiplier must be > 1");
  if (max_attempts < 1) throw ValidationError("retry max attempts must be >= 1");
  if (!(timeout > 0.0)) throw ValidationError("transfer timeout must be > 0");
}

Transport::Transport(EventEngine& engine, LinkModel link, RetryPolicy retry)
    : engine_(engine), sampler_(link), retry_(retry) {
  retry_.validate();
}

TransferId Transport::send_async(const PayloadHandle& handle, uint32_t dest,
                                 TransferCallbacks callbacks) {
  return start(handle, dest, std::move(callbacks));
}

TransferId Transport::send_sync(const PayloadHandle& handle, uint32_t dest,
                                TransferCallbacks callbacks) {
  return start(handle, dest, std::move(callbacks));
}

TransferId Transport::start(const PayloadHandle& handle, uint32_t dest,
                            TransferCallbacks callbacks) {
  TransferId id = next_id_++;
  State& st = transfers_[id];
  st.handle = handle;
  st.dest = dest;
  st.dispatched_at = engine_.now();
  st.callbacks = std::move(callbacks);
  ++stats_.transfers;
  launch_attempt(id);
  return id;
}

void Transport::launch_attempt(TransferId id) {
  State& st = transfers_.at(id);
  ++st.attempt;
  ++stats_.attempts;
  TransferSample sample = sampler_.next(st.handle.size);
  if (!sample.dropped) {
    ++st.in_flight;
    engine_.schedule_after(sample.seconds, [this, id] { on_arrival(id); });
  }
  const uint32_t attempt = st.attempt;
  st.timeout_event = engine_.schedule_after(
      retry_.timeout, [this, id, attempt] { on_timeout(id, attempt); });
}

void Transport::on_arrival(TransferId id) {
  State& st = transfers_.at(id);
  --st.in_flight;
  if (st.failed) {
    // The sender gave up; the late copy is discarded.
    ++stats_.late_after_failure;
    maybe_forget(id);
    return;
  }
  ++stats_.deliveries;
  stats_.payload_bytes_moved += st.handle.size;
  // Copy the callbacks: they may trigger new transfers that rehash the map.
  TransferCallbacks cbs = st.callbacks;
  const bool first = !st.completed;
  const double elapsed = engine_.now() - st.dispatched_at;
  if (first) {
    st.completed = true;
    engine_.cancel(st.timeout_event);
  }
  if (cbs.on_deliver) cbs.on_deliver(engine_.now());
  if (first && cbs.on_complete) cbs.on_complete(elapsed);
  maybe_forget(id);
}

void Transport::on_timeout(TransferId id, uint32_t attempt) {
  auto it = transfers_.find(id);
  if (it == transfers_.end()) return;
  State& st = it->second;
  if (st.completed || st.failed || st.attempt != attempt) return;
  ++stats_.timeouts;
  if (st.attempt < retry_.max_attempts) {
    engine_.schedule_after(retry_.backoff(st.attempt), [this, id] {
      // A late copy of an earlier attempt may have landed during backoff.
      auto again = transfers_.find(id);
      if (again == transfers_.end() || again->second.completed) return;
      launch_attempt(id);
    });
    return;
  }
  st.failed = true;
  ++stats_.failures;
  auto on_failed = st.callbacks.on_failed;
  maybe_forget(id);
  if (on_failed) on_failed(engine_.now());
}

void Transport::maybe_forget(TransferId id) {
  auto it = transfers_.find(id);
  if (it == transfers_.end()) return;
  const State& st = it->second;
  if ((st.completed || st.failed) && st.in_flight == 0) transfers_.erase(it);
}

void BatchPolicy::validate() const {
  if (max_messages < 1) throw ValidationError("batch max messages must be > 0");
  if (max_bytes < 1) throw ValidationError("batch max bytes must be > 0");
  if (!(flush_timeout > 0.0)) {
    throw ValidationError("batch flush timeout must be > 0");
  }
}

Delivery DedupSet::check(const RequestId& id, uint32_t attempt) {
  return seen_.emplace(id, attempt).second ? Delivery::kFresh
                                           : Delivery::kDuplicate;
}

}  // namespace disagsim

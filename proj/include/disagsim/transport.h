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

// Emulated data plane. Payloads are never materialized: a payload is an
// (id, size) handle and bytes only enter the transfer-time arithmetic.

#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "disagsim/common.h"
#include "disagsim/engine.h"

namespace disagsim {

struct PayloadHandle {
  uint64_t payload_id = 0;
  uint64_t size = 0;
  uint32_t producer = 0;
  uint32_t generation = 0;

  friend bool operator==(const PayloadHandle&, const PayloadHandle&) = default;
};

// Tracks live payloads so that leaks and use-after-release are caught.
class PayloadRegistry {
 public:
  // size must be > 0.
  PayloadHandle allocate(uint64_t size, uint32_t producer);
  // Throws InvariantViolation on a stale or already released handle.
  void release(const PayloadHandle& handle);
  bool is_live(const PayloadHandle& handle) const;
  size_t live_count() const { return live_.size(); }
  uint64_t allocated_total() const { return next_id_; }

 private:
  uint64_t next_id_ = 0;
  std::unordered_map<uint64_t, uint32_t> live_;  // id -> generation
};

struct JitterSpec {
  double probability = 0.0;
  double delay = 0.0;  // seconds

  friend bool operator==(const JitterSpec&, const JitterSpec&) = default;
};

// "none", "stable" (5%/0.2s), "mild" (10%/0.2s), "moderate" (10%/2s),
// "severe" (20%/2s), or a literal "P%/Ds" such as "10%/2s".
JitterSpec parse_jitter(std::string_view text);

struct LinkModel {
  double bandwidth = 12.5e9;  // bytes/s
  double latency = 0.0;       // seconds
  JitterSpec jitter;
  // Fault injection: a dropped attempt never arrives and is recovered by the
  // sender's timeout.
  double drop_probability = 0.0;
  uint64_t seed = 0;

  void validate() const;
};

// latency + size / bandwidth, plus the jitter delay when draw < p.
double transfer_time(const LinkModel& link, uint64_t size, double draw);

struct TransferSample {
  double seconds = 0.0;
  bool dropped = false;
};

// Seeded per-link draw stream. The k-th sample depends only on the seed
// and k.
class LinkSampler {
 public:
  explicit LinkSampler(LinkModel link);

  TransferSample next(uint64_t size);
  const LinkModel& link() const { return link_; }
  uint64_t draws() const { return draws_; }

 private:
  LinkModel link_;
  std::mt19937_64 rng_;
  uint64_t draws_ = 0;
};

struct RetryPolicy {
  double base_delay = 0.1;
  double multiplier = 2.0;
  uint32_t max_attempts = 5;
  double timeout = 5.0;

  // Delay before attempt k + 1, k >= 1.
  double backoff(uint32_t attempt) const;
  void validate() const;
};

struct TransportStats {
  uint64_t transfers = 0;
  uint64_t attempts = 0;
  uint64_t timeouts = 0;
  uint64_t failures = 0;
  uint64_t deliveries = 0;
  uint64_t late_after_failure = 0;
  uint64_t payload_bytes_moved = 0;
  // Payload bytes that went through the control plane. Always zero: only
  // descriptors travel there.
  uint64_t control_plane_payload_bytes = 0;
};

using TransferId = uint64_t;

struct TransferCallbacks {
  // Every arrival at the receiver, duplicates included.
  std::function<void(double now)> on_deliver;
  // First successful arrival; elapsed = now - dispatch time.
  std::function<void(double elapsed)> on_complete;
  // Attempts exhausted. No further deliveries are reported afterwards.
  std::function<void(double now)> on_failed;
};

class Transport {
 public:
  Transport(EventEngine& engine, LinkModel link, RetryPolicy retry);

  // Returns immediately; the sender is free while the payload is in flight.
  TransferId send_async(const PayloadHandle& handle, uint32_t dest,
                        TransferCallbacks callbacks);
  // Same wire behaviour. The caller holds its worker until on_complete or
  // on_failed and books the elapsed time as blocked.
  TransferId send_sync(const PayloadHandle& handle, uint32_t dest,
                       TransferCallbacks callbacks);

  const TransportStats& stats() const { return stats_; }
  const LinkSampler& sampler() const { return sampler_; }
  size_t active_transfers() const { return transfers_.size(); }

 private:
  struct State {
    PayloadHandle handle;
    uint32_t dest = 0;
    uint32_t attempt = 0;
    uint32_t in_flight = 0;
    double dispatched_at = 0.0;
    bool completed = false;
    bool failed = false;
    EventId timeout_event = 0;
    TransferCallbacks callbacks;
  };

  TransferId start(const PayloadHandle& handle, uint32_t dest,
                   TransferCallbacks callbacks);
  void launch_attempt(TransferId id);
  void on_arrival(TransferId id);
  void on_timeout(TransferId id, uint32_t attempt);
  void maybe_forget(TransferId id);

  EventEngine& engine_;
  LinkSampler sampler_;
  RetryPolicy retry_;
  TransferId next_id_ = 0;
  std::unordered_map<TransferId, State> transfers_;
  TransportStats stats_;
};

struct BatchPolicy {
  size_t max_messages = 16;
  size_t max_bytes = 64 * 1024;
  double flush_timeout = 0.001;

  void validate() const;
};

enum class FlushReason { kCount, kBytes, kTimeout, kOversize };

template <typename Msg>
struct Batch {
  std::vector<Msg> messages;
  size_t bytes = 0;
  double flush_time = 0.0;
  FlushReason reason = FlushReason::kCount;
};

// Dual-trigger batching: a batch leaves when it reaches max_messages, when
// its bytes reach max_bytes, or when its oldest message has waited
// flush_timeout. A message larger than max_bytes leaves alone, after any
// pending batch, so order is preserved.
template <typename Msg>
class Batcher {
 public:
  using FlushFn = std::function<void(Batch<Msg>&&)>;

  Batcher(EventEngine& engine, BatchPolicy policy, FlushFn on_flush)
      : engine_(engine), policy_(policy), on_flush_(std::move(on_flush)) {
    policy_.validate();
  }

  void submit(Msg msg, size_t bytes) {
    if (bytes > policy_.max_bytes) {
      if (!pending_.messages.empty()) flush(FlushReason::kOversize);
      pending_.messages.push_back(std::move(msg));
      pending_.bytes = bytes;
      flush(FlushReason::kOversize);
      return;
    }
    if (pending_.messages.empty()) {
      timer_ = engine_.schedule_after(policy_.flush_timeout, [this] {
        timer_armed_ = false;
        flush(FlushReason::kTimeout);
      });
      timer_armed_ = true;
    }
    pending_.messages.push_back(std::move(msg));
    pending_.bytes += bytes;
    if (pending_.messages.size() >= policy_.max_messages) {
      flush(FlushReason::kCount);
    } else if (pending_.bytes >= policy_.max_bytes) {
      flush(FlushReason::kBytes);
    }
  }

  size_t pending() const { return pending_.messages.size(); }
  uint64_t flushes() const { return flushes_; }

 private:
  void flush(FlushReason reason) {
    if (timer_armed_) {
      engine_.cancel(timer_);
      timer_armed_ = false;
    }
    if (pending_.messages.empty()) return;
    Batch<Msg> out = std::move(pending_);
    pending_ = Batch<Msg>{};
    out.flush_time = engine_.now();
    out.reason = reason;
    ++flushes_;
    on_flush_(std::move(out));
  }

  EventEngine& engine_;
  BatchPolicy policy_;
  FlushFn on_flush_;
  Batch<Msg> pending_;
  EventId timer_ = 0;
  bool timer_armed_ = false;
  uint64_t flushes_ = 0;
};

enum class Delivery { kFresh, kDuplicate };

// First sighting of (request, admission attempt) at a stage is fresh; every
// later one is a duplicate.
class DedupSet {
 public:
  Delivery check(const RequestId& id, uint32_t attempt);
  size_t size() const { return seen_.size(); }

 private:
  struct KeyHash {
    size_t operator()(const std::pair<RequestId, uint32_t>& k) const noexcept {
      return RequestIdHash{}(k.first) ^ (static_cast<size_t>(k.second) << 1);
    }
  };
  std::unordered_set<std::pair<RequestId, uint32_t>, KeyHash> seen_;
};

}  // namespace disagsim

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

// Control-plane metadata queues.
//
// Slots are fixed 128-byte little-endian records. A RingBuffer is a bounded
// multi-producer multi-consumer circular queue in which producers and
// consumers claim tickets with fetch-and-add on the tail and head counters.
// Two credit counters gate the claims so a full ring refuses a producer
// without touching the tail, and an empty ring refuses a consumer without
// touching the head. Each cell carries a turn word that doubles as the
// readiness flag:
//
//   turn == t                 cell free for the producer holding ticket t
//   turn == t + 1             cell published for the consumer of ticket t
//   turn == t + capacity      consumer done; free for ticket t + capacity
//
// Every operation performs a fixed number of atomic read-modify-writes.

#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "disagsim/common.h"
#include "disagsim/workload.h"

namespace disagsim {

inline constexpr size_t kSlotBytes = 128;
using SlotBytes = std::array<uint8_t, kSlotBytes>;

enum class PhaseTag : uint8_t { kRequest = 0, kPhase1 = 1, kPhase2 = 2 };

struct PayloadDescriptor {
  uint32_t node_id = 0;
  uint64_t buffer_token = 0;
  uint64_t length = 0;

  friend bool operator==(const PayloadDescriptor&,
                         const PayloadDescriptor&) = default;
};

// Byte layout (offsets):
//    0  request_id.lo   u64      40  buffer_token   u64
//    8  request_id.hi   u64      48  length         u64
//   16  steps           u16      56  enqueue_time   f64
//   18  width           u16      64  sequence       u64
//   20  height          u16      72  attempt        u32
//   22  frames          u16      76  reserved (52 bytes, zero)
//   24  phase           u8
//   25  pad (3 bytes, zero)
//   28  producer        u32
//   32  node_id         u32
//   36  pad (4 bytes, zero)
struct MetadataSlot {
  RequestId request_id;
  uint16_t steps = 0;
  uint16_t width = 0;
  uint16_t height = 0;
  uint16_t frames = 0;
  PhaseTag phase = PhaseTag::kRequest;
  uint32_t producer = 0;
  PayloadDescriptor payload;
  double enqueue_time = 0.0;
  uint64_t sequence = 0;
  uint32_t attempt = 0;

  WorkloadKey key() const { return {steps, width, height, frames}; }

  friend bool operator==(const MetadataSlot&, const MetadataSlot&) = default;
};

// Throws ValidationError when a workload dimension does not fit in u16.
MetadataSlot make_slot(const RequestId& id, const WorkloadParams& params,
                       PhaseTag phase, uint32_t producer);

SlotBytes encode_slot(const MetadataSlot& slot);
// Throws ValidationError on a bad phase tag or non-zero padding.
MetadataSlot decode_slot(const SlotBytes& bytes);
// One line: 256 hex digits, then the decoded fields.
std::string dump_slot(const MetadataSlot& slot);

struct EnqueueResult {
  bool accepted = false;  // false = backpressure
  uint64_t ticket = 0;
};

struct DequeueResult {
  MetadataSlot slot;
  uint64_t ticket = 0;
};

class RingBuffer {
 public:
  // capacity must be a power of two and >= 2.
  explicit RingBuffer(size_t capacity);

  RingBuffer(const RingBuffer&) = delete;
  RingBuffer& operator=(const RingBuffer&) = delete;

  EnqueueResult enqueue(const MetadataSlot& slot);
  // nullopt = empty.
  std::optional<DequeueResult> dequeue();

  size_t capacity() const { return capacity_; }
  uint64_t head() const { return head_.load(std::memory_order_acquire); }
  uint64_t tail() const { return tail_.load(std::memory_order_acquire); }
  // tail - head, reading the tail first so a concurrent sampler never sees
  // more than capacity.
  int64_t occupancy() const;
  double occupancy_fraction() const {
    return static_cast<double>(occupancy()) / static_cast<double>(capacity_);
  }

 private:
  struct alignas(64) Cell {
    std::atomic<uint64_t> turn{0};
    SlotBytes bytes{};
  };

  const size_t capacity_;
  const uint64_t mask_;
  std::unique_ptr<Cell[]> cells_;
  alignas(64) std::atomic<uint64_t> tail_{0};
  alignas(64) std::atomic<uint64_t> head_{0};
  alignas(64) std::atomic<int64_t> free_credits_;
  alignas(64) std::atomic<int64_t> ready_credits_{0};
};

struct BufferLocation {
  uint32_t ring_id = 0;
  double latency = 0.0;  // round-trip estimate, seconds
};

// Per-instance table of the rings serving each logical queue.
class QueueTable {
 public:
  explicit QueueTable(double reroute_threshold = 0.8)
      : reroute_threshold_(reroute_threshold) {}

  void add(PhaseTag queue, BufferLocation location);
  const std::vector<BufferLocation>& buffers(PhaseTag queue) const;
  double reroute_threshold() const { return reroute_threshold_; }

 private:
  double reroute_threshold_;
  std::array<std::vector<BufferLocation>, 3> buffers_;
};

// Picks the lowest-latency ring whose occupancy fraction is below the
// reroute threshold; if every ring is at or above it, the least occupied
// one. Missing hints count as empty. Throws ConfigError with no rings.
uint32_t route(const QueueTable& table, PhaseTag queue,
               const std::map<uint32_t, double>& occupancy_hints);

}  // namespace disagsim

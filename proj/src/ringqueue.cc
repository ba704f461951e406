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

#include "disagsim/ringqueue.h"

#include <bit>
#include <cstring>
#include <limits>
#include <thread>

#include <fmt/format.h>

namespace disagsim {

namespace {

template <typename T>
void put_le(SlotBytes& out, size_t offset, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (size_t i = 0; i < sizeof(T); ++i) {
    out[offset + i] = static_cast<uint8_t>(value >> (8 * i));
  }
}

template <typename T>
T get_le(const SlotBytes& in, size_t offset) {
  static_assert(std::is_unsigned_v<T>);
  T value = 0;
  for (size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<T>(in[offset + i]) << (8 * i));
  }
  return value;
}

bool zero_range(const SlotBytes& in, size_t from, size_t to) {
  for (size_t i = from; i < to; ++i) {
    if (in[i] != 0) return false;
  }
  return true;
}

uint16_t narrow16(uint32_t v, const char* field) {
  if (v > std::numeric_limits<uint16_t>::max()) {
    throw ValidationError(
        fmt::format("{} = {} does not fit the 16-bit slot field", field, v));
  }
  return static_cast<uint16_t>(v);
}

inline void spin_pause() { std::this_thread::yield(); }

}  // namespace

MetadataSlot make_slot(const RequestId& id, const WorkloadParams& params,
                       PhaseTag phase, uint32_t producer) {
  MetadataSlot slot;
  slot.request_id = id;
  slot.steps = narrow16(params.steps, "steps");
  slot.width = narrow16(params.width, "width");
  slot.height = narrow16(params.height, "height");
  slot.frames = narrow16(params.frames, "frames");
  slot.phase = phase;
  slot.producer = producer;
  return slot;
}

SlotBytes encode_slot(const MetadataSlot& slot) {
  SlotBytes out{};
  put_le<uint64_t>(out, 0, slot.request_id.lo);
  put_le<uint64_t>(out, 8, slot.request_id.hi);
  put_le<uint16_t>(out, 16, slot.steps);
  put_le<uint16_t>(out, 18, slot.width);
  put_le<uint16_t>(out, 20, slot.height);
  put_le<uint16_t>(out, 22, slot.frames);
  out[24] = static_cast<uint8_t>(slot.phase);
  put_le<uint32_t>(out, 28, slot.producer);
  put_le<uint32_t>(out, 32, slot.payload.node_id);
  put_le<uint64_t>(out, 40, slot.payload.buffer_token);
  put_le<uint64_t>(out, 48, slot.payload.length);
  put_le<uint64_t>(out, 56, std::bit_cast<uint64_t>(slot.enqueue_time));
  put_le<uint64_t>(out, 64, slot.sequence);
  put_le<uint32_t>(out, 72, slot.attempt);
  return out;
}

MetadataSlot decode_slot(const SlotBytes& in) {
  if (in[24] > static_cast<uint8_t>(PhaseTag::kPhase2)) {
    throw ValidationError(fmt::format("slot phase tag {} is invalid", in[24]));
  }
  if (!zero_range(in, 25, 28) || !zero_range(in, 36, 40) ||
      !zero_range(in, 76, kSlotBytes)) {
    throw ValidationError("slot padding is not zero");
  }
  MetadataSlot slot;
  slot.request_id.lo = get_le<uint64_t>(in, 0);
  slot.request_id.hi = get_le<uint64_t>(in, 8);
  slot.steps = get_le<uint16_t>(in, 16);
  slot.width = get_le<uint16_t>(in, 18);
  slot.height = get_le<uint16_t>(in, 20);
  slot.frames = get_le<uint16_t>(in, 22);
  slot.phase = static_cast<PhaseTag>(in[24]);
  slot.producer = get_le<uint32_t>(in, 28);
  slot.payload.node_id = get_le<uint32_t>(in, 32);
  slot.payload.buffer_token = get_le<uint64_t>(in, 40);
  slot.payload.length = get_le<uint64_t>(in, 48);
  slot.enqueue_time = std::bit_cast<double>(get_le<uint64_t>(in, 56));
  slot.sequence = get_le<uint64_t>(in, 64);
  slot.attempt = get_le<uint32_t>(in, 72);
  return slot;
}

std::string dump_slot(const MetadataSlot& slot) {
  SlotBytes bytes = encode_slot(slot);
  std::string out;
  out.reserve(kSlotBytes * 2 + 160);
  for (uint8_t b : bytes) out += fmt::format("{:02x}", b);
  out += fmt::format(
      " id={} key={}/{}x{}/{} phase={} producer={} node={} token={} len={} "
      "t={} seq={} attempt={}",
      slot.request_id.to_string(), slot.steps, slot.width, slot.height,
      slot.frames, static_cast<int>(slot.phase), slot.producer,
      slot.payload.node_id, slot.payload.buffer_token, slot.payload.length,
      slot.enqueue_time, slot.sequence, slot.attempt);
  return out;
}

RingBuffer::RingBuffer(size_t capacity)
    : capacity_(capacity),
      mask_(capacity - 1),
      cells_(std::make_unique<Cell[]>(capacity)),
      free_credits_(static_cast<int64_t>(capacity)) {
  if (capacity < 2 || !std::has_single_bit(capacity)) {
    throw ValidationError(fmt::format(
        "ring capacity {} must be a power of two >= 2", capacity));
  }
  for (size_t i = 0; i < capacity; ++i) {
    cells_[i].turn.store(i, std::memory_order_relaxed);
  }
}

EnqueueResult RingBuffer::enqueue(const MetadataSlot& slot) {
  if (free_credits_.fetch_sub(1, std::memory_order_acq_rel) <= 0) {
    free_credits_.fetch_add(1, std::memory_order_acq_rel);
    return {false, 0};
  }
  const uint64_t ticket = tail_.fetch_add(1, std::memory_order_acq_rel);
  Cell& cell = cells_[ticket & mask_];
  // The previous lap's consumer may still be copying out of this cell.
  while (cell.turn.load(std::memory_order_acquire) != ticket) spin_pause();
  cell.bytes = encode_slot(slot);
  cell.turn.store(ticket + 1, std::memory_order_release);
  ready_credits_.fetch_add(1, std::memory_order_acq_rel);
  return {true, ticket};
}

std::optional<DequeueResult> RingBuffer::dequeue() {
  if (ready_credits_.fetch_sub(1, std::memory_order_acq_rel) <= 0) {
    ready_credits_.fetch_add(1, std::memory_order_acq_rel);
    return std::nullopt;
  }
  const uint64_t ticket = head_.fetch_add(1, std::memory_order_acq_rel);
  Cell& cell = cells_[ticket & mask_];
  // A credit guarantees that some producer holds this ticket; wait until it
  // has published.
  while (cell.turn.load(std::memory_order_acquire) != ticket + 1) spin_pause();
  SlotBytes bytes = cell.bytes;
  cell.turn.store(ticket + capacity_, std::memory_order_release);
  free_credits_.fetch_add(1, std::memory_order_acq_rel);
  return DequeueResult{decode_slot(bytes), ticket};
}

int64_t RingBuffer::occupancy() const {
  const uint64_t t = tail_.load(std::memory_order_acquire);
  const uint64_t h = head_.load(std::memory_order_acquire);
  return static_cast<int64_t>(t) - static_cast<int64_t>(h);
}

void QueueTable::add(PhaseTag queue, BufferLocation location) {
  buffers_[static_cast<size_t>(queue)].push_back(location);
}

const std::vector<BufferLocation>& QueueTable::buffers(PhaseTag queue) const {
  return buffers_[static_cast<size_t>(queue)];
}

uint32_t route(const QueueTable& table, PhaseTag queue,
               const std::map<uint32_t, double>& occupancy_hints) {
  const auto& list = table.buffers(queue);
  if (list.empty()) {
    throw ConfigError(fmt::format("no ring registered for queue {}",
                                  static_cast<int>(queue)));
  }
  auto occupancy_of = [&](uint32_t ring) {
    auto it = occupancy_hints.find(ring);
    return it == occupancy_hints.end() ? 0.0 : it->second;
  };
  const BufferLocation* best = nullptr;
  for (const auto& loc : list) {
    if (occupancy_of(loc.ring_id) >= table.reroute_threshold()) continue;
    if (!best || loc.latency < best->latency) best = &loc;
  }
  if (best) return best->ring_id;
  // Everything is congested: least occupied, then lowest latency.
  best = &list.front();
  for (const auto& loc : list) {
    double o = occupancy_of(loc.ring_id);
    double bo = occupancy_of(best->ring_id);
    if (o < bo || (o == bo && loc.latency < best->latency)) best = &loc;
  }
  return best->ring_id;
}

}  // namespace disagsim

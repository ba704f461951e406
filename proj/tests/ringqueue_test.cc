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

#include <atomic>
#include <cstring>
#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "disagsim/ringqueue.h"
#include "ring_stress.h"

namespace disagsim {
namespace {

MetadataSlot sample_slot() {
  WorkloadParams p;
  p.steps = 4;
  MetadataSlot s = make_slot(RequestId{0x1122334455667788ULL, 0x99aabbccddeeff00ULL},
                             p, PhaseTag::kPhase1, 7);
  s.payload = {3, 0xdeadbeefULL, 8'000'000};
  s.enqueue_time = 12.5;
  s.sequence = 42;
  s.attempt = 2;
  return s;
}

template <typename T>
T read_le(const SlotBytes& b, size_t off) {
  T v{};
  for (size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<T>(b[off + i]) << (8 * i));
  }
  return v;
}

TEST(SlotTest, RoundTrip) {
  MetadataSlot s = sample_slot();
  EXPECT_EQ(decode_slot(encode_slot(s)), s);
}

TEST(SlotTest, LittleEndianOffsets) {
  MetadataSlot s = sample_slot();
  SlotBytes b = encode_slot(s);
  EXPECT_EQ(read_le<uint64_t>(b, 0), s.request_id.lo);
  EXPECT_EQ(read_le<uint64_t>(b, 8), s.request_id.hi);
  EXPECT_EQ(read_le<uint16_t>(b, 16), 4);
  EXPECT_EQ(read_le<uint16_t>(b, 18), 832);
  EXPECT_EQ(read_le<uint16_t>(b, 20), 480);
  EXPECT_EQ(read_le<uint16_t>(b, 22), 81);
  EXPECT_EQ(b[24], 1);
  EXPECT_EQ(read_le<uint32_t>(b, 28), 7u);
  EXPECT_EQ(read_le<uint32_t>(b, 32), 3u);
  EXPECT_EQ(read_le<uint64_t>(b, 40), 0xdeadbeefULL);
  EXPECT_EQ(read_le<uint64_t>(b, 48), 8'000'000u);
  double t = 0.0;
  const uint64_t bits = read_le<uint64_t>(b, 56);
  std::memcpy(&t, &bits, sizeof t);
  EXPECT_EQ(t, 12.5);
  EXPECT_EQ(read_le<uint64_t>(b, 64), 42u);
  EXPECT_EQ(read_le<uint32_t>(b, 72), 2u);
  for (size_t i = 76; i < kSlotBytes; ++i) EXPECT_EQ(b[i], 0) << i;
}

TEST(SlotTest, RejectsCorruption) {
  SlotBytes b = encode_slot(sample_slot());
  SlotBytes bad_phase = b;
  bad_phase[24] = 9;
  EXPECT_THROW(decode_slot(bad_phase), ValidationError);
  SlotBytes bad_pad = b;
  bad_pad[100] = 1;
  EXPECT_THROW(decode_slot(bad_pad), ValidationError);
}

TEST(SlotTest, DimensionOverflow) {
  WorkloadParams p;
  p.width = 70000;
  EXPECT_THROW(make_slot({}, p, PhaseTag::kRequest, 0), ValidationError);
}

TEST(RingBufferTest, CapacityMustBePowerOfTwo) {
  EXPECT_THROW(RingBuffer(3), Error);
  EXPECT_THROW(RingBuffer(1), Error);
  EXPECT_NO_THROW(RingBuffer(2));
}

TEST(RingBufferTest, FullAndEmpty) {
  RingBuffer r(4);
  EXPECT_FALSE(r.dequeue().has_value());
  MetadataSlot s = sample_slot();
  for (int i = 0; i < 4; ++i) {
    s.sequence = i;
    auto e = r.enqueue(s);
    EXPECT_TRUE(e.accepted);
    EXPECT_EQ(e.ticket, static_cast<uint64_t>(i));
  }
  EXPECT_FALSE(r.enqueue(s).accepted);
  EXPECT_EQ(r.occupancy(), 4);
  EXPECT_DOUBLE_EQ(r.occupancy_fraction(), 1.0);
  for (int i = 0; i < 4; ++i) {
    auto d = r.dequeue();
    ASSERT_TRUE(d.has_value());
    EXPECT_EQ(d->slot.sequence, static_cast<uint64_t>(i));
  }
  EXPECT_FALSE(r.dequeue().has_value());
  EXPECT_EQ(r.occupancy(), 0);
}

TEST(RingBufferTest, WrapsManyTimes) {
  RingBuffer r(8);
  MetadataSlot s = sample_slot();
  uint64_t next_out = 0;
  for (uint64_t i = 0; i < 1000; ++i) {
    s.sequence = i;
    ASSERT_TRUE(r.enqueue(s).accepted);
    if (i % 3 != 0) {
      auto d = r.dequeue();
      ASSERT_TRUE(d.has_value());
      EXPECT_EQ(d->slot.sequence, next_out++);
    }
    if (r.occupancy() == 8) {
      while (auto d = r.dequeue()) EXPECT_EQ(d->slot.sequence, next_out++);
    }
  }
}

TEST(RingBufferTest, ConcurrentSmallProperty) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    RingStressResult res = ring_stress(4, 4, 20000, 16, seed);
    EXPECT_TRUE(res.multiset_equal) << "seed " << seed;
    EXPECT_TRUE(res.per_producer_fifo) << "seed " << seed;
    EXPECT_TRUE(res.bounds_held) << "seed " << seed;
  }
}

TEST(RouteTest, LowestLatencyBelowThreshold) {
  QueueTable t(0.8);
  t.add(PhaseTag::kPhase1, {0, 0.002});
  t.add(PhaseTag::kPhase1, {1, 0.001});
  EXPECT_EQ(route(t, PhaseTag::kPhase1, {}), 1u);
  EXPECT_EQ(route(t, PhaseTag::kPhase1, {{1, 0.9}}), 0u);
  // Both hot: least occupied.
  EXPECT_EQ(route(t, PhaseTag::kPhase1, {{0, 0.95}, {1, 0.85}}), 1u);
  EXPECT_THROW(route(t, PhaseTag::kPhase2, {}), ConfigError);
}

}  // namespace
}  // namespace disagsim

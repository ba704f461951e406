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

#include <gtest/gtest.h>

#include "disagsim/transport.h"

namespace disagsim {
namespace {

TEST(PayloadRegistryTest, LifecycleAndDoubleRelease) {
  PayloadRegistry reg;
  PayloadHandle a = reg.allocate(100, 1);
  PayloadHandle b = reg.allocate(200, 2);
  EXPECT_NE(a.payload_id, b.payload_id);
  EXPECT_EQ(reg.live_count(), 2u);
  reg.release(a);
  EXPECT_FALSE(reg.is_live(a));
  EXPECT_TRUE(reg.is_live(b));
  EXPECT_THROW(reg.release(a), InvariantViolation);
  EXPECT_THROW(reg.allocate(0, 0), ValidationError);
}

TEST(JitterTest, PresetsAndLiteral) {
  EXPECT_EQ(parse_jitter("none"), (JitterSpec{0.0, 0.0}));
  EXPECT_EQ(parse_jitter("stable"), (JitterSpec{0.05, 0.2}));
  EXPECT_EQ(parse_jitter("mild"), (JitterSpec{0.10, 0.2}));
  EXPECT_EQ(parse_jitter("moderate"), (JitterSpec{0.10, 2.0}));
  EXPECT_EQ(parse_jitter("severe"), (JitterSpec{0.20, 2.0}));
  EXPECT_EQ(parse_jitter("25%/0.5s"), (JitterSpec{0.25, 0.5}));
  EXPECT_THROW(parse_jitter("bad"), ConfigError);
  EXPECT_THROW(parse_jitter("150%/1s"), ConfigError);
  EXPECT_THROW(parse_jitter("10%/2"), ConfigError);
}

TEST(TransferTimeTest, LatencyPlusBytesOverBandwidth) {
  LinkModel l;
  l.bandwidth = 1e9;
  l.latency = 0.001;
  l.jitter = {0.1, 2.0};
  EXPECT_DOUBLE_EQ(transfer_time(l, 8'000'000, 0.5), 0.009);
  EXPECT_DOUBLE_EQ(transfer_time(l, 8'000'000, 0.05), 2.009);
  // Boundary: draw == p is not jittered.
  EXPECT_DOUBLE_EQ(transfer_time(l, 0, 0.1), 0.001);
}

TEST(LinkSamplerTest, SeededAndJitterFrequency) {
  LinkModel l;
  l.bandwidth = 1e9;
  l.jitter = {0.2, 2.0};
  l.seed = 11;
  LinkSampler a(l);
  LinkSampler b(l);
  int jittered = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    TransferSample x = a.next(1000);
    EXPECT_EQ(x.seconds, b.next(1000).seconds);
    if (x.seconds > 1.0) ++jittered;
  }
  // Binomial(20000, 0.2): sd ~57.
  EXPECT_NEAR(jittered, 4000, 300);
  l.drop_probability = 1.0;
  EXPECT_THROW(LinkSampler{l}, ValidationError);
}

TEST(RetryPolicyTest, ExponentialBackoff) {
  RetryPolicy r;
  EXPECT_DOUBLE_EQ(r.backoff(1), 0.1);
  EXPECT_DOUBLE_EQ(r.backoff(2), 0.2);
  EXPECT_DOUBLE_EQ(r.backoff(3), 0.4);
  EXPECT_DOUBLE_EQ(r.backoff(4), 0.8);
  r.multiplier = 1.0;
  EXPECT_THROW(r.validate(), ValidationError);
}

LinkModel plain_link(double latency) {
  LinkModel l;
  l.bandwidth = 1e9;
  l.latency = latency;
  return l;
}

TEST(TransportTest, SingleDelivery) {
  EventEngine eng;
  PayloadRegistry reg;
  Transport tr(eng, plain_link(0.5), RetryPolicy{});
  double elapsed = -1;
  int delivered = 0;
  tr.send_async(reg.allocate(1'000'000'000, 0), 1,
                {[&](double) { ++delivered; },
                 [&](double e) { elapsed = e; }, nullptr});
  eng.run();
  EXPECT_EQ(delivered, 1);
  EXPECT_DOUBLE_EQ(elapsed, 1.5);
  EXPECT_EQ(tr.stats().deliveries, 1u);
  EXPECT_EQ(tr.stats().payload_bytes_moved, 1'000'000'000u);
  EXPECT_EQ(tr.stats().control_plane_payload_bytes, 0u);
  EXPECT_EQ(tr.active_transfers(), 0u);
}

TEST(TransportTest, SlowCopyAndRetryBothArrive) {
  // Latency 2 s against a 1 s timeout: the retry launches at 1.1 s and the
  // original lands first.
  EventEngine eng;
  PayloadRegistry reg;
  RetryPolicy r;
  r.timeout = 1.0;
  Transport tr(eng, plain_link(2.0), r);
  std::vector<double> deliveries;
  double elapsed = -1;
  tr.send_async(reg.allocate(1, 0), 1,
                {[&](double now) { deliveries.push_back(now); },
                 [&](double e) { elapsed = e; }, nullptr});
  eng.run();
  ASSERT_EQ(deliveries.size(), 2u);
  EXPECT_NEAR(deliveries[0], 2.0, 1e-6);
  EXPECT_NEAR(deliveries[1], 3.1, 1e-6);
  EXPECT_NEAR(elapsed, 2.0, 1e-6);
  EXPECT_EQ(tr.stats().timeouts, 1u);
}

TEST(TransportTest, ExhaustedAttemptsFailAndLateCopiesAreDiscarded) {
  EventEngine eng;
  PayloadRegistry reg;
  RetryPolicy r;
  r.timeout = 1.0;
  r.max_attempts = 3;
  Transport tr(eng, plain_link(10.0), r);
  int failed = 0;
  int delivered = 0;
  double failed_at = 0;
  tr.send_sync(reg.allocate(1, 0), 1,
               {[&](double) { ++delivered; }, nullptr, [&](double now) {
                  ++failed;
                  failed_at = now;
                }});
  eng.run();
  EXPECT_EQ(failed, 1);
  EXPECT_EQ(delivered, 0);
  // Attempts at 0, 1.1, 2.3; the last times out at 3.3.
  EXPECT_NEAR(failed_at, 3.3, 1e-9);
  EXPECT_EQ(tr.stats().attempts, 3u);
  EXPECT_EQ(tr.stats().late_after_failure, 3u);
  EXPECT_EQ(tr.active_transfers(), 0u);
}

TEST(TransportTest, DropsResolveExactlyOnceProperty) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    EventEngine eng;
    PayloadRegistry reg;
    LinkModel l = plain_link(0.01);
    l.drop_probability = 0.4;
    l.seed = seed;
    RetryPolicy r;
    r.timeout = 0.5;
    r.max_attempts = 3;
    Transport tr(eng, l, r);
    const int n = 200;
    std::vector<int> outcome(n, 0);
    for (int i = 0; i < n; ++i) {
      tr.send_async(reg.allocate(1000, 0), 1,
                    {nullptr, [&, i](double) { ++outcome[i]; },
                     [&, i](double) { outcome[i] += 100; }});
    }
    eng.run();
    int failures = 0;
    for (int o : outcome) {
      ASSERT_TRUE(o == 1 || o == 100) << o;
      failures += o == 100;
    }
    EXPECT_EQ(static_cast<uint64_t>(failures), tr.stats().failures);
    EXPECT_EQ(tr.active_transfers(), 0u);
  }
}

struct Msg {
  int v;
};

TEST(BatcherTest, CountBytesTimeoutOversize) {
  EventEngine eng;
  std::vector<std::pair<FlushReason, std::vector<int>>> out;
  BatchPolicy p;
  p.max_messages = 3;
  p.max_bytes = 100;
  p.flush_timeout = 0.5;
  Batcher<Msg> b(eng, p, [&](Batch<Msg>&& batch) {
    std::vector<int> vs;
    for (auto& m : batch.messages) vs.push_back(m.v);
    out.emplace_back(batch.reason, vs);
  });
  b.submit({1}, 10);
  b.submit({2}, 10);
  b.submit({3}, 10);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].first, FlushReason::kCount);
  b.submit({4}, 60);
  b.submit({5}, 50);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[1].first, FlushReason::kBytes);
  b.submit({6}, 10);
  b.submit({7}, 500);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out[2].second, std::vector<int>{6});
  EXPECT_EQ(out[3].second, std::vector<int>{7});
  EXPECT_EQ(out[3].first, FlushReason::kOversize);
  b.submit({8}, 1);
  eng.run();
  ASSERT_EQ(out.size(), 5u);
  EXPECT_EQ(out[4].first, FlushReason::kTimeout);
  EXPECT_DOUBLE_EQ(eng.now(), 0.5);
  EXPECT_EQ(b.pending(), 0u);
}

TEST(DedupTest, FreshThenDuplicate) {
  DedupSet d;
  RequestId id{1, 2};
  EXPECT_EQ(d.check(id, 0), Delivery::kFresh);
  EXPECT_EQ(d.check(id, 0), Delivery::kDuplicate);
  EXPECT_EQ(d.check(id, 1), Delivery::kFresh);
  EXPECT_EQ(d.size(), 2u);
}

}  // namespace
}  // namespace disagsim

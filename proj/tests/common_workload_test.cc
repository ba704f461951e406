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

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "disagsim/common.h"
#include "disagsim/engine.h"
#include "disagsim/workload.h"

namespace disagsim {
namespace {

TEST(StageTest, ParseNamesAndLetters) {
  EXPECT_EQ(parse_stage("E"), Stage::kEncoder);
  EXPECT_EQ(parse_stage("transformer"), Stage::kTransformer);
  EXPECT_EQ(parse_stage("Decoder"), Stage::kDecoder);
  EXPECT_FALSE(parse_stage("vae").has_value());
  for (Stage s : kAllStages) {
    EXPECT_EQ(parse_stage(std::string(1, stage_letter(s))), s);
    EXPECT_EQ(parse_stage(stage_name(s)), s);
  }
}

TEST(RequestIdTest, HexRoundTrip) {
  RequestId id{0x0123456789abcdefULL, 0xfedcba9876543210ULL};
  const std::string hex = id.to_string();
  EXPECT_EQ(hex.size(), 32u);
  EXPECT_EQ(hex, "0123456789abcdeffedcba9876543210");
  EXPECT_EQ(RequestId::parse(hex), id);
  EXPECT_FALSE(RequestId::parse("xyz").has_value());
  EXPECT_FALSE(RequestId::parse(hex.substr(1)).has_value());
}

TEST(SeedTest, DerivedSeedsDifferByName) {
  EXPECT_NE(derive_seed(1, "trace"), derive_seed(1, "jitter"));
  EXPECT_NE(derive_seed(1, "trace"), derive_seed(2, "trace"));
  EXPECT_EQ(derive_seed(7, "ids"), derive_seed(7, "ids"));
}

TEST(SeedTest, UnitIntervalRange) {
  EXPECT_EQ(unit_interval(0), 0.0);
  EXPECT_LT(unit_interval(~0ULL), 1.0);
}

TEST(WorkloadKeyTest, FormatAndParse) {
  WorkloadKey k{4, 832, 480, 81};
  EXPECT_EQ(k.to_string(), "4/832x480/81");
  EXPECT_EQ(WorkloadKey::parse("4/832x480/81"), k);
  EXPECT_THROW(WorkloadKey::parse("4/832/81"), Error);
}

TEST(WorkloadParamsTest, TaskTagIsNotPartOfKey) {
  WorkloadParams a;
  WorkloadParams b;
  b.task_tag = "T2V";
  EXPECT_EQ(a.key(), b.key());
}

TEST(WorkloadParamsTest, RejectsZeroDimensions) {
  WorkloadParams p;
  p.steps = 0;
  EXPECT_THROW(p.validate(), ValidationError);
  p.steps = 1;
  p.frames = 0;
  EXPECT_THROW(p.validate(), ValidationError);
}

TEST(TraceTest, DeterministicPhaseCounts) {
  TraceSpec spec;
  TracePhase a;
  a.duration = 900;
  a.rate = 0.1;
  a.params.steps = 4;
  TracePhase b = a;
  b.params.steps = 1;
  spec.phases = {a, b};
  auto ev = generate_trace(spec);
  ASSERT_EQ(ev.size(), 180u);
  EXPECT_EQ(ev[89].params.steps, 4u);
  EXPECT_EQ(ev[90].params.steps, 1u);
  EXPECT_DOUBLE_EQ(ev[90].arrival_time, 900.0);
  for (size_t i = 1; i < ev.size(); ++i) {
    EXPECT_LE(ev[i - 1].arrival_time, ev[i].arrival_time);
  }
}

TEST(TraceTest, PoissonMeanRateAndSeedStability) {
  TraceSpec spec;
  spec.rng_seed = 42;
  TracePhase p;
  p.duration = 20000;
  p.rate = 0.5;
  p.process = ArrivalProcess::kPoisson;
  spec.phases = {p};
  auto a = generate_trace(spec);
  auto b = generate_trace(spec);
  EXPECT_EQ(a, b);
  // Count ~ Poisson(10000); 5 sigma is 500.
  EXPECT_NEAR(static_cast<double>(a.size()), 10000.0, 500.0);
  spec.rng_seed = 43;
  EXPECT_NE(generate_trace(spec), a);
}

TEST(TraceTest, RejectsBadPhase) {
  TraceSpec spec;
  TracePhase p;
  p.duration = 10;
  p.rate = 0;
  spec.phases = {p};
  EXPECT_THROW(generate_trace(spec), ValidationError);
}

TEST(TraceTest, CsvRoundTrip) {
  std::vector<TraceEvent> ev;
  std::mt19937_64 rng(5);
  double t = 0.0;
  for (int i = 0; i < 50; ++i) {
    t += unit_interval(rng()) * 3.0;
    TraceEvent e;
    e.arrival_time = t;
    e.params.steps = 1 + static_cast<uint32_t>(rng() % 50);
    e.params.task_tag = i % 2 ? "I2V" : "T2V";
    ev.push_back(e);
  }
  auto parsed = parse_trace(serialize_trace(ev));
  EXPECT_FALSE(parsed.was_unsorted);
  EXPECT_EQ(parsed.events, ev);
}

TEST(TraceTest, ParseSortsAndReportsLine) {
  auto p = parse_trace("# comment\n5,1,832,480,81,I2V\n\n2,4,832,480,81,I2V\n");
  EXPECT_TRUE(p.was_unsorted);
  ASSERT_EQ(p.events.size(), 2u);
  EXPECT_EQ(p.events[0].arrival_time, 2.0);
  try {
    parse_trace("1,1,832,480,81,I2V\n2,zero,832,480,81,I2V\n");
    FAIL() << "expected a parse error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }
}

// --- event engine -------------------------------------------------------

TEST(EventEngineTest, TimeOrderWithSequenceTieBreak) {
  EventEngine eng;
  std::vector<int> order;
  eng.schedule_at(2.0, [&] { order.push_back(3); });
  eng.schedule_at(1.0, [&] { order.push_back(1); });
  eng.schedule_at(1.0, [&] { order.push_back(2); });
  eng.run();
  EXPECT_EQ(order, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(eng.now(), 2.0);
}

TEST(EventEngineTest, CancelAndPastScheduling) {
  EventEngine eng;
  bool fired = false;
  EventId id = eng.schedule_at(1.0, [&] { fired = true; });
  eng.cancel(id);
  eng.run();
  EXPECT_FALSE(fired);
  eng.schedule_at(5.0, [] {});
  eng.run();
  EXPECT_THROW(eng.schedule_at(4.0, [] {}), InvariantViolation);
}

TEST(EventEngineTest, ClockNeverMovesBackwardProperty) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    EventEngine eng;
    std::mt19937_64 rng(seed);
    std::vector<double> seen;
    std::function<void()> spawn = [&] {
      seen.push_back(eng.now());
      if (seen.size() < 500) {
        eng.schedule_after(unit_interval(rng()) * 2.0, spawn);
        if (rng() % 3 == 0) eng.schedule_after(0.0, spawn);
      }
    };
    eng.schedule_at(0.0, spawn);
    eng.run_until(1e9);
    for (size_t i = 1; i < seen.size(); ++i) ASSERT_LE(seen[i - 1], seen[i]);
  }
}

TEST(EventEngineTest, RunUntilStopsAtHorizon) {
  EventEngine eng;
  int n = 0;
  eng.schedule_at(1.0, [&] { ++n; });
  eng.schedule_at(3.0, [&] { ++n; });
  eng.run_until(2.0);
  EXPECT_EQ(n, 1);
  EXPECT_EQ(eng.pending(), 1u);
}

}  // namespace
}  // namespace disagsim

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

// Parallel kernels against their serial references.

#include <string>
#include <vector>

#include <benchmark/benchmark.h>

#include "disagsim/perfmodel.h"
#include "disagsim/ringqueue.h"
#include "disagsim/simharness.h"

namespace {

using namespace disagsim;

StageTimes times_1step() {
  WorkloadParams p;
  p.steps = 1;
  return stage_times(*builtin_profile("wan22-a10-table2"), p);
}

void BM_PlanParallel(benchmark::State& state) {
  const StageTimes t = times_1step();
  const auto g = static_cast<uint32_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(plan_allocation(g, t));
}

void BM_PlanSerial(benchmark::State& state) {
  const StageTimes t = times_1step();
  const auto g = static_cast<uint32_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(plan_allocation_serial(g, t));
}

BENCHMARK(BM_PlanParallel)->Arg(16)->Arg(64)->Arg(256);
BENCHMARK(BM_PlanSerial)->Arg(16)->Arg(64)->Arg(256);

std::vector<Scenario> batch() {
  std::vector<Scenario> out;
  const std::string dir = std::string(DISAGSIM_SOURCE_DIR) + "/scenarios/";
  for (const char* n : {"ratio-161-4step", "ratio-152-4step", "ratio-161-1step",
                        "ratio-152-1step", "hybrid-param-trace", "disagg-loaded"}) {
    out.push_back(load_scenario(dir + n + ".json"));
  }
  return out;
}

void BM_RunBatchParallel(benchmark::State& state) {
  const auto scs = batch();
  for (auto _ : state) benchmark::DoNotOptimize(run_batch(scs));
}

void BM_RunBatchSerial(benchmark::State& state) {
  const auto scs = batch();
  for (auto _ : state) benchmark::DoNotOptimize(run_batch_serial(scs));
}

BENCHMARK(BM_RunBatchParallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RunBatchSerial)->Unit(benchmark::kMillisecond);

void BM_RingEnqueueDequeue(benchmark::State& state) {
  RingBuffer ring(64);
  MetadataSlot s;
  for (auto _ : state) {
    ring.enqueue(s);
    benchmark::DoNotOptimize(ring.dequeue());
  }
}

BENCHMARK(BM_RingEnqueueDequeue);

}  // namespace

BENCHMARK_MAIN();

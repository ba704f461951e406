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

// Real-thread execution: each instance is a thread that sleeps its scaled
// stage time. Stages hand requests over through shared RingBuffers, so the
// lock-free queue runs under genuine concurrency.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <mutex>
#include <thread>

#include <fmt/format.h>

#include "disagsim/ringqueue.h"
#include "disagsim/simharness.h"

namespace disagsim {

namespace {

using Clock = std::chrono::steady_clock;

struct Shared {
  explicit Shared(size_t capacity)
      : rings{std::make_unique<RingBuffer>(capacity),
              std::make_unique<RingBuffer>(capacity),
              std::make_unique<RingBuffer>(capacity)} {}

  // Inbound ring of each stage.
  std::array<std::unique_ptr<RingBuffer>, 3> rings;
  // Live workers per stage, plus the admission thread at index 3.
  std::array<std::atomic<int>, 4> live{};
  std::atomic<bool> bounds_ok{true};
  std::mutex mu;
  std::vector<std::pair<RequestId, double>> done;  // id, sim time
};

void check_bounds(Shared& sh, const RingBuffer& r) {
  const int64_t occ = r.occupancy();
  if (occ < 0 || occ > static_cast<int64_t>(r.capacity())) {
    sh.bounds_ok.store(false, std::memory_order_relaxed);
  }
}

void push(Shared& sh, RingBuffer& r, const MetadataSlot& slot) {
  while (!r.enqueue(slot).accepted) std::this_thread::yield();
  check_bounds(sh, r);
}

}  // namespace

ThreadedReport run_threaded(const Scenario& sc, double time_scale) {
  sc.validate();
  if (sc.pipeline.deployment != DeploymentMode::kDisaggregated ||
      sc.scheduler_mode != SchedulerMode::kStatic ||
      sc.pipeline.handoff != HandoffMode::kAsync) {
    throw ConfigError(
        "threaded mode runs static disaggregated async scenarios only");
  }
  if (!(time_scale > 0.0)) throw ValidationError("time scale must be > 0");

  const Allocation alloc = sc.initial_allocation();
  const std::vector<TraceEvent> events = sc.trace();
  const uint64_t ids_seed = derive_seed(sc.seed, "ids");
  Shared sh(sc.pipeline.ring_capacity);
  const auto start = Clock::now();
  auto wall = [&](double sim) {
    return start + std::chrono::duration_cast<Clock::duration>(
                       std::chrono::duration<double>(sim * time_scale));
  };
  auto sim_now = [&] {
    return std::chrono::duration<double>(Clock::now() - start).count() /
           time_scale;
  };

  std::vector<RequestId> admitted;
  admitted.reserve(events.size());
  for (size_t k = 0; k < events.size(); ++k) {
    admitted.push_back(RequestId{mix64(ids_seed + k), k});
  }

  std::vector<std::thread> threads;
  sh.live[3] = 1;
  for (Stage s : kAllStages) sh.live[index_of(s)] = static_cast<int>(alloc[s]);

  threads.emplace_back([&] {
    for (size_t k = 0; k < events.size(); ++k) {
      std::this_thread::sleep_until(wall(events[k].arrival_time));
      MetadataSlot slot = make_slot(admitted[k], events[k].params,
                                    PhaseTag::kRequest, 0xffffffffu);
      slot.sequence = k;
      slot.enqueue_time = events[k].arrival_time;
      push(sh, *sh.rings[0], slot);
    }
    sh.live[3].fetch_sub(1, std::memory_order_release);
  });

  for (Stage s : kAllStages) {
    const size_t si = index_of(s);
    // The upstream of E is the admission thread.
    const size_t upstream = si == 0 ? 3 : si - 1;
    for (uint32_t w = 0; w < alloc[s]; ++w) {
      threads.emplace_back([&, s, si, upstream, w] {
        RingBuffer& in = *sh.rings[si];
        while (true) {
          const bool upstream_done =
              sh.live[upstream].load(std::memory_order_acquire) == 0;
          auto got = in.dequeue();
          if (!got) {
            if (upstream_done) break;
            std::this_thread::yield();
            continue;
          }
          check_bounds(sh, in);
          MetadataSlot slot = got->slot;
          WorkloadParams p;
          p.steps = slot.steps;
          p.width = slot.width;
          p.height = slot.height;
          p.frames = slot.frames;
          const double t = stage_time(sc.profile, s, p);
          std::this_thread::sleep_until(Clock::now() +
                                        std::chrono::duration_cast<Clock::duration>(
                                            std::chrono::duration<double>(
                                                t * time_scale)));
          if (s == Stage::kDecoder) {
            std::lock_guard lock(sh.mu);
            sh.done.emplace_back(slot.request_id, sim_now());
          } else {
            slot.phase = s == Stage::kEncoder ? PhaseTag::kPhase1
                                              : PhaseTag::kPhase2;
            slot.producer = w;
            push(sh, *sh.rings[si + 1], slot);
          }
        }
        sh.live[si].fetch_sub(1, std::memory_order_release);
      });
    }
  }
  for (auto& t : threads) t.join();

  ThreadedReport rep;
  rep.admissions = events.size();
  rep.completions = sh.done.size();
  rep.ring_bounds_held = sh.bounds_ok.load();
  std::vector<RequestId> finished;
  const double warmup = sc.effective_warmup();
  uint64_t steady = 0;
  for (const auto& [id, t] : sh.done) {
    finished.push_back(id);
    if (t >= warmup && t < sc.duration) ++steady;
  }
  if (sc.duration > warmup) {
    rep.steady_qpm = static_cast<double>(steady) * 60.0 / (sc.duration - warmup);
  }
  std::sort(finished.begin(), finished.end());
  std::sort(admitted.begin(), admitted.end());
  rep.multiset_equal = finished == admitted;
  return rep;
}

}  // namespace disagsim

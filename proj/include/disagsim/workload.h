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

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "disagsim/common.h"

namespace disagsim {

// Identity of a workload for cost lookup and change detection. The task tag
// is deliberately not part of it.
struct WorkloadKey {
  uint32_t steps = 0;
  uint32_t width = 0;
  uint32_t height = 0;
  uint32_t frames = 0;

  // "steps/widthxheight/frames", the profile-file key format.
  std::string to_string() const;
  static WorkloadKey parse(std::string_view text);

  friend auto operator<=>(const WorkloadKey&, const WorkloadKey&) = default;
};

struct WorkloadParams {
  uint32_t steps = 1;
  uint32_t width = 832;
  uint32_t height = 480;
  uint32_t frames = 81;
  std::string task_tag = "I2V";

  WorkloadKey key() const { return {steps, width, height, frames}; }
  // Throws ValidationError naming the offending field.
  void validate() const;

  friend bool operator==(const WorkloadParams&,
                         const WorkloadParams&) = default;
};

struct TraceEvent {
  double arrival_time = 0.0;
  WorkloadParams params;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

enum class ArrivalProcess { kDeterministic, kPoisson };

struct TracePhase {
  double duration = 0.0;
  ArrivalProcess process = ArrivalProcess::kDeterministic;
  double rate = 0.0;  // requests per second
  WorkloadParams params;
};

struct TraceSpec {
  std::vector<TracePhase> phases;
  uint64_t rng_seed = 0;

  double total_duration() const;
  void validate() const;
};

// Per-stage timestamps of one request, in simulation seconds. -1 = not
// reached.
struct StageTimestamps {
  double enqueue = -1.0;
  double start = -1.0;
  double finish = -1.0;
  double handoff_complete = -1.0;
};

struct Request {
  RequestId request_id;
  double arrival_time = 0.0;
  WorkloadParams params;
  PerStage<StageTimestamps> stage_timestamps{};
  uint32_t attempt_count = 0;
};

std::vector<TraceEvent> generate_trace(const TraceSpec& spec);

struct ParsedTrace {
  std::vector<TraceEvent> events;
  // Set when the input was not already in arrival order.
  bool was_unsorted = false;
};

// CSV: arrival_time_s,steps,width,height,frames,task_tag. Optional header,
// '#' comments and blank lines are skipped. Errors carry the line number.
ParsedTrace parse_trace(std::string_view text);
std::string serialize_trace(const std::vector<TraceEvent>& events);

}  // namespace disagsim

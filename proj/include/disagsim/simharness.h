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

// Scenario documents, the run loop binding every module together, run
// reports and their CSV/summary emission.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "disagsim/perfmodel.h"
#include "disagsim/pipeline.h"
#include "disagsim/scheduler.h"
#include "disagsim/workload.h"

namespace disagsim {

enum class SchedulerMode { kStatic, kHybrid };

struct PhaseSpec {
  double duration = 0.0;
  ArrivalProcess process = ArrivalProcess::kDeterministic;
  // Exactly one of rate (req/s) and saturation (multiple of the initial
  // allocation's predicted capacity) is set.
  std::optional<double> rate;
  std::optional<double> saturation;
  WorkloadParams params;
};

struct Scenario {
  std::string name = "unnamed";
  ClusterSpec cluster;
  // Trailing nodes held back until the scheduler asks for them.
  uint32_t standby_nodes = 0;
  StageProfile profile;
  std::vector<PhaseSpec> phases;
  // Replaces the generated trace when non-empty.
  std::vector<TraceEvent> trace_events;
  PipelineConfig pipeline;
  SchedulerMode scheduler_mode = SchedulerMode::kStatic;
  // Initial (and, for static runs, fixed) allocation. Planned for the first
  // phase when unset.
  std::optional<Allocation> allocation;
  uint32_t monolithic_instances = 1;
  SchedulerConfig scheduler;
  double duration = 0.0;  // admissions stop here
  // Excluded from steady-state statistics; 3x the longest stage when unset.
  std::optional<double> warmup;
  uint64_t seed = 1;
  // Extra simulated time allowed for draining after duration.
  double drain_limit = 20000.0;
  // Resolved document, overrides included. Echoed in summaries.
  nlohmann::json document;
  std::vector<std::string> overrides;

  void validate() const;
  std::vector<bool> node_enabled() const;
  uint32_t initial_gpus() const;
  Allocation initial_allocation() const;
  double effective_warmup() const;
  // Predicted completions/s of the initial deployment for the params.
  double predicted_capacity(const WorkloadParams& params) const;
  TraceSpec trace_spec() const;
  std::vector<TraceEvent> trace() const;
};

// Every dotted key a scenario document may carry. "[]" stands for an array
// index.
const std::vector<std::string>& scenario_keys();

// "a.b.c=value". The value is parsed as JSON and falls back to a string.
// Throws ConfigError for keys outside scenario_keys().
void apply_override(nlohmann::json& doc, std::string_view assignment);

// Relative trace/profile paths resolve against base_dir.
Scenario scenario_from_json(const nlohmann::json& doc,
                            const std::vector<std::string>& overrides = {},
                            const std::string& base_dir = "");
// Throws IoError with the path when the file cannot be read.
Scenario load_scenario(const std::string& path,
                       const std::vector<std::string>& overrides = {});

struct ThroughputPoint {
  uint32_t minute = 0;
  double qpm = 0.0;
  Stage bottleneck = Stage::kTransformer;
};

struct LatencySample {
  RequestId id;
  double arrival = 0.0;
  double completion = 0.0;

  double e2e() const { return completion - arrival; }
};

struct UtilizationSample {
  double time = 0.0;
  MetricsSnapshot metrics;
  size_t in_flight = 0;
};

struct AllocationChange {
  double time = 0.0;
  Allocation alloc;
  std::string reason;
};

struct Quantiles {
  double p50 = 0.0;
  double p90 = 0.0;
  double p99 = 0.0;
  double mean = 0.0;
};

// Nearest-rank quantiles. Zeros for an empty sample.
Quantiles latency_quantiles(std::vector<double> values);

struct RunReport {
  std::string scenario;
  uint64_t seed = 0;
  double duration = 0.0;
  double warmup = 0.0;
  double end_time = 0.0;
  uint64_t admissions = 0;
  uint64_t completions = 0;
  uint64_t failures = 0;
  uint64_t rejections = 0;
  std::vector<ThroughputPoint> throughput;
  std::vector<LatencySample> latencies;  // completion order
  Quantiles quantiles;
  std::vector<UtilizationSample> utilization;
  std::vector<AllocationChange> allocations;
  std::vector<ScalingDecision> decisions;
  std::vector<FailedRequest> failed;
  std::string event_log;
  // Completions in [warmup, duration) per minute.
  double steady_qpm = 0.0;
  TransportStats transport;
  bool overlap_witnessed = false;
  Allocation final_allocation;
  uint32_t final_gpus = 0;
  nlohmann::json document;
  std::vector<std::string> overrides;
};

// Deterministic discrete-event run. Module invariants and the event-log
// replay are checked afterwards; a violation throws InvariantViolation
// naming it.
RunReport run(const Scenario& scenario);

// Completions in [t0, t1) per minute.
double throughput_qpm(const RunReport& report, double t0, double t1);
// Live allocation at time t.
Allocation allocation_at(const RunReport& report, double t);
// Time-weighted mean of the in-flight count over samples in [t0, t1).
double mean_in_flight(const RunReport& report, double t0, double t1);

// Independent runs in parallel (OpenMP). Results follow input order and
// equal run_batch_serial's.
std::vector<RunReport> run_batch(const std::vector<Scenario>& scenarios);
std::vector<RunReport> run_batch_serial(const std::vector<Scenario>& scenarios);

struct ComparisonRow {
  std::string name;
  double qpm = 0.0;
  double degradation = 0.0;  // (baseline - variant) / baseline
  bool undefined = false;    // baseline throughput was zero
};

// The first report is the baseline.
std::vector<ComparisonRow> compare(const std::vector<RunReport>& reports);
std::string format_comparison(const std::vector<ComparisonRow>& rows);

// Writes throughput.csv, latency.csv, allocation.csv, decisions.csv,
// utilization.csv, events.csv, summary.txt and summary.json into dir.
void emit(const RunReport& report, const std::string& dir);
std::string format_summary(const RunReport& report);

// Real threads, one per instance, sleeping scaled stage times and handing
// off through shared ring buffers. Static disaggregated async scenarios
// only. Timing is approximate by nature.
struct ThreadedReport {
  uint64_t admissions = 0;
  uint64_t completions = 0;
  // Completions per simulated minute over [warmup, duration).
  double steady_qpm = 0.0;
  bool multiset_equal = false;
  bool ring_bounds_held = true;
};

ThreadedReport run_threaded(const Scenario& scenario, double time_scale);

}  // namespace disagsim

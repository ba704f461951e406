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

// Analytical capacity model for a three-stage disaggregated pipeline:
// per-stage service times, memory feasibility, min-rate throughput and the
// exhaustive allocation planner.

#pragma once

#include <cstdint>
#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "disagsim/common.h"
#include "disagsim/workload.h"

namespace disagsim {

enum class ProfileMode { kMeasured, kAnalytic };

struct LinkTerm {
  double bytes = 0.0;
  double bandwidth = 0.0;  // bytes/s
};

// time = activation_bytes * intensity / performance + sum(bytes / bandwidth)
struct AnalyticStage {
  double activation_bytes = 0.0;
  double intensity = 0.0;    // FLOPs/byte
  double performance = 0.0;  // FLOP/s
  // Encoder/decoder carry one term; the transformer carries inbound and
  // outbound terms.
  std::vector<LinkTerm> transfers;
};

struct StageProfile {
  std::string name;
  ProfileMode mode = ProfileMode::kMeasured;
  std::map<WorkloadKey, PerStage<double>> measured;
  PerStage<AnalyticStage> analytic{};
  PerStage<double> model_bytes{};  // resident weights per stage
  // Opt-in fallback for keys missing from the measured table.
  bool interpolate_steps = false;

  void validate() const;
};

struct StageTimes {
  PerStage<double> seconds{};

  double operator[](Stage s) const { return seconds[index_of(s)]; }
  StageTimes scaled(double k) const;
};

struct ClusterSpec {
  uint32_t total_gpus = 0;
  double gpu_memory_bytes = 24e9;
  std::vector<uint32_t> node_gpus;

  void validate() const;
};

struct Allocation {
  PerStage<uint32_t> count{1, 1, 1};

  Allocation() = default;
  Allocation(uint32_t e, uint32_t t, uint32_t d) : count{e, t, d} {}

  uint32_t operator[](Stage s) const { return count[index_of(s)]; }
  uint32_t& operator[](Stage s) { return count[index_of(s)]; }
  uint32_t total() const { return count[0] + count[1] + count[2]; }
  // "(1,6,1)"
  std::string to_string() const;
  // Each stage >= 1 and total <= gpus.
  void validate(uint32_t gpus) const;

  friend bool operator==(const Allocation&, const Allocation&) = default;
};

// Sum of per-stage absolute differences.
uint32_t move_distance(const Allocation& a, const Allocation& b);

struct Throughput {
  double qps = 0.0;
  Stage bottleneck = Stage::kEncoder;

  double qpm() const { return qps * 60.0; }
};

double stage_time(const StageProfile& profile, Stage stage,
                  const WorkloadParams& params);
StageTimes stage_times(const StageProfile& profile,
                       const WorkloadParams& params);

// Model weights plus activations must fit strictly below capacity.
bool memory_feasible(const StageProfile& profile, Stage stage,
                     double activation_bytes, double capacity_bytes);

// min over stages of g_s / T_s; ties in the argmin resolve E < T < D.
Throughput system_qps(const Allocation& alloc, const StageTimes& times);

struct MoveConstraint {
  Allocation current;
  uint32_t move_budget = 0;
};

// Strict total order used by the planner. Higher QPS wins, then fewer GPUs,
// then larger g_T, larger g_D, larger g_E.
bool better_allocation(const Allocation& a, double qps_a, const Allocation& b,
                       double qps_b);

// Exhaustive search over every allocation with each stage >= 1 and
// total <= gpus (and within the move budget when constrained). The search
// runs the g_E loop in parallel with OpenMP. Throws InfeasibleError when
// gpus < 3 or when no allocation satisfies the constraint.
Allocation plan_allocation(uint32_t gpus, const StageTimes& times,
                           const std::optional<MoveConstraint>& constraint =
                               std::nullopt);

// Single-threaded reference for the same search. Kept for tests and the
// benchmark.
Allocation plan_allocation_serial(
    uint32_t gpus, const StageTimes& times,
    const std::optional<MoveConstraint>& constraint = std::nullopt);

struct RankedAllocation {
  Allocation alloc;
  Throughput throughput;
};

// Best k allocations under the planner order.
std::vector<RankedAllocation> top_allocations(
    uint32_t gpus, const StageTimes& times, size_t k,
    const std::optional<MoveConstraint>& constraint = std::nullopt);

enum class DeploymentMode { kDisaggregated, kMonolithic };

struct LatencyComponent {
  std::string name;
  double seconds = 0.0;
  double fraction = 0.0;
};

struct LatencyBreakdown {
  std::vector<LatencyComponent> components;
  double total = 0.0;

  double seconds_of(std::string_view name) const;
  double fraction_of(std::string_view name) const;
};

// Disaggregated: Encode, P2P, DiT, P2P, Decode. Monolithic: Model (load and
// unload), Encode, DiT, Decode. Fractions are 0 when the total is 0.
LatencyBreakdown latency_breakdown(const StageTimes& times,
                                   const std::array<double, 2>& transfer_times,
                                   DeploymentMode mode, double load_cost);

// Profile documents. See profiles/README.md for the key names.
StageProfile profile_from_json(const nlohmann::json& doc);
nlohmann::json profile_to_json(const StageProfile& profile);
StageProfile load_profile_file(const std::string& path);
// Built-in profile names: "wan22-a10-table2".
std::optional<StageProfile> builtin_profile(std::string_view name);
// Name of a built-in, or a path to a profile file.
StageProfile resolve_profile(const std::string& name_or_path);

}  // namespace disagsim

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

// Hybrid instance scheduling: every interval, collect per-stage metrics,
// rebalance predictively when the dominant workload changes, otherwise
// scale single stages out or in on utilization/queue thresholds.

#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "disagsim/common.h"
#include "disagsim/perfmodel.h"
#include "disagsim/pipeline.h"
#include "disagsim/workload.h"

namespace disagsim {

struct StageMetrics {
  double utilization = 0.0;
  double queue_length = 0.0;
  double queue_delay = 0.0;  // seconds

  friend bool operator==(const StageMetrics&, const StageMetrics&) = default;
};

struct MetricsSnapshot {
  double time = 0.0;  // window end
  PerStage<StageMetrics> stage{};

  const StageMetrics& operator[](Stage s) const {
    return stage[index_of(s)];
  }
  StageMetrics& operator[](Stage s) { return stage[index_of(s)]; }
};

enum class PredictorMode { kPlanner, kLookup };

std::string_view predictor_name(PredictorMode m);
std::optional<PredictorMode> parse_predictor(std::string_view text);

struct SchedulerConfig {
  double interval = 2.0;
  double u_high = 0.80;
  double q_high = 5.0;
  double u_low = 0.20;
  size_t history_length = 60;
  // Share of the history treated as "recent" by the change detector.
  double recent_fraction = 0.25;
  PredictorMode predictor = PredictorMode::kPlanner;
  std::map<WorkloadKey, Allocation> lookup;
  bool lookup_fallback = true;
  // Max total instance moves per predictive step; unset = unlimited.
  std::optional<uint32_t> move_budget;
  // Consecutive ticks a scale-in condition must hold before acting.
  uint32_t scale_in_patience = 3;
  // Bring a standby node online when a stage must grow and no GPU is free.
  bool use_standby = true;

  void validate() const;
};

struct HistoryEntry {
  MetricsSnapshot snapshot;
  std::vector<WorkloadKey> keys;  // requests admitted in the window
};

class HistoryBuffer {
 public:
  explicit HistoryBuffer(size_t capacity);

  // Oldest entries fall off once capacity is reached. Entries must arrive
  // in time order.
  void push(HistoryEntry entry);
  const std::deque<HistoryEntry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }
  size_t capacity() const { return capacity_; }

 private:
  size_t capacity_;
  std::deque<HistoryEntry> entries_;
};

enum class Action { kNoOp, kScaleOut, kScaleIn, kReconfigure };

std::string_view action_name(Action a);

struct ScalingDecision {
  Action action = Action::kNoOp;
  std::optional<Stage> stage;
  Allocation target;  // allocation after the decision
  std::string reason;
  double time = 0.0;
};

// u = busy seconds / instance seconds in the window, q = queue length at
// the window end, d = mean queueing delay of executions started in the
// window (0 when none started).
MetricsSnapshot collect(const PerStage<StageCounters>& before,
                        const PerStage<StageCounters>& after,
                        const PerStage<size_t>& queue_lengths, double time);

// One decision per stage. Without a previous snapshot every stage is NoOp.
// ScaleOut needs u > U_high, q > Q_high and d above the previous window's;
// without a free GPU it becomes NoOp "capacity". ScaleIn needs u < U_low
// and q == 0 and never takes a stage below one instance.
std::vector<ScalingDecision> reactive_step(
    const MetricsSnapshot& now, const std::optional<MetricsSnapshot>& prev,
    const SchedulerConfig& config, const Allocation& current,
    uint32_t free_gpus);

// Most frequent key over entries [begin, end); nullopt when empty or tied.
std::optional<WorkloadKey> modal_key(const std::deque<HistoryEntry>& entries,
                                     size_t begin, size_t end);

// Modal key of the most recent share of the history.
std::optional<WorkloadKey> recent_modal_key(const HistoryBuffer& history,
                                            double recent_fraction = 0.25);

// True when the modal key of the recent share differs from the modal key
// of the rest. Ties on either side count as no change.
bool detect_change(const HistoryBuffer& history,
                   double recent_fraction = 0.25);

Allocation predict_allocation(const WorkloadKey& key, uint32_t gpus,
                              const StageProfile& profile,
                              const SchedulerConfig& config,
                              const Allocation& current);

// Featurizes the history by its recent modal key. Throws LookupError when
// the history has no modal key.
Allocation predict_allocation(const HistoryBuffer& history, uint32_t gpus,
                              const StageProfile& profile,
                              const SchedulerConfig& config,
                              const Allocation& current);

// Issues the spawn/retire calls for a decision. Reconfigure retires first
// and defers spawns that find no free GPU until a drain completes.
void apply(const ScalingDecision& decision, Pipeline& pipeline);

// "time,action,stage,reason,g_E,g_T,g_D"
std::string format_decision_log(const std::vector<ScalingDecision>& log);

class HybridScheduler {
 public:
  HybridScheduler(SchedulerConfig config, StageProfile profile);

  // The workload the initial allocation was planned for; a change to the
  // same key is not acted on again.
  void set_planned_key(const WorkloadKey& key) { acted_key_ = key; }

  // One scheduling iteration at the current simulation time.
  std::vector<ScalingDecision> tick(Pipeline& pipeline, double now);

  const std::vector<ScalingDecision>& decisions() const { return log_; }
  const HistoryBuffer& history() const { return history_; }
  const std::optional<MetricsSnapshot>& last_snapshot() const {
    return prev_;
  }
  const SchedulerConfig& config() const { return config_; }

 private:
  WorkloadKey workload_for_escalation() const;

  SchedulerConfig config_;
  StageProfile profile_;
  HistoryBuffer history_;
  std::optional<MetricsSnapshot> prev_;
  PerStage<StageCounters> before_{};
  PerStage<uint32_t> scale_in_streak_{};
  PerStage<bool> capped_{};
  std::optional<WorkloadKey> acted_key_;
  std::optional<WorkloadKey> last_seen_key_;
  std::vector<ScalingDecision> log_;
};

}  // namespace disagsim

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

#include "disagsim/scheduler.h"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace disagsim {

std::string_view predictor_name(PredictorMode m) {
  return m == PredictorMode::kPlanner ? "planner" : "lookup";
}

std::optional<PredictorMode> parse_predictor(std::string_view text) {
  if (text == "planner" || text == "model-planner") {
    return PredictorMode::kPlanner;
  }
  if (text == "lookup" || text == "lookup-table") return PredictorMode::kLookup;
  return std::nullopt;
}

void SchedulerConfig::validate() const {
  if (!(interval > 0.0)) throw ValidationError("scheduler.interval must be > 0");
  if (!(u_low >= 0.0 && u_low < u_high && u_high <= 1.0)) {
    throw ValidationError("need 0 <= scheduler.u_low < scheduler.u_high <= 1");
  }
  if (!(q_high >= 1.0)) throw ValidationError("scheduler.q_high must be >= 1");
  if (history_length < 2) {
    throw ValidationError("scheduler.history_length must be >= 2");
  }
  if (!(recent_fraction > 0.0 && recent_fraction < 1.0)) {
    throw ValidationError("scheduler.recent_fraction must be in (0, 1)");
  }
  for (const auto& [key, alloc] : lookup) {
    for (uint32_t c : alloc.count) {
      if (c < 1) {
        throw ValidationError(fmt::format(
            "lookup entry {} has a stage with no instances", key.to_string()));
      }
    }
  }
}

HistoryBuffer::HistoryBuffer(size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw ValidationError("history capacity must be > 0");
}

void HistoryBuffer::push(HistoryEntry entry) {
  if (!entries_.empty() &&
      entry.snapshot.time < entries_.back().snapshot.time) {
    throw InvariantViolation("history entries out of time order");
  }
  entries_.push_back(std::move(entry));
  while (entries_.size() > capacity_) entries_.pop_front();
}

std::string_view action_name(Action a) {
  switch (a) {
    case Action::kNoOp:
      return "NoOp";
    case Action::kScaleOut:
      return "ScaleOut";
    case Action::kScaleIn:
      return "ScaleIn";
    case Action::kReconfigure:
      return "Reconfigure";
  }
  return "?";
}

MetricsSnapshot collect(const PerStage<StageCounters>& before,
                        const PerStage<StageCounters>& after,
                        const PerStage<size_t>& queue_lengths, double time) {
  MetricsSnapshot m;
  m.time = time;
  for (size_t s = 0; s < 3; ++s) {
    const double busy = after[s].busy_seconds - before[s].busy_seconds;
    const double span = after[s].instance_seconds - before[s].instance_seconds;
    double u = span > 0.0 ? busy / span : 0.0;
    m.stage[s].utilization = std::clamp(u, 0.0, 1.0);
    m.stage[s].queue_length = static_cast<double>(queue_lengths[s]);
    const uint64_t starts = after[s].exec_starts - before[s].exec_starts;
    m.stage[s].queue_delay =
        starts > 0 ? (after[s].queue_delay_sum - before[s].queue_delay_sum) /
                         static_cast<double>(starts)
                   : 0.0;
  }
  return m;
}

std::vector<ScalingDecision> reactive_step(
    const MetricsSnapshot& now, const std::optional<MetricsSnapshot>& prev,
    const SchedulerConfig& config, const Allocation& current,
    uint32_t free_gpus) {
  std::vector<ScalingDecision> out;
  Allocation after = current;
  for (Stage s : kAllStages) {
    ScalingDecision d;
    d.stage = s;
    d.time = now.time;
    if (!prev) {
      d.reason = "first tick";
      out.push_back(d);
      continue;
    }
    const StageMetrics& m = now[s];
    if (m.utilization > config.u_high && m.queue_length > config.q_high &&
        m.queue_delay > (*prev)[s].queue_delay) {
      if (free_gpus > 0) {
        --free_gpus;
        ++after[s];
        d.action = Action::kScaleOut;
        d.reason = "overload";
      } else {
        d.reason = "capacity";
      }
    } else if (m.utilization < config.u_low && m.queue_length == 0.0) {
      if (after[s] > 1) {
        --after[s];
        d.action = Action::kScaleIn;
        d.reason = "underload";
      } else {
        d.reason = "minimum";
      }
    }
    out.push_back(d);
  }
  for (auto& d : out) d.target = after;
  return out;
}

std::optional<WorkloadKey> modal_key(const std::deque<HistoryEntry>& entries,
                                     size_t begin, size_t end) {
  std::map<WorkloadKey, size_t> counts;
  for (size_t i = begin; i < end && i < entries.size(); ++i) {
    for (const auto& k : entries[i].keys) ++counts[k];
  }
  std::optional<WorkloadKey> best;
  size_t best_count = 0;
  bool tied = false;
  for (const auto& [k, c] : counts) {
    if (c > best_count) {
      best = k;
      best_count = c;
      tied = false;
    } else if (c == best_count) {
      tied = true;
    }
  }
  if (tied) return std::nullopt;
  return best;
}

namespace {

size_t recent_count(size_t n, double fraction) {
  auto r = static_cast<size_t>(std::ceil(static_cast<double>(n) * fraction));
  return std::clamp<size_t>(r, 1, n);
}

}  // namespace

std::optional<WorkloadKey> recent_modal_key(const HistoryBuffer& history,
                                            double recent_fraction) {
  const size_t n = history.size();
  if (n == 0) return std::nullopt;
  return modal_key(history.entries(), n - recent_count(n, recent_fraction), n);
}

bool detect_change(const HistoryBuffer& history, double recent_fraction) {
  const size_t n = history.size();
  if (n < 2) return false;
  const size_t split = n - recent_count(n, recent_fraction);
  if (split == 0) return false;
  auto recent = modal_key(history.entries(), split, n);
  auto prior = modal_key(history.entries(), 0, split);
  return recent && prior && *recent != *prior;
}

Allocation predict_allocation(const WorkloadKey& key, uint32_t gpus,
                              const StageProfile& profile,
                              const SchedulerConfig& config,
                              const Allocation& current) {
  if (config.predictor == PredictorMode::kLookup) {
    auto it = config.lookup.find(key);
    if (it != config.lookup.end()) {
      it->second.validate(gpus);
      return it->second;
    }
    if (!config.lookup_fallback) {
      throw LookupError(fmt::format(
          "no lookup entry for workload {} and fallback is off",
          key.to_string()));
    }
  }
  WorkloadParams p;
  p.steps = key.steps;
  p.width = key.width;
  p.height = key.height;
  p.frames = key.frames;
  StageTimes times = stage_times(profile, p);
  std::optional<MoveConstraint> constraint;
  if (config.move_budget) constraint = MoveConstraint{current, *config.move_budget};
  return plan_allocation(gpus, times, constraint);
}

Allocation predict_allocation(const HistoryBuffer& history, uint32_t gpus,
                              const StageProfile& profile,
                              const SchedulerConfig& config,
                              const Allocation& current) {
  auto key = recent_modal_key(history, config.recent_fraction);
  if (!key) throw LookupError("history has no dominant workload");
  return predict_allocation(*key, gpus, profile, config, current);
}

void apply(const ScalingDecision& decision, Pipeline& pipeline) {
  switch (decision.action) {
    case Action::kNoOp:
      return;
    case Action::kScaleOut:
      pipeline.spawn_when_free(*decision.stage);
      return;
    case Action::kScaleIn:
      if (pipeline.live_count(*decision.stage) <= 1) return;
      if (auto victim = pipeline.retire_candidate(*decision.stage)) {
        pipeline.retire_instance(*victim);
      }
      return;
    case Action::kReconfigure: {
      const Allocation live = pipeline.live_allocation();
      for (Stage s : kAllStages) {
        for (uint32_t n = live[s]; n > decision.target[s]; --n) {
          if (auto victim = pipeline.retire_candidate(s)) {
            pipeline.retire_instance(*victim);
          }
        }
      }
      for (Stage s : kAllStages) {
        for (uint32_t n = live[s]; n < decision.target[s]; ++n) {
          pipeline.spawn_when_free(s);
        }
      }
      return;
    }
  }
}

std::string format_decision_log(const std::vector<ScalingDecision>& log) {
  std::string out = "time,action,stage,reason,g_E,g_T,g_D\n";
  for (const auto& d : log) {
    out += fmt::format("{},{},{},{},{},{},{}\n", d.time, action_name(d.action),
                       d.stage ? std::string(1, stage_letter(*d.stage)) : "-",
                       d.reason, d.target.count[0], d.target.count[1],
                       d.target.count[2]);
  }
  return out;
}

HybridScheduler::HybridScheduler(SchedulerConfig config, StageProfile profile)
    : config_(std::move(config)),
      profile_(std::move(profile)),
      history_(config_.history_length) {
  config_.validate();
}

WorkloadKey HybridScheduler::workload_for_escalation() const {
  auto whole = modal_key(history_.entries(), 0, history_.size());
  if (whole) return *whole;
  if (acted_key_) return *acted_key_;
  if (last_seen_key_) return *last_seen_key_;
  throw LookupError("no workload observed yet");
}

std::vector<ScalingDecision> HybridScheduler::tick(Pipeline& pipeline,
                                                   double now) {
  PerStage<StageCounters> after;
  PerStage<size_t> queues{};
  for (Stage s : kAllStages) {
    after[index_of(s)] = pipeline.counters(s);
    queues[index_of(s)] = pipeline.queue_length(s);
  }
  MetricsSnapshot snap = collect(before_, after, queues, now);
  before_ = after;
  HistoryEntry entry{snap, pipeline.take_recent_keys()};
  if (!entry.keys.empty()) last_seen_key_ = entry.keys.back();
  history_.push(std::move(entry));

  std::vector<ScalingDecision> issued;
  auto record = [&](ScalingDecision d) {
    apply(d, pipeline);
    if (d.action != Action::kReconfigure && d.action != Action::kNoOp) {
      d.target = pipeline.live_allocation();
    }
    issued.push_back(d);
    log_.push_back(std::move(d));
  };

  const Allocation live = pipeline.live_allocation();

  // Predictive layer.
  if (detect_change(history_, config_.recent_fraction)) {
    auto key = recent_modal_key(history_, config_.recent_fraction);
    if (key && key != acted_key_) {
      acted_key_ = key;
      Allocation target = predict_allocation(*key, pipeline.enabled_gpus(),
                                             profile_, config_, live);
      if (target != live) {
        ScalingDecision d;
        d.action = Action::kReconfigure;
        d.target = target;
        d.reason = fmt::format("workload {}", key->to_string());
        d.time = now;
        record(std::move(d));
        scale_in_streak_ = {};
        prev_ = snap;
        return issued;
      }
    }
  }

  // Reactive layer.
  auto decisions = reactive_step(snap, prev_, config_, live,
                                 pipeline.free_gpus());
  prev_ = snap;
  for (auto& d : decisions) {
    const size_t s = index_of(*d.stage);
    if (d.action == Action::kScaleIn) {
      if (++scale_in_streak_[s] < config_.scale_in_patience) continue;
      scale_in_streak_[s] = 0;
      record(d);
      continue;
    }
    scale_in_streak_[s] = 0;
    // A capacity streak lasts while u and q stay above the thresholds; the
    // delay trend alone flips too often to delimit it.
    const bool was_capped = capped_[s];
    const bool pressured = snap.stage[s].utilization > config_.u_high &&
                           snap.stage[s].queue_length > config_.q_high;
    capped_[s] = pressured && (was_capped || d.reason == "capacity");
    if (d.action == Action::kScaleOut) {
      record(d);
      continue;
    }
    if (d.reason != "capacity") continue;
    auto node = pipeline.standby_node();
    if (!config_.use_standby || !node) {
      // Logged once per streak.
      if (!was_capped) record(d);
      continue;
    }
    // Grow the budget and replan the whole ratio for it.
    pipeline.enable_node(*node);
    const WorkloadKey key = workload_for_escalation();
    ScalingDecision r;
    r.action = Action::kReconfigure;
    r.stage = d.stage;
    r.time = now;
    r.reason = fmt::format("standby node {} for {}", *node, key.to_string());
    SchedulerConfig unconstrained = config_;
    unconstrained.move_budget.reset();
    r.target = predict_allocation(key, pipeline.enabled_gpus(), profile_,
                                  unconstrained, live);
    record(std::move(r));
    scale_in_streak_ = {};
    break;
  }
  return issued;
}

}  // namespace disagsim

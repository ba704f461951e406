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

#include "disagsim/perfmodel.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#ifdef _OPENMP
#include <omp.h>
#endif

namespace disagsim {

void StageProfile::validate() const {
  if (mode == ProfileMode::kMeasured) {
    if (measured.empty()) {
      throw ValidationError(
          fmt::format("profile '{}': measured mode needs table entries", name));
    }
    for (const auto& [key, times] : measured) {
      for (Stage s : kAllStages) {
        if (!(times[index_of(s)] > 0.0)) {
          throw ValidationError(fmt::format(
              "profile '{}': {} time for {} must be > 0", name, stage_name(s),
              key.to_string()));
        }
      }
    }
    return;
  }
  for (Stage s : kAllStages) {
    const auto& a = analytic[index_of(s)];
    if (!(a.activation_bytes > 0.0) || !(a.intensity > 0.0) ||
        !(a.performance > 0.0) || a.transfers.empty()) {
      throw ValidationError(fmt::format(
          "profile '{}': analytic {} parameters must all be > 0", name,
          stage_name(s)));
    }
    for (const auto& term : a.transfers) {
      if (!(term.bytes > 0.0) || !(term.bandwidth > 0.0)) {
        throw ValidationError(fmt::format(
            "profile '{}': analytic {} transfer terms must be > 0", name,
            stage_name(s)));
      }
    }
  }
}

StageTimes StageTimes::scaled(double k) const {
  StageTimes out = *this;
  for (auto& s : out.seconds) s *= k;
  return out;
}

void ClusterSpec::validate() const {
  if (total_gpus < 3) {
    throw ValidationError("cluster needs at least 3 GPUs (one per stage)");
  }
  if (!(gpu_memory_bytes > 0.0)) {
    throw ValidationError("cluster gpu memory must be > 0");
  }
  uint64_t sum = 0;
  for (uint32_t n : node_gpus) sum += n;
  if (sum != total_gpus) {
    throw ValidationError(fmt::format(
        "node GPU counts sum to {}, expected {}", sum, total_gpus));
  }
}

std::string Allocation::to_string() const {
  return fmt::format("({},{},{})", count[0], count[1], count[2]);
}

void Allocation::validate(uint32_t gpus) const {
  for (Stage s : kAllStages) {
    if ((*this)[s] < 1) {
      throw ValidationError(fmt::format("allocation {}: {} needs >= 1 instance",
                                        to_string(), stage_name(s)));
    }
  }
  if (total() > gpus) {
    throw ValidationError(fmt::format("allocation {} exceeds {} GPUs",
                                      to_string(), gpus));
  }
}

uint32_t move_distance(const Allocation& a, const Allocation& b) {
  uint32_t d = 0;
  for (size_t i = 0; i < 3; ++i) {
    d += a.count[i] > b.count[i] ? a.count[i] - b.count[i]
                                 : b.count[i] - a.count[i];
  }
  return d;
}

namespace {

double measured_lookup(const StageProfile& profile, Stage stage,
                       const WorkloadKey& key) {
  const size_t si = index_of(stage);
  if (auto it = profile.measured.find(key); it != profile.measured.end()) {
    return it->second[si];
  }
  if (!profile.interpolate_steps) {
    throw LookupError(fmt::format("profile '{}' has no entry for {}",
                                  profile.name, key.to_string()));
  }
  // Entries at the same resolution and frame count, ordered by steps.
  std::vector<std::pair<double, double>> points;
  for (const auto& [k, times] : profile.measured) {
    if (k.width == key.width && k.height == key.height &&
        k.frames == key.frames) {
      points.emplace_back(static_cast<double>(k.steps), times[si]);
    }
  }
  if (points.empty()) {
    throw LookupError(fmt::format(
        "profile '{}' has no entry at resolution {}x{}/{} to interpolate {}",
        profile.name, key.width, key.height, key.frames, key.to_string()));
  }
  if (stage != Stage::kTransformer || points.size() == 1) {
    // Encoder and decoder cost does not depend on the step count.
    return points.front().second;
  }
  const double x = static_cast<double>(key.steps);
  auto upper = std::lower_bound(
      points.begin(), points.end(), x,
      [](const auto& p, double v) { return p.first < v; });
  size_t hi = static_cast<size_t>(upper - points.begin());
  if (hi == 0) hi = 1;
  if (hi >= points.size()) hi = points.size() - 1;
  const auto& [x0, y0] = points[hi - 1];
  const auto& [x1, y1] = points[hi];
  double y = y0 + (y1 - y0) * (x - x0) / (x1 - x0);
  if (!(y > 0.0)) {
    throw LookupError(fmt::format(
        "profile '{}': extrapolated time for {} is not positive", profile.name,
        key.to_string()));
  }
  return y;
}

}  // namespace

double stage_time(const StageProfile& profile, Stage stage,
                  const WorkloadParams& params) {
  if (profile.mode == ProfileMode::kMeasured) {
    return measured_lookup(profile, stage, params.key());
  }
  const auto& a = profile.analytic[index_of(stage)];
  double t = a.activation_bytes * a.intensity / a.performance;
  for (const auto& term : a.transfers) t += term.bytes / term.bandwidth;
  return t;
}

StageTimes stage_times(const StageProfile& profile,
                       const WorkloadParams& params) {
  StageTimes out;
  for (Stage s : kAllStages) {
    out.seconds[index_of(s)] = stage_time(profile, s, params);
  }
  return out;
}

bool memory_feasible(const StageProfile& profile, Stage stage,
                     double activation_bytes, double capacity_bytes) {
  return profile.model_bytes[index_of(stage)] + activation_bytes <
         capacity_bytes;
}

Throughput system_qps(const Allocation& alloc, const StageTimes& times) {
  Throughput out;
  out.qps = static_cast<double>(alloc[Stage::kEncoder]) /
            times[Stage::kEncoder];
  out.bottleneck = Stage::kEncoder;
  for (Stage s : {Stage::kTransformer, Stage::kDecoder}) {
    double rate = static_cast<double>(alloc[s]) / times[s];
    if (rate < out.qps) {
      out.qps = rate;
      out.bottleneck = s;
    }
  }
  return out;
}

bool better_allocation(const Allocation& a, double qps_a, const Allocation& b,
                       double qps_b) {
  if (qps_a != qps_b) return qps_a > qps_b;
  if (a.total() != b.total()) return a.total() < b.total();
  if (a[Stage::kTransformer] != b[Stage::kTransformer]) {
    return a[Stage::kTransformer] > b[Stage::kTransformer];
  }
  if (a[Stage::kDecoder] != b[Stage::kDecoder]) {
    return a[Stage::kDecoder] > b[Stage::kDecoder];
  }
  return a[Stage::kEncoder] > b[Stage::kEncoder];
}

namespace {

void check_plan_inputs(uint32_t gpus, const StageTimes& times) {
  if (gpus < 3) {
    throw InfeasibleError(
        fmt::format("{} GPUs cannot host one instance per stage", gpus));
  }
  for (Stage s : kAllStages) {
    if (!(times[s] > 0.0)) {
      throw ValidationError(
          fmt::format("{} stage time must be > 0", stage_name(s)));
    }
  }
}

bool admissible(const Allocation& a,
                const std::optional<MoveConstraint>& constraint) {
  return !constraint ||
         move_distance(a, constraint->current) <= constraint->move_budget;
}

struct Best {
  Allocation alloc;
  double qps = -1.0;
  bool found = false;

  void offer(const Allocation& a, double qps_a) {
    if (!found || better_allocation(a, qps_a, alloc, qps)) {
      alloc = a;
      qps = qps_a;
      found = true;
    }
  }
};

// Scans every (g_T, g_D) for one g_E.
void scan_row(uint32_t gpus, uint32_t e, const StageTimes& times,
              const std::optional<MoveConstraint>& constraint, Best& best) {
  for (uint32_t t = 1; e + t + 1 <= gpus; ++t) {
    for (uint32_t d = 1; e + t + d <= gpus; ++d) {
      Allocation a(e, t, d);
      if (!admissible(a, constraint)) continue;
      best.offer(a, system_qps(a, times).qps);
    }
  }
}

Allocation finish(const Best& best, uint32_t gpus) {
  if (!best.found) {
    throw InfeasibleError(fmt::format(
        "no allocation of {} GPUs satisfies the move budget", gpus));
  }
  return best.alloc;
}

}  // namespace

Allocation plan_allocation_serial(
    uint32_t gpus, const StageTimes& times,
    const std::optional<MoveConstraint>& constraint) {
  check_plan_inputs(gpus, times);
  Best best;
  for (uint32_t e = 1; e + 2 <= gpus; ++e) {
    scan_row(gpus, e, times, constraint, best);
  }
  return finish(best, gpus);
}

Allocation plan_allocation(uint32_t gpus, const StageTimes& times,
                           const std::optional<MoveConstraint>& constraint) {
  check_plan_inputs(gpus, times);
  Best best;
  const int64_t rows = static_cast<int64_t>(gpus) - 2;
#pragma omp parallel
  {
    Best local;
#pragma omp for schedule(dynamic)
    for (int64_t row = 0; row < rows; ++row) {
      scan_row(gpus, static_cast<uint32_t>(row + 1), times, constraint, local);
    }
    // The order is total, so the merge result does not depend on which
    // thread arrives first.
#pragma omp critical(disagsim_plan_merge)
    {
      if (local.found) best.offer(local.alloc, local.qps);
    }
  }
  return finish(best, gpus);
}

std::vector<RankedAllocation> top_allocations(
    uint32_t gpus, const StageTimes& times, size_t k,
    const std::optional<MoveConstraint>& constraint) {
  check_plan_inputs(gpus, times);
  std::vector<RankedAllocation> all;
  for (uint32_t e = 1; e + 2 <= gpus; ++e) {
    for (uint32_t t = 1; e + t + 1 <= gpus; ++t) {
      for (uint32_t d = 1; e + t + d <= gpus; ++d) {
        Allocation a(e, t, d);
        if (!admissible(a, constraint)) continue;
        all.push_back({a, system_qps(a, times)});
      }
    }
  }
  std::sort(all.begin(), all.end(),
            [](const RankedAllocation& x, const RankedAllocation& y) {
              return better_allocation(x.alloc, x.throughput.qps, y.alloc,
                                       y.throughput.qps);
            });
  if (all.size() > k) all.resize(k);
  return all;
}

double LatencyBreakdown::seconds_of(std::string_view name) const {
  double total_s = 0.0;
  for (const auto& c : components) {
    if (c.name == name) total_s += c.seconds;
  }
  return total_s;
}

double LatencyBreakdown::fraction_of(std::string_view name) const {
  return total > 0.0 ? seconds_of(name) / total : 0.0;
}

LatencyBreakdown latency_breakdown(const StageTimes& times,
                                   const std::array<double, 2>& transfer_times,
                                   DeploymentMode mode, double load_cost) {
  LatencyBreakdown out;
  auto add = [&](std::string name, double s) {
    if (s < 0.0) {
      throw ValidationError(
          fmt::format("latency component {} is negative", name));
    }
    out.components.push_back({std::move(name), s, 0.0});
    out.total += s;
  };
  if (mode == DeploymentMode::kMonolithic) {
    add("Model", load_cost);
    add("Encode", times[Stage::kEncoder]);
    add("DiT", times[Stage::kTransformer]);
    add("Decode", times[Stage::kDecoder]);
  } else {
    add("Encode", times[Stage::kEncoder]);
    add("P2P", transfer_times[0]);
    add("DiT", times[Stage::kTransformer]);
    add("P2P", transfer_times[1]);
    add("Decode", times[Stage::kDecoder]);
  }
  for (auto& c : out.components) {
    c.fraction = out.total > 0.0 ? c.seconds / out.total : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Profile documents

namespace {

using nlohmann::json;

constexpr std::array<const char*, 3> kStageKeys = {"encoder", "transformer",
                                                   "decoder"};

double number_at(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key) || !obj.at(key).is_number()) {
    throw ConfigError(fmt::format("{}: missing numeric key '{}'", where, key));
  }
  return obj.at(key).get<double>();
}

}  // namespace

StageProfile profile_from_json(const json& doc) {
  StageProfile p;
  p.name = doc.value("name", std::string("unnamed"));
  std::string mode = doc.value("mode", std::string("measured"));
  if (mode == "measured") {
    p.mode = ProfileMode::kMeasured;
  } else if (mode == "analytic") {
    p.mode = ProfileMode::kAnalytic;
  } else {
    throw ConfigError(fmt::format(
        "profile '{}': mode must be measured or analytic, got '{}'", p.name,
        mode));
  }
  p.interpolate_steps = doc.value("interpolate_steps", false);
  for (Stage s : kAllStages) {
    const char* key = kStageKeys[index_of(s)];
    if (!doc.contains(key)) {
      throw ConfigError(
          fmt::format("profile '{}': missing section '{}'", p.name, key));
    }
    const json& sec = doc.at(key);
    const std::string where = fmt::format("profile '{}'.{}", p.name, key);
    p.model_bytes[index_of(s)] = sec.value("S_M", 0.0);
    if (sec.contains("measured")) {
      for (const auto& [k, v] : sec.at("measured").items()) {
        p.measured[WorkloadKey::parse(k)][index_of(s)] = v.get<double>();
      }
    }
    if (sec.contains("analytic")) {
      const json& a = sec.at("analytic");
      auto& out = p.analytic[index_of(s)];
      out.activation_bytes = number_at(a, "S_A", where);
      out.intensity = number_at(a, "I", where);
      out.performance = number_at(a, "P", where);
      if (s == Stage::kTransformer) {
        out.transfers.push_back(
            {number_at(a, "S_A_T1", where), number_at(a, "B_T1", where)});
        out.transfers.push_back(
            {number_at(a, "S_A_T2", where), number_at(a, "B_T2", where)});
      } else {
        out.transfers.push_back(
            {out.activation_bytes, number_at(a, "B", where)});
      }
    }
  }
  p.validate();
  return p;
}

json profile_to_json(const StageProfile& profile) {
  json doc;
  doc["name"] = profile.name;
  doc["mode"] = profile.mode == ProfileMode::kMeasured ? "measured" : "analytic";
  doc["interpolate_steps"] = profile.interpolate_steps;
  for (Stage s : kAllStages) {
    json sec;
    sec["S_M"] = profile.model_bytes[index_of(s)];
    if (!profile.measured.empty()) {
      json table = json::object();
      for (const auto& [k, times] : profile.measured) {
        table[k.to_string()] = times[index_of(s)];
      }
      sec["measured"] = std::move(table);
    }
    const auto& a = profile.analytic[index_of(s)];
    if (a.performance > 0.0) {
      json an;
      an["S_A"] = a.activation_bytes;
      an["I"] = a.intensity;
      an["P"] = a.performance;
      if (s == Stage::kTransformer && a.transfers.size() == 2) {
        an["S_A_T1"] = a.transfers[0].bytes;
        an["B_T1"] = a.transfers[0].bandwidth;
        an["S_A_T2"] = a.transfers[1].bytes;
        an["B_T2"] = a.transfers[1].bandwidth;
      } else if (!a.transfers.empty()) {
        an["B"] = a.transfers[0].bandwidth;
      }
      sec["analytic"] = std::move(an);
    }
    doc[kStageKeys[index_of(s)]] = std::move(sec);
  }
  return doc;
}

StageProfile load_profile_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open profile file {}", path));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
  return profile_from_json(doc);
}

std::optional<StageProfile> builtin_profile(std::string_view name) {
  if (name != "wan22-a10-table2") return std::nullopt;
  // Wan2.2 on A10, 832x480, 81 frames. Encoder and decoder are step
  // independent.
  StageProfile p;
  p.name = "wan22-a10-table2";
  p.mode = ProfileMode::kMeasured;
  for (auto [steps, dit] : {std::pair<uint32_t, double>{50, 930.0},
                            {8, 149.0},
                            {4, 74.1},
                            {1, 18.7}}) {
    p.measured[WorkloadKey{steps, 832, 480, 81}] = {5.46, dit, 9.62};
  }
  p.model_bytes = {9.6e9, 28.0e9, 0.1e9};
  return p;
}

StageProfile resolve_profile(const std::string& name_or_path) {
  if (auto p = builtin_profile(name_or_path)) return *p;
  return load_profile_file(name_or_path);
}

}  // namespace disagsim

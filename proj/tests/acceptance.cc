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

// Acceptance runner. One PASS/FAIL line per criterion; exit status is the
// number of failing criteria (capped at 1 for ctest).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "disagsim/perfmodel.h"
#include "disagsim/simharness.h"
#include "ring_stress.h"

namespace {

using namespace disagsim;
namespace fs = std::filesystem;

struct Job {
  std::string name;
  std::vector<std::string> overrides;
  std::string label() const {
    std::string s = name;
    for (const auto& o : overrides) s += " " + o;
    return s;
  }
};

std::string scenario_path(const std::string& name) {
  return std::string(DISAGSIM_SOURCE_DIR) + "/scenarios/" + name + ".json";
}

// Every run made by any criterion, kept for the conservation and
// determinism checks.
std::vector<Job> g_jobs;
std::vector<RunReport> g_reports;
std::vector<std::string> g_run_errors;

std::vector<RunReport> run_jobs(const std::vector<Job>& jobs) {
  std::vector<Scenario> scs;
  for (const auto& j : jobs) scs.push_back(load_scenario(scenario_path(j.name), j.overrides));
  std::vector<RunReport> out;
  try {
    out = run_batch(scs);
  } catch (const Error& e) {
    // Fall back to one at a time so the failing run is named.
    out.clear();
    for (size_t i = 0; i < scs.size(); ++i) {
      try {
        out.push_back(run(scs[i]));
      } catch (const Error& e2) {
        g_run_errors.push_back(fmt::format("{}: {}", jobs[i].label(), e2.what()));
        out.emplace_back();
      }
    }
  }
  for (size_t i = 0; i < jobs.size(); ++i) {
    g_jobs.push_back(jobs[i]);
    g_reports.push_back(out[i]);
  }
  return out;
}

RunReport run_one(const Job& j) { return run_jobs({j})[0]; }

struct Verdict {
  bool pass = true;
  std::vector<std::string> notes;
  void check(bool ok, std::string what) {
    if (!ok) pass = false;
    notes.push_back(fmt::format("  [{}] {}", ok ? "ok" : "FAIL", what));
  }
};

int g_failed = 0;

void report(int n, const std::string& title, const Verdict& v, double secs) {
  for (const auto& line : v.notes) fmt::print("{}\n", line);
  fmt::print("criterion {:>2}: {} {} ({:.1f} s)\n\n", n, v.pass ? "PASS" : "FAIL",
             title, secs);
  if (!v.pass) ++g_failed;
  std::fflush(stdout);
}

bool within_rel(double x, double target, double tol) {
  return std::fabs(x - target) <= tol * std::fabs(target);
}

StageTimes table2_times(uint32_t steps) {
  WorkloadParams p;
  p.steps = steps;
  return stage_times(*builtin_profile("wan22-a10-table2"), p);
}

// --- 1 ---------------------------------------------------------------------

Verdict c1_ratio_throughput() {
  Verdict v;
  struct Row {
    const char* scenario;
    Allocation alloc;
    uint32_t steps;
  };
  const Row rows[] = {{"ratio-161-4step", {1, 6, 1}, 4},
                      {"ratio-152-4step", {1, 5, 2}, 4},
                      {"ratio-161-1step", {1, 6, 1}, 1},
                      {"ratio-152-1step", {1, 5, 2}, 1}};
  std::vector<Job> jobs;
  for (const auto& r : rows) jobs.push_back({r.scenario, {}});
  auto reps = run_jobs(jobs);
  for (size_t i = 0; i < 4; ++i) {
    const auto& r = rows[i];
    // Oracle: per-stage rate arithmetic, not system_qps.
    const StageTimes t = table2_times(r.steps);
    double rate = 1e300;
    for (Stage s : kAllStages) rate = std::min(rate, r.alloc[s] / t[s]);
    const double expected = 60.0 * rate;
    const double got = reps[i].steady_qpm;
    v.check(within_rel(got, expected, 0.05),
            fmt::format("{} {}-step: {:.4f} QPM vs {:.4f} +-5%", r.alloc.to_string(),
                        r.steps, got, expected));
  }
  return v;
}

// --- 2 ---------------------------------------------------------------------

Verdict c2_hybrid_parameter_trace() {
  Verdict v;
  auto reps = run_jobs({{"hybrid-param-trace", {}},
                        {"hybrid-param-trace",
                         {"scheduler.mode=static", "scheduler.allocation=[1,6,1]"}},
                        {"hybrid-param-trace",
                         {"scheduler.mode=static", "scheduler.allocation=[1,5,2]"}}});
  const RunReport& h = reps[0];
  const double sw = 900.0;
  const double end = h.duration;

  // Phase 1 steady state: every monitor sample after warmup.
  bool steady161 = true;
  for (const auto& u : h.utilization) {
    if (u.time >= h.warmup && u.time < sw &&
        allocation_at(h, u.time) != Allocation(1, 6, 1)) {
      steady161 = false;
    }
  }
  v.check(steady161, fmt::format("live (1,6,1) over phase 1 steady state [{:.0f}, {:.0f})",
                                 h.warmup, sw));

  std::optional<double> reached;
  for (const auto& a : h.allocations) {
    if (a.time >= sw && a.alloc == Allocation(1, 5, 2)) {
      reached = a.time;
      break;
    }
  }
  v.check(reached && *reached - sw <= 60.0,
          reached ? fmt::format("live (1,5,2) at {:.1f} s, {:.1f} s after the switch",
                                *reached, *reached - sw)
                  : std::string("live (1,5,2) never reached"));

  struct Window {
    const char* name;
    double t0, t1;
  };
  const Window wins[] = {{"phase 1", h.warmup, sw}, {"phase 2", sw, end}};
  for (const auto& w : wins) {
    const double hq = throughput_qpm(h, w.t0, w.t1);
    const double a = throughput_qpm(reps[1], w.t0, w.t1);
    const double b = throughput_qpm(reps[2], w.t0, w.t1);
    const double best = std::max(a, b);
    v.check(within_rel(hq, best, 0.10),
            fmt::format("{} [{:.0f}, {:.0f}): hybrid {:.3f} QPM, static (1,6,1) {:.3f}, "
                        "(1,5,2) {:.3f}; need {:.3f} +-10%",
                        w.name, w.t0, w.t1, hq, a, b, best));
  }
  return v;
}

// --- 3 ---------------------------------------------------------------------

Verdict c3_scale_out() {
  Verdict v;
  const RunReport r = run_one({"scale-out-trace", {}});
  const Allocation want(1, 13, 2);
  std::optional<double> reached;
  for (const auto& a : r.allocations) {
    if (a.alloc == want) {
      reached = a.time;
      break;
    }
  }
  v.check(reached.has_value(),
          reached ? fmt::format("live {} from {:.1f} s", want.to_string(), *reached)
                  : fmt::format("never reached {}", want.to_string()));
  if (!reached) return v;

  // Steady window: the saturating phase, after convergence plus warmup.
  const double phase2 = 900.0;
  const double t0 = std::max(*reached, phase2) + r.warmup;
  const double t1 = r.duration;
  const double expected = 60.0 * 13.0 / table2_times(4)[Stage::kTransformer];
  const double got = throughput_qpm(r, t0, t1);
  v.check(within_rel(got, expected, 0.05),
          fmt::format("post-scale throughput over [{:.0f}, {:.0f}): {:.3f} QPM vs {:.3f} +-5%",
                      t0, t1, got, expected));

  const double q_high = 5.0;
  double worst = 0.0;
  Stage worst_stage = Stage::kEncoder;
  for (const auto& u : r.utilization) {
    if (u.time < t0 || u.time >= t1) continue;
    for (Stage s : kAllStages) {
      if (u.metrics[s].queue_length > worst) {
        worst = u.metrics[s].queue_length;
        worst_stage = s;
      }
    }
  }
  v.check(worst < q_high,
          fmt::format("max queue length after convergence {:.0f} ({}) vs Q_high {:.0f}",
                      worst, stage_name(worst_stage), q_high));
  return v;
}

// --- 4 ---------------------------------------------------------------------

Verdict c4_latency_breakdown() {
  Verdict v;
  auto reps = run_jobs({{"mono-single", {}},
                        {"disagg-single", {}},
                        {"mono-loaded", {}},
                        {"disagg-loaded", {}}});
  const StageTimes t = table2_times(4);
  const double compute = t[Stage::kEncoder] + t[Stage::kTransformer] + t[Stage::kDecoder];

  const RunReport& mono = reps[0];
  if (mono.latencies.size() != 1) {
    v.check(false, "mono-single did not complete exactly one request");
    return v;
  }
  const double mono_e2e = mono.latencies[0].e2e();
  v.check(within_rel(mono_e2e, 119.5, 0.01),
          fmt::format("monolithic E2E {:.3f} s vs 119.5 +-1%", mono_e2e));
  Scenario mono_sc = load_scenario(scenario_path("mono-single"));
  const double load_frac = 100.0 * mono_sc.pipeline.load_cost / mono_e2e;
  v.check(std::fabs(load_frac - 25.3) <= 1.0,
          fmt::format("model-load share {:.2f}% vs 25.3 +-1 pt", load_frac));

  const RunReport& dis = reps[1];
  Scenario dis_sc = load_scenario(scenario_path("disagg-single"));
  double xfer = 0.0;
  for (uint64_t bytes : dis_sc.pipeline.transfer_bytes) {
    xfer += dis_sc.pipeline.link.latency +
            static_cast<double>(bytes) / dis_sc.pipeline.link.bandwidth;
  }
  if (dis.latencies.size() != 1) {
    v.check(false, "disagg-single did not complete exactly one request");
  } else {
    const double e2e = dis.latencies[0].e2e();
    v.check(std::fabs(e2e - (compute + xfer)) <= 1e-9,
            fmt::format("disaggregated E2E {:.6f} s vs {:.2f} + {:.6f} transfer", e2e,
                        compute, xfer));
  }

  Scenario loaded = load_scenario(scenario_path("mono-loaded"));
  const double offered = loaded.phases.at(0).rate.value();
  const double mono_rate = loaded.monolithic_instances / mono_e2e;
  const double p99_m = reps[2].quantiles.p99;
  const double p99_d = reps[3].quantiles.p99;
  if (mono_rate < offered) {
    v.check(p99_d < p99_m,
            fmt::format("offered {:.3f}/s > monolithic capacity {:.4f}/s: P99 disagg "
                        "{:.1f} s < mono {:.1f} s",
                        offered, mono_rate, p99_d, p99_m));
  } else {
    v.check(false, fmt::format("mono-loaded does not overload the monolithic deployment "
                               "({:.4f}/s >= {:.3f}/s)",
                               mono_rate, offered));
  }
  return v;
}

// --- 5 ---------------------------------------------------------------------

Verdict c5_jitter() {
  Verdict v;
  const char* levels[] = {"none", "stable", "moderate", "severe"};
  const char* modes[] = {"sync", "async"};
  std::vector<Job> jobs;
  for (const char* m : modes) {
    for (const char* l : levels) {
      jobs.push_back({"jitter-sensitive",
                      {fmt::format("deployment.handoff={}", m),
                       fmt::format("link.jitter={}", l)}});
    }
  }
  auto reps = run_jobs(jobs);
  std::map<std::string, std::map<std::string, double>> deg;
  for (size_t mi = 0; mi < 2; ++mi) {
    const double base = reps[mi * 4].steady_qpm;
    std::string line = fmt::format("{:<5} baseline {:.3f} QPM;", modes[mi], base);
    for (size_t li = 1; li < 4; ++li) {
      const double q = reps[mi * 4 + li].steady_qpm;
      const double d = base > 0 ? (base - q) / base : 0.0;
      deg[modes[mi]][levels[li]] = d;
      line += fmt::format(" {} {:.3f} ({:.1f}%)", levels[li], q, 100.0 * d);
    }
    v.notes.push_back("  " + line);
  }
  for (const char* l : {"moderate", "severe"}) {
    v.check(deg["sync"][l] > deg["async"][l],
            fmt::format("{}: sync {:.1f}% > async {:.1f}%", l, 100 * deg["sync"][l],
                        100 * deg["async"][l]));
  }
  v.check(deg["async"]["severe"] <= 0.15,
          fmt::format("async severe {:.1f}% <= 15%", 100 * deg["async"]["severe"]));
  v.check(deg["sync"]["severe"] >= 0.20,
          fmt::format("sync severe {:.1f}% >= 20%", 100 * deg["sync"]["severe"]));
  for (const char* m : modes) {
    v.check(std::fabs(deg[m]["stable"]) <= 0.03,
            fmt::format("{} stable {:.2f}% within 3%", m, 100 * deg[m]["stable"]));
  }
  return v;
}

// --- 6 ---------------------------------------------------------------------

double exhaustive_best(uint32_t g, const StageTimes& t) {
  double best = 0.0;
  for (uint32_t e = 1; e <= g; ++e) {
    for (uint32_t x = 1; e + x <= g; ++x) {
      for (uint32_t d = 1; e + x + d <= g; ++d) {
        const double q = std::min({e / t[Stage::kEncoder], x / t[Stage::kTransformer],
                                   d / t[Stage::kDecoder]});
        best = std::max(best, q);
      }
    }
  }
  return best;
}

Verdict c6_planner_oracle() {
  Verdict v;
  std::mt19937_64 rng(20260);
  std::uniform_real_distribution<double> dist(0.05, 1000.0);
  size_t cases = 0;
  size_t mismatches = 0;
  std::string first;
  for (int trial = 0; trial < 50; ++trial) {
    StageTimes t;
    for (auto& s : t.seconds) s = dist(rng);
    for (uint32_t g = 3; g <= 16; ++g) {
      ++cases;
      const double got = system_qps(plan_allocation(g, t), t).qps;
      const double want = exhaustive_best(g, t);
      if (got != want) {
        if (mismatches++ == 0) {
          first = fmt::format("G={} trial {}: {} vs {}", g, trial, got, want);
        }
      }
    }
  }
  v.check(mismatches == 0,
          fmt::format("{} cases, {} mismatches{}", cases, mismatches,
                      first.empty() ? "" : "; first " + first));
  return v;
}

// --- 7 ---------------------------------------------------------------------

Verdict c7_ring_queue() {
  Verdict v;
  constexpr uint32_t kProducers = 8;
  constexpr uint32_t kConsumers = 8;
  constexpr uint64_t kPerProducer = 100'000;
  constexpr size_t kCapacity = 64;
  int bad_multiset = 0, bad_fifo = 0, bad_bounds = 0;
  for (uint64_t seed = 0; seed < 100; ++seed) {
    RingStressResult r =
        ring_stress(kProducers, kConsumers, kProducers * kPerProducer, kCapacity, seed);
    bad_multiset += !r.multiset_equal;
    bad_fifo += !r.per_producer_fifo;
    bad_bounds += !r.bounds_held;
  }
  v.check(bad_multiset == 0, fmt::format("multiset equality: {} of 100 runs failed", bad_multiset));
  v.check(bad_fifo == 0, fmt::format("per-producer FIFO: {} of 100 runs failed", bad_fifo));
  v.check(bad_bounds == 0, fmt::format("occupancy bounds: {} of 100 runs failed", bad_bounds));
  v.notes.push_back(fmt::format("  8 producers x 8 consumers, {} slots per producer, capacity {}",
                                kPerProducer, kCapacity));
  return v;
}

// --- 8 ---------------------------------------------------------------------

const char* kBaseScenarios[] = {
    "ratio-161-4step", "ratio-152-4step", "ratio-161-1step", "ratio-152-1step",
    "hybrid-param-trace", "scale-out-trace", "mono-single", "disagg-single",
    "mono-loaded", "disagg-loaded", "jitter-sensitive", "scaling-4gpu",
    "scaling-8gpu", "scaling-16gpu"};

Verdict c8_conservation() {
  Verdict v;
  // Base scenarios not already run by another criterion.
  std::vector<Job> extra;
  for (const char* n : kBaseScenarios) {
    bool seen = false;
    for (const auto& j : g_jobs) seen |= j.name == n && j.overrides.empty();
    if (!seen) extra.push_back({n, {}});
  }
  if (!extra.empty()) run_jobs(extra);
  for (const auto& e : g_run_errors) v.check(false, e);
  size_t bad = 0;
  for (size_t i = 0; i < g_jobs.size(); ++i) {
    const RunReport& r = g_reports[i];
    const bool conserved = r.admissions == r.completions + r.failures;
    LogValidation lv = validate_event_log(r.event_log);
    if (!conserved || !lv.ok || lv.admissions != r.admissions) {
      ++bad;
      v.check(false, fmt::format("{}: admissions {} completions {} failures {} log {}",
                                 g_jobs[i].label(), r.admissions, r.completions,
                                 r.failures, lv.ok ? "ok" : lv.message));
    }
  }
  v.check(bad == 0 && g_run_errors.empty(),
          fmt::format("{} runs: conservation and event-log replay", g_jobs.size()));
  return v;
}

// --- 9 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict c9_determinism() {
  Verdict v;
  const fs::path root = fs::temp_directory_path() / "disagsim_acceptance_det";
  fs::remove_all(root);
  // Second, fresh run of every job made so far.
  const std::vector<Job> jobs = g_jobs;
  std::vector<Scenario> scs;
  for (const auto& j : jobs) scs.push_back(load_scenario(scenario_path(j.name), j.overrides));
  std::vector<RunReport> again = run_batch(scs);
  size_t files = 0;
  size_t diffs = 0;
  for (size_t i = 0; i < jobs.size(); ++i) {
    const fs::path a = root / fmt::format("{}a", i);
    const fs::path b = root / fmt::format("{}b", i);
    emit(g_reports[i], a.string());
    emit(again[i], b.string());
    for (const auto& f : fs::directory_iterator(a)) {
      if (f.path().extension() != ".csv") continue;
      ++files;
      if (slurp(f.path()) != slurp(b / f.path().filename())) {
        ++diffs;
        v.check(false, fmt::format("{}: {} differs", jobs[i].label(),
                                   f.path().filename().string()));
      }
    }
  }
  fs::remove_all(root);
  v.check(diffs == 0, fmt::format("{} runs, {} CSV files compared byte for byte",
                                  jobs.size(), files));
  return v;
}

// --- 10 --------------------------------------------------------------------

Verdict c10_scaling() {
  Verdict v;
  auto reps = run_jobs({{"scaling-4gpu", {}}, {"scaling-8gpu", {}}, {"scaling-16gpu", {}}});
  const double base = reps[0].steady_qpm;
  const uint32_t gpus[] = {4, 8, 16};
  for (size_t i = 0; i < 3; ++i) {
    const double ratio = base > 0 ? reps[i].steady_qpm / base : 0.0;
    const double linear = gpus[i] / 4.0;
    v.check(within_rel(ratio, linear, 0.10),
            fmt::format("{} GPUs {}: {:.3f} QPM, x{:.3f} vs linear x{:.1f} +-10%", gpus[i],
                        reps[i].final_allocation.to_string(), reps[i].steady_qpm, ratio,
                        linear));
  }
  return v;
}

template <typename F>
void timed(int n, const std::string& title, F f) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = f();
  } catch (const std::exception& e) {
    v.check(false, fmt::format("exception: {}", e.what()));
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report(n, title, v, secs);
}

}  // namespace

int main() {
  timed(1, "instance-ratio throughput", c1_ratio_throughput);
  timed(2, "hybrid scheduler on the parameter trace", c2_hybrid_parameter_trace);
  timed(3, "scale-out on the rate trace", c3_scale_out);
  timed(4, "latency breakdown", c4_latency_breakdown);
  timed(5, "jitter robustness ordering", c5_jitter);
  timed(6, "planner oracle equivalence", c6_planner_oracle);
  timed(7, "ring-queue correctness", c7_ring_queue);
  timed(8, "conservation and protocol legality", c8_conservation);
  timed(9, "determinism", c9_determinism);
  timed(10, "scaling shape", c10_scaling);
  fmt::print("{} of 10 criteria passed\n", 10 - g_failed);
  return g_failed == 0 ? 0 : 1;
}

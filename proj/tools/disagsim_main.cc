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

// disagsim command line: run, plan, trace, compare, validate.
//
// Exit codes: 0 success, 1 usage, 2 validation or invariant failure, 3 I/O.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "disagsim/perfmodel.h"
#include "disagsim/pipeline.h"
#include "disagsim/simharness.h"
#include "disagsim/workload.h"

namespace {

using namespace disagsim;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitIo = 3;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read '{}'", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct RunArgs {
  std::string scenario;
  std::vector<std::string> sets;
  std::optional<uint64_t> seed;
  std::string out;
  double threaded_scale = 0.0;
};

std::vector<std::string> overrides_of(const RunArgs& a) {
  std::vector<std::string> o = a.sets;
  // --seed wins over any run.seed given with --set.
  if (a.seed) o.push_back(fmt::format("run.seed={}", *a.seed));
  return o;
}

int cmd_run(const RunArgs& a) {
  Scenario sc = load_scenario(a.scenario, overrides_of(a));
  if (a.threaded_scale > 0.0) {
    ThreadedReport t = run_threaded(sc, a.threaded_scale);
    fmt::print("scenario        {}\nmode            threaded x{}\n", sc.name,
               a.threaded_scale);
    fmt::print("admissions      {}\ncompletions     {}\nsteady_qpm      {:.6g}\n",
               t.admissions, t.completions, t.steady_qpm);
    fmt::print("multiset_equal  {}\nring_bounds     {}\n", t.multiset_equal,
               t.ring_bounds_held);
    return t.multiset_equal && t.ring_bounds_held ? kExitOk : kExitInvalid;
  }
  RunReport r = run(sc);
  if (!a.out.empty()) emit(r, a.out);
  fmt::print("{}", format_summary(r));
  return kExitOk;
}

struct PlanArgs {
  std::string profile = "wan22-a10-table2";
  uint32_t gpus = 8;
  uint32_t steps = 4;
  uint32_t width = 832;
  uint32_t height = 480;
  uint32_t frames = 81;
  size_t top = 5;
  std::optional<uint32_t> budget;
  std::vector<uint32_t> current;
};

int cmd_plan(const PlanArgs& a) {
  StageProfile profile = resolve_profile(a.profile);
  WorkloadParams p;
  p.steps = a.steps;
  p.width = a.width;
  p.height = a.height;
  p.frames = a.frames;
  p.validate();
  StageTimes t = stage_times(profile, p);
  std::optional<MoveConstraint> constraint;
  if (a.budget) {
    if (a.current.size() != 3) {
      throw ValidationError("--budget needs --current E T D");
    }
    constraint = MoveConstraint{
        Allocation(a.current[0], a.current[1], a.current[2]), *a.budget};
  }
  Allocation best = plan_allocation(a.gpus, t, constraint);
  Throughput q = system_qps(best, t);
  fmt::print("workload   {}\n", p.key().to_string());
  fmt::print("times_s    E={:.6g} T={:.6g} D={:.6g}\n", t[Stage::kEncoder],
             t[Stage::kTransformer], t[Stage::kDecoder]);
  fmt::print("gpus       {}\n", a.gpus);
  fmt::print("best       {} {:.6g} QPM (bottleneck {})\n", best.to_string(),
             q.qpm(), stage_name(q.bottleneck));
  fmt::print("\nrank,allocation,qpm,qps,bottleneck\n");
  auto ranked = top_allocations(a.gpus, t, a.top, constraint);
  for (size_t i = 0; i < ranked.size(); ++i) {
    const auto& r = ranked[i];
    fmt::print("{},\"{}\",{:.6g},{:.6g},{}\n", i + 1, r.alloc.to_string(),
               r.throughput.qpm(), r.throughput.qps,
               stage_name(r.throughput.bottleneck));
  }
  return kExitOk;
}

int cmd_trace(const RunArgs& a) {
  Scenario sc = load_scenario(a.scenario, overrides_of(a));
  const std::string csv = serialize_trace(sc.trace());
  if (a.out.empty()) {
    fmt::print("{}", csv);
  } else {
    std::ofstream out(a.out, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write '{}'", a.out));
    out << csv;
  }
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& dirs) {
  std::vector<RunReport> reports;
  for (const auto& d : dirs) {
    const std::string path = d + "/summary.json";
    nlohmann::json js;
    try {
      js = nlohmann::json::parse(slurp(path));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(fmt::format("{}: {}", path, e.what()));
    }
    RunReport r;
    r.scenario = d;
    r.steady_qpm = std::stod(js.at("steady_qpm").get<std::string>());
    reports.push_back(std::move(r));
  }
  fmt::print("{}", format_comparison(compare(reports)));
  return kExitOk;
}

int cmd_validate(const std::string& path) {
  LogValidation v = validate_event_log(slurp(path));
  if (!v.ok) {
    fmt::print(stderr, "{}:{}: {}\n", path, v.line, v.message);
    return kExitInvalid;
  }
  if (v.admissions == 0) {
    fmt::print("ok: 0 requests (empty log)\n");
  } else {
    fmt::print("ok: {} transitions, {} admissions, {} completions, {} failures\n",
               v.transitions, v.admissions, v.completions, v.failures);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"disagsim: disaggregated diffusion serving simulator"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Run a scenario and write reports");
  run->add_option("--scenario", run_args.scenario, "Scenario JSON file")
      ->required();
  run->add_option("--set", run_args.sets,
                  "Override a scenario key, e.g. link.jitter=severe "
                  "(repeatable, last wins)");
  run->add_option("--seed", run_args.seed, "Master seed (overrides run.seed)");
  run->add_option("--out", run_args.out, "Report output directory");
  run->add_option("--threaded", run_args.threaded_scale,
                  "Real-thread mode with this wall seconds per simulated "
                  "second");

  PlanArgs plan_args;
  auto* plan = app.add_subcommand("plan", "Best allocation for a workload");
  plan->add_option("--profile", plan_args.profile,
                   "Built-in profile name or profile JSON path")
      ->capture_default_str();
  plan->add_option("--gpus", plan_args.gpus, "GPU budget")
      ->capture_default_str();
  plan->add_option("--steps", plan_args.steps, "Denoising steps")
      ->capture_default_str();
  plan->add_option("--width", plan_args.width, "Frame width")
      ->capture_default_str();
  plan->add_option("--height", plan_args.height, "Frame height")
      ->capture_default_str();
  plan->add_option("--frames", plan_args.frames, "Frame count")
      ->capture_default_str();
  plan->add_option("--top", plan_args.top, "Candidates to list")
      ->capture_default_str();
  plan->add_option("--budget", plan_args.budget,
                   "Max instance moves away from --current");
  plan->add_option("--current", plan_args.current, "Current allocation E T D")
      ->expected(3);

  RunArgs trace_args;
  auto* trace = app.add_subcommand("trace", "Write a scenario's arrival trace");
  trace->add_option("--scenario", trace_args.scenario, "Scenario JSON file")
      ->required();
  trace->add_option("--set", trace_args.sets, "Override a scenario key");
  trace->add_option("--seed", trace_args.seed, "Master seed");
  trace->add_option("--out", trace_args.out, "Output CSV (default stdout)");

  std::vector<std::string> compare_dirs;
  auto* cmp = app.add_subcommand(
      "compare", "Throughput degradation of report dirs against the first");
  cmp->add_option("reports", compare_dirs, "Report directories, baseline first")
      ->required()
      ->expected(2, -1);

  std::string log_path;
  auto* val = app.add_subcommand("validate", "Replay an event log");
  val->add_option("--log", log_path, "events.csv from a run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (run->parsed()) return cmd_run(run_args);
    if (plan->parsed()) return cmd_plan(plan_args);
    if (trace->parsed()) return cmd_trace(trace_args);
    if (cmp->parsed()) return cmd_compare(compare_dirs);
    if (val->parsed()) return cmd_validate(log_path);
  } catch (const ConfigError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    fmt::print(stderr, "io error: {}\n", e.what());
    return kExitIo;
  } catch (const Error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitInvalid;
  }
  return kExitUsage;
}

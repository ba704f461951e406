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

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "disagsim/simharness.h"

namespace disagsim {
namespace {

namespace fs = std::filesystem;

std::string scenario_path(const std::string& name) {
  return std::string(DISAGSIM_SOURCE_DIR) + "/scenarios/" + name + ".json";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("disagsim_test_" + name);
  fs::remove_all(d);
  return d;
}

TEST(OverrideTest, DottedKeysAndIndices) {
  nlohmann::json doc = nlohmann::json::parse(
      R"({"trace": {"phases": [{"duration": 10, "rate": 0.1}]},
          "run": {"duration": 10}})");
  apply_override(doc, "run.duration=20");
  apply_override(doc, "link.jitter=severe");
  apply_override(doc, "trace.phases.0.rate=0.25");
  apply_override(doc, "scheduler.allocation=[1,5,2]");
  EXPECT_EQ(doc["run"]["duration"], 20);
  EXPECT_EQ(doc["link"]["jitter"], "severe");
  EXPECT_EQ(doc["trace"]["phases"][0]["rate"], 0.25);
  EXPECT_EQ(doc["scheduler"]["allocation"], nlohmann::json({1, 5, 2}));
  // Last one wins.
  apply_override(doc, "run.duration=30");
  EXPECT_EQ(doc["run"]["duration"], 30);
}

TEST(OverrideTest, UnknownKeyListsValidKeys) {
  nlohmann::json doc = nlohmann::json::object();
  try {
    apply_override(doc, "run.bogus=1");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("run.bogus"), std::string::npos);
    EXPECT_NE(msg.find("run.duration"), std::string::npos);
  }
  EXPECT_THROW(apply_override(doc, "no-equals-sign"), ConfigError);
}

TEST(ScenarioTest, UnknownDocumentKeyRejected) {
  nlohmann::json doc = nlohmann::json::parse(slurp(scenario_path("ratio-161-1step")));
  doc["cluster"]["gpu"] = 8;
  EXPECT_THROW(scenario_from_json(doc), ConfigError);
}

TEST(ScenarioTest, MissingFileIsIoError) {
  EXPECT_THROW(load_scenario("/nonexistent/x.json"), IoError);
}

TEST(ScenarioTest, ShippedScenariosLoad) {
  for (const auto& entry :
       fs::directory_iterator(std::string(DISAGSIM_SOURCE_DIR) + "/scenarios")) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_scenario(entry.path().string())) << entry.path();
  }
}

TEST(RunTest, ZeroDurationGivesEmptyReport) {
  Scenario sc = load_scenario(scenario_path("ratio-161-1step"),
                              {"run.duration=0"});
  RunReport r = run(sc);
  EXPECT_EQ(r.admissions, 0u);
  EXPECT_EQ(r.completions, 0u);
  EXPECT_TRUE(r.latencies.empty());
  EXPECT_EQ(r.steady_qpm, 0.0);
  EXPECT_TRUE(validate_event_log(r.event_log).ok);
}

TEST(RunTest, EmitIsByteDeterministic) {
  Scenario sc = load_scenario(scenario_path("hybrid-param-trace"));
  const fs::path a = fresh_dir("emit_a");
  const fs::path b = fresh_dir("emit_b");
  emit(run(sc), a.string());
  emit(run(sc), b.string());
  size_t files = 0;
  for (const auto& f : fs::directory_iterator(a)) {
    ++files;
    EXPECT_EQ(slurp(f.path()), slurp(b / f.path().filename()))
        << f.path().filename();
  }
  EXPECT_EQ(files, 8u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(RunTest, SeedChangesPoissonTrace) {
  Scenario a = load_scenario(scenario_path("disagg-loaded"));
  Scenario b = load_scenario(scenario_path("disagg-loaded"), {"run.seed=2"});
  EXPECT_NE(a.trace(), b.trace());
  EXPECT_EQ(a.trace(), load_scenario(scenario_path("disagg-loaded")).trace());
}

TEST(CompareTest, DegradationArithmetic) {
  RunReport base;
  base.scenario = "base";
  base.steady_qpm = 10.0;
  RunReport worse = base;
  worse.scenario = "worse";
  worse.steady_qpm = 7.0;
  auto rows = compare({base, worse, base});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_DOUBLE_EQ(rows[0].degradation, 0.0);
  EXPECT_NEAR(rows[1].degradation, 0.30, 1e-12);
  EXPECT_DOUBLE_EQ(rows[2].degradation, 0.0);

  RunReport zero = base;
  zero.steady_qpm = 0.0;
  rows = compare({zero, worse});
  EXPECT_TRUE(rows[1].undefined);
  EXPECT_NE(format_comparison(rows).find("undefined"), std::string::npos);
}

TEST(QuantileTest, NearestRank) {
  std::vector<double> v;
  for (int i = 100; i >= 1; --i) v.push_back(i);
  Quantiles q = latency_quantiles(v);
  EXPECT_EQ(q.p50, 50);
  EXPECT_EQ(q.p90, 90);
  EXPECT_EQ(q.p99, 99);
  EXPECT_DOUBLE_EQ(q.mean, 50.5);
  Quantiles empty = latency_quantiles({});
  EXPECT_EQ(empty.p99, 0.0);
}

TEST(QuantileTest, MonotoneProperty) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + rng() % 300);
    for (auto& x : v) x = 500.0 * unit_interval(rng());
    Quantiles q = latency_quantiles(v);
    EXPECT_LE(q.p50, q.p90);
    EXPECT_LE(q.p90, q.p99);
    EXPECT_LE(q.p99, *std::max_element(v.begin(), v.end()));
    EXPECT_GE(q.p50, *std::min_element(v.begin(), v.end()));
  }
}

TEST(RunTest, LittlesLawOverWholeRun) {
  RunReport r = run(load_scenario(scenario_path("disagg-loaded")));
  ASSERT_GT(r.completions, 50u);
  ASSERT_EQ(r.failures, 0u);
  double sojourn = 0.0;
  for (const auto& s : r.latencies) sojourn += s.e2e();
  // Time-integral of the in-flight count equals the summed sojourn times
  // once the system has emptied.
  const double area = mean_in_flight(r, 0.0, r.end_time) * r.end_time;
  EXPECT_NEAR(area, sojourn, 0.10 * sojourn);
}

TEST(RunTest, ConservationAcrossShippedScenarios) {
  for (const char* name :
       {"ratio-161-4step", "ratio-152-1step", "mono-loaded", "scale-out-trace",
        "jitter-sensitive"}) {
    RunReport r = run(load_scenario(scenario_path(name)));
    EXPECT_EQ(r.admissions, r.completions + r.failures) << name;
    EXPECT_TRUE(validate_event_log(r.event_log).ok) << name;
  }
}

TEST(BatchTest, ParallelEqualsSerial) {
  std::vector<Scenario> scs;
  for (const char* name : {"ratio-161-1step", "ratio-152-1step", "disagg-loaded",
                           "hybrid-param-trace"}) {
    scs.push_back(load_scenario(scenario_path(name)));
  }
  auto par = run_batch(scs);
  auto ser = run_batch_serial(scs);
  ASSERT_EQ(par.size(), ser.size());
  for (size_t i = 0; i < par.size(); ++i) {
    EXPECT_EQ(par[i].scenario, ser[i].scenario);
    EXPECT_EQ(par[i].event_log, ser[i].event_log);
    EXPECT_EQ(par[i].steady_qpm, ser[i].steady_qpm);
  }
}

TEST(ThreadedTest, AgreesWithEventSimulation) {
  Scenario sc = load_scenario(scenario_path("ratio-161-1step"),
                              {"run.duration=900", "trace.phases.0.duration=900"});
  RunReport des = run(sc);
  ThreadedReport thr = run_threaded(sc, 0.002);
  EXPECT_TRUE(thr.multiset_equal);
  EXPECT_TRUE(thr.ring_bounds_held);
  EXPECT_EQ(thr.admissions, thr.completions);
  EXPECT_NEAR(thr.steady_qpm, des.steady_qpm, 0.20 * des.steady_qpm);
}

}  // namespace
}  // namespace disagsim

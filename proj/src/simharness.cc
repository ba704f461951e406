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

#include "disagsim/simharness.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "disagsim/engine.h"

namespace disagsim {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Keys

namespace {

const std::vector<std::string> kLeafKeys = {
    "name",
    "cluster.gpus",
    "cluster.gpu_memory_gb",
    "cluster.nodes",
    "cluster.standby_nodes",
    "profile.include",
    "profile.path",
    "profile.inline",
    "trace.file",
    "trace.phases",
    "trace.phases[].duration",
    "trace.phases[].process",
    "trace.phases[].rate",
    "trace.phases[].saturation",
    "trace.phases[].steps",
    "trace.phases[].width",
    "trace.phases[].height",
    "trace.phases[].frames",
    "trace.phases[].task",
    "link.bandwidth",
    "link.latency",
    "link.jitter",
    "link.drop_probability",
    "link.transfer_bytes",
    "link.control_latency",
    "retry.base_delay",
    "retry.multiplier",
    "retry.max_attempts",
    "retry.timeout",
    "batch.enabled",
    "batch.max_messages",
    "batch.max_bytes",
    "batch.flush_timeout",
    "deployment.mode",
    "deployment.handoff",
    "deployment.load_cost",
    "deployment.init_cost",
    "deployment.cold_start",
    "deployment.prefetch_lead",
    "deployment.ring_capacity",
    "deployment.rings_per_queue",
    "deployment.reroute_threshold",
    "deployment.admission_backoff",
    "deployment.instances",
    "deployment.upstream_timeout",
    "deployment.max_readmissions",
    "deployment.record_events",
    "scheduler.mode",
    "scheduler.allocation",
    "scheduler.interval",
    "scheduler.u_high",
    "scheduler.q_high",
    "scheduler.u_low",
    "scheduler.history_length",
    "scheduler.recent_fraction",
    "scheduler.predictor",
    "scheduler.lookup",
    "scheduler.lookup_fallback",
    "scheduler.move_budget",
    "scheduler.scale_in_patience",
    "scheduler.use_standby",
    "run.duration",
    "run.warmup",
    "run.seed",
    "run.drain_limit",
};

// Subtrees whose inner keys are free-form.
const std::vector<std::string> kOpaque = {"profile.inline", "scheduler.lookup"};

const std::set<std::string>& known_paths() {
  static const std::set<std::string> paths = [] {
    std::set<std::string> out;
    for (const auto& k : kLeafKeys) {
      out.insert(k);
      for (size_t pos = k.find('.'); pos != std::string::npos;
           pos = k.find('.', pos + 1)) {
        out.insert(k.substr(0, pos));
      }
    }
    return out;
  }();
  return paths;
}

bool opaque(const std::string& path) {
  for (const auto& o : kOpaque) {
    if (path == o || path.rfind(o + ".", 0) == 0) return true;
  }
  return false;
}

std::string valid_key_list() {
  std::string out;
  for (const auto& k : kLeafKeys) {
    out += "\n  ";
    out += k;
  }
  return out;
}

void check_known(const json& j, const std::string& prefix) {
  if (opaque(prefix)) return;
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      std::string path = prefix.empty() ? k : prefix + "." + k;
      if (!known_paths().contains(path)) {
        throw ConfigError(
            fmt::format("unknown scenario key '{}'; valid keys:{}", path,
                        valid_key_list()));
      }
      check_known(v, path);
    }
  } else if (j.is_array() && !prefix.empty() &&
             known_paths().contains(prefix + "[]")) {
    for (const auto& v : j) check_known(v, prefix + "[]");
  }
}

bool all_digits(std::string_view s) {
  return !s.empty() &&
         std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

const std::vector<std::string>& scenario_keys() { return kLeafKeys; }

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError(fmt::format("override '{}' is not key=value", assignment));
  }
  const std::string key(assignment.substr(0, eq));
  const std::string value(assignment.substr(eq + 1));

  std::vector<std::string> parts;
  std::string normalized;
  for (size_t start = 0;;) {
    size_t dot = key.find('.', start);
    std::string part = key.substr(start, dot == std::string::npos
                                             ? std::string::npos
                                             : dot - start);
    if (part.empty()) throw ConfigError(fmt::format("bad key '{}'", key));
    if (all_digits(part)) {
      normalized += "[]";
    } else {
      if (!normalized.empty()) normalized += ".";
      normalized += part;
    }
    parts.push_back(part);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (!known_paths().contains(normalized) && !opaque(normalized)) {
    throw ConfigError(fmt::format("unknown config key '{}'; valid keys:{}", key,
                                  valid_key_list()));
  }

  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }

  json* node = &doc;
  for (size_t i = 0; i < parts.size(); ++i) {
    const std::string& part = parts[i];
    const bool last = i + 1 == parts.size();
    if (all_digits(part)) {
      if (!node->is_array()) {
        throw ConfigError(fmt::format("'{}': indexing a non-array", key));
      }
      const size_t idx = std::stoul(part);
      if (idx > node->size()) {
        throw ConfigError(fmt::format("'{}': index {} past the end", key, idx));
      }
      if (idx == node->size()) node->push_back(json::object());
      node = &(*node)[idx];
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object()) {
        throw ConfigError(fmt::format("'{}': {} is not a section", key, part));
      }
      node = &(*node)[part];
    }
    if (last) *node = parsed;
  }
}

// ---------------------------------------------------------------------------
// Scenario parsing

namespace {

const json& section(const json& doc, const char* name) {
  static const json empty = json::object();
  if (!doc.contains(name)) return empty;
  const json& s = doc.at(name);
  if (!s.is_object()) {
    throw ConfigError(fmt::format("section '{}' must be an object", name));
  }
  return s;
}

double num(const json& sec, const char* key, double fallback,
           const char* where) {
  if (!sec.contains(key) || sec.at(key).is_null()) return fallback;
  const json& v = sec.at(key);
  if (!v.is_number()) {
    throw ConfigError(fmt::format("{}.{} must be a number", where, key));
  }
  return v.get<double>();
}

uint64_t count(const json& sec, const char* key, uint64_t fallback,
               const char* where) {
  if (!sec.contains(key) || sec.at(key).is_null()) return fallback;
  const json& v = sec.at(key);
  if (!v.is_number_integer() || v.get<int64_t>() < 0) {
    throw ConfigError(
        fmt::format("{}.{} must be a non-negative integer", where, key));
  }
  return v.get<uint64_t>();
}

std::string str(const json& sec, const char* key, const std::string& fallback,
                const char* where) {
  if (!sec.contains(key) || sec.at(key).is_null()) return fallback;
  const json& v = sec.at(key);
  if (!v.is_string()) {
    throw ConfigError(fmt::format("{}.{} must be a string", where, key));
  }
  return v.get<std::string>();
}

bool flag(const json& sec, const char* key, bool fallback, const char* where) {
  if (!sec.contains(key) || sec.at(key).is_null()) return fallback;
  const json& v = sec.at(key);
  if (!v.is_boolean()) {
    throw ConfigError(fmt::format("{}.{} must be true or false", where, key));
  }
  return v.get<bool>();
}

Allocation allocation_from(const json& v, const std::string& where) {
  if (v.is_array() && v.size() == 3 &&
      std::all_of(v.begin(), v.end(),
                  [](const json& x) { return x.is_number_integer(); })) {
    return Allocation(v[0].get<uint32_t>(), v[1].get<uint32_t>(),
                      v[2].get<uint32_t>());
  }
  throw ConfigError(fmt::format("{} must be [g_E, g_T, g_D]", where));
}

std::string resolve_path(const std::string& path, const std::string& base) {
  if (base.empty() || path.empty() || path.front() == '/') return path;
  return (std::filesystem::path(base) / path).string();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError(fmt::format("cannot read '{}': {}", path,
                              std::strerror(errno)));
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Scenario scenario_from_json(const json& input,
                            const std::vector<std::string>& overrides,
                            const std::string& base_dir) {
  if (!input.is_object()) throw ConfigError("scenario must be a JSON object");
  json doc = input;
  for (const auto& o : overrides) apply_override(doc, o);
  check_known(doc, "");

  Scenario sc;
  sc.document = doc;
  sc.overrides = overrides;
  sc.name = doc.value("name", std::string("unnamed"));

  // cluster
  const json& cl = section(doc, "cluster");
  sc.cluster.gpu_memory_bytes = num(cl, "gpu_memory_gb", 24.0, "cluster") * 1e9;
  if (cl.contains("nodes")) {
    for (const auto& n : cl.at("nodes")) {
      if (!n.is_number_integer() || n.get<int64_t>() <= 0) {
        throw ConfigError("cluster.nodes must hold positive GPU counts");
      }
      sc.cluster.node_gpus.push_back(n.get<uint32_t>());
    }
  }
  const uint64_t gpus = count(cl, "gpus", 0, "cluster");
  if (sc.cluster.node_gpus.empty()) {
    sc.cluster.node_gpus.push_back(static_cast<uint32_t>(gpus ? gpus : 8));
  }
  sc.cluster.total_gpus = 0;
  for (uint32_t n : sc.cluster.node_gpus) sc.cluster.total_gpus += n;
  if (gpus != 0 && gpus != sc.cluster.total_gpus) {
    throw ConfigError(fmt::format(
        "cluster.gpus = {} but cluster.nodes add up to {}", gpus,
        sc.cluster.total_gpus));
  }
  sc.standby_nodes =
      static_cast<uint32_t>(count(cl, "standby_nodes", 0, "cluster"));

  // profile
  const json& pr = section(doc, "profile");
  const int sources = pr.contains("include") + pr.contains("path") +
                      pr.contains("inline");
  if (sources > 1) {
    throw ConfigError("profile takes one of include, path or inline");
  }
  if (pr.contains("inline")) {
    sc.profile = profile_from_json(pr.at("inline"));
  } else if (pr.contains("path")) {
    sc.profile =
        load_profile_file(resolve_path(str(pr, "path", "", "profile"), base_dir));
  } else {
    const std::string name = str(pr, "include", "wan22-a10-table2", "profile");
    auto p = builtin_profile(name);
    if (!p) {
      throw ConfigError(fmt::format("unknown built-in profile '{}'", name));
    }
    sc.profile = *p;
  }

  // trace
  const json& tr = section(doc, "trace");
  if (tr.contains("file")) {
    const std::string path = resolve_path(str(tr, "file", "", "trace"), base_dir);
    sc.trace_events = parse_trace(read_file(path)).events;
  }
  if (tr.contains("phases")) {
    for (const auto& ph : tr.at("phases")) {
      if (!ph.is_object()) throw ConfigError("trace.phases entries are objects");
      PhaseSpec p;
      p.duration = num(ph, "duration", 0.0, "trace.phases[]");
      const std::string proc =
          str(ph, "process", "deterministic", "trace.phases[]");
      if (proc == "deterministic") {
        p.process = ArrivalProcess::kDeterministic;
      } else if (proc == "poisson") {
        p.process = ArrivalProcess::kPoisson;
      } else {
        throw ConfigError(fmt::format(
            "trace.phases[].process must be deterministic or poisson, got '{}'",
            proc));
      }
      if (ph.contains("rate")) p.rate = num(ph, "rate", 0.0, "trace.phases[]");
      if (ph.contains("saturation")) {
        p.saturation = num(ph, "saturation", 0.0, "trace.phases[]");
      }
      if (p.rate.has_value() == p.saturation.has_value()) {
        throw ConfigError("each trace phase needs exactly one of rate, saturation");
      }
      p.params.steps = static_cast<uint32_t>(count(ph, "steps", 1, "trace.phases[]"));
      p.params.width = static_cast<uint32_t>(count(ph, "width", 832, "trace.phases[]"));
      p.params.height =
          static_cast<uint32_t>(count(ph, "height", 480, "trace.phases[]"));
      p.params.frames =
          static_cast<uint32_t>(count(ph, "frames", 81, "trace.phases[]"));
      p.params.task_tag = str(ph, "task", "I2V", "trace.phases[]");
      sc.phases.push_back(std::move(p));
    }
  }

  // link
  PipelineConfig& pc = sc.pipeline;
  const json& ln = section(doc, "link");
  pc.link.bandwidth = num(ln, "bandwidth", pc.link.bandwidth, "link");
  pc.link.latency = num(ln, "latency", pc.link.latency, "link");
  pc.link.drop_probability =
      num(ln, "drop_probability", pc.link.drop_probability, "link");
  if (ln.contains("jitter")) {
    const json& j = ln.at("jitter");
    if (j.is_string()) {
      pc.link.jitter = parse_jitter(j.get<std::string>());
    } else if (j.is_object()) {
      pc.link.jitter.probability = num(j, "probability", 0.0, "link.jitter");
      pc.link.jitter.delay = num(j, "delay", 0.0, "link.jitter");
    } else {
      throw ConfigError("link.jitter must be a preset name or an object");
    }
  }
  if (ln.contains("transfer_bytes")) {
    const json& tb = ln.at("transfer_bytes");
    if (tb.is_number()) {
      pc.transfer_bytes = {tb.get<uint64_t>(), tb.get<uint64_t>()};
    } else if (tb.is_array() && tb.size() == 2) {
      pc.transfer_bytes = {tb[0].get<uint64_t>(), tb[1].get<uint64_t>()};
    } else {
      throw ConfigError("link.transfer_bytes must be a number or a pair");
    }
  }
  pc.control_latency = num(ln, "control_latency", pc.control_latency, "link");

  const json& rt = section(doc, "retry");
  pc.retry.base_delay = num(rt, "base_delay", pc.retry.base_delay, "retry");
  pc.retry.multiplier = num(rt, "multiplier", pc.retry.multiplier, "retry");
  pc.retry.max_attempts = static_cast<uint32_t>(
      count(rt, "max_attempts", pc.retry.max_attempts, "retry"));
  pc.retry.timeout = num(rt, "timeout", pc.retry.timeout, "retry");

  const json& bt = section(doc, "batch");
  pc.batch_control = flag(bt, "enabled", false, "batch");
  pc.batch.max_messages = count(bt, "max_messages", pc.batch.max_messages, "batch");
  pc.batch.max_bytes = count(bt, "max_bytes", pc.batch.max_bytes, "batch");
  pc.batch.flush_timeout =
      num(bt, "flush_timeout", pc.batch.flush_timeout, "batch");

  // deployment
  const json& dp = section(doc, "deployment");
  const std::string mode = str(dp, "mode", "disaggregated", "deployment");
  if (mode == "disaggregated") {
    pc.deployment = DeploymentMode::kDisaggregated;
  } else if (mode == "monolithic") {
    pc.deployment = DeploymentMode::kMonolithic;
  } else {
    throw ConfigError(fmt::format(
        "deployment.mode must be disaggregated or monolithic, got '{}'", mode));
  }
  const std::string handoff = str(dp, "handoff", "async", "deployment");
  auto hm = parse_handoff(handoff);
  if (!hm) {
    throw ConfigError(fmt::format(
        "deployment.handoff must be sync or async, got '{}'", handoff));
  }
  pc.handoff = *hm;
  pc.load_cost = num(dp, "load_cost", pc.load_cost, "deployment");
  pc.init_cost = num(dp, "init_cost", pc.init_cost, "deployment");
  pc.cold_start = num(dp, "cold_start", pc.cold_start, "deployment");
  pc.prefetch_lead = num(dp, "prefetch_lead", pc.prefetch_lead, "deployment");
  pc.ring_capacity = count(dp, "ring_capacity", pc.ring_capacity, "deployment");
  pc.rings_per_queue = static_cast<uint32_t>(
      count(dp, "rings_per_queue", pc.rings_per_queue, "deployment"));
  pc.reroute_threshold =
      num(dp, "reroute_threshold", pc.reroute_threshold, "deployment");
  pc.admission_backoff =
      num(dp, "admission_backoff", pc.admission_backoff, "deployment");
  pc.upstream_timeout =
      num(dp, "upstream_timeout", pc.upstream_timeout, "deployment");
  pc.max_readmissions = static_cast<uint32_t>(
      count(dp, "max_readmissions", pc.max_readmissions, "deployment"));
  pc.record_events = flag(dp, "record_events", true, "deployment");
  sc.monolithic_instances =
      static_cast<uint32_t>(count(dp, "instances", 1, "deployment"));

  // scheduler
  const json& sh = section(doc, "scheduler");
  const std::string smode = str(sh, "mode", "static", "scheduler");
  if (smode == "static") {
    sc.scheduler_mode = SchedulerMode::kStatic;
  } else if (smode == "hybrid") {
    sc.scheduler_mode = SchedulerMode::kHybrid;
  } else {
    throw ConfigError(fmt::format(
        "scheduler.mode must be static or hybrid, got '{}'", smode));
  }
  if (sh.contains("allocation") && !sh.at("allocation").is_null()) {
    sc.allocation = allocation_from(sh.at("allocation"), "scheduler.allocation");
  }
  SchedulerConfig& scfg = sc.scheduler;
  scfg.interval = num(sh, "interval", scfg.interval, "scheduler");
  scfg.u_high = num(sh, "u_high", scfg.u_high, "scheduler");
  scfg.q_high = num(sh, "q_high", scfg.q_high, "scheduler");
  scfg.u_low = num(sh, "u_low", scfg.u_low, "scheduler");
  scfg.history_length =
      count(sh, "history_length", scfg.history_length, "scheduler");
  scfg.recent_fraction =
      num(sh, "recent_fraction", scfg.recent_fraction, "scheduler");
  const std::string pred = str(sh, "predictor", "planner", "scheduler");
  auto pm = parse_predictor(pred);
  if (!pm) {
    throw ConfigError(fmt::format(
        "scheduler.predictor must be planner or lookup, got '{}'", pred));
  }
  scfg.predictor = *pm;
  if (sh.contains("lookup")) {
    for (const auto& [k, v] : sh.at("lookup").items()) {
      scfg.lookup[WorkloadKey::parse(k)] =
          allocation_from(v, "scheduler.lookup." + k);
    }
  }
  scfg.lookup_fallback =
      flag(sh, "lookup_fallback", scfg.lookup_fallback, "scheduler");
  if (sh.contains("move_budget") && !sh.at("move_budget").is_null()) {
    scfg.move_budget =
        static_cast<uint32_t>(count(sh, "move_budget", 0, "scheduler"));
  }
  scfg.scale_in_patience = static_cast<uint32_t>(
      count(sh, "scale_in_patience", scfg.scale_in_patience, "scheduler"));
  scfg.use_standby = flag(sh, "use_standby", scfg.use_standby, "scheduler");

  // run
  const json& rn = section(doc, "run");
  double phase_total = 0.0;
  for (const auto& p : sc.phases) phase_total += p.duration;
  if (sc.phases.empty() && !sc.trace_events.empty()) {
    phase_total = sc.trace_events.back().arrival_time + 1e-9;
  }
  sc.duration = num(rn, "duration", phase_total, "run");
  if (rn.contains("warmup") && !rn.at("warmup").is_null()) {
    sc.warmup = num(rn, "warmup", 0.0, "run");
  }
  sc.seed = count(rn, "seed", sc.seed, "run");
  sc.drain_limit = num(rn, "drain_limit", sc.drain_limit, "run");

  sc.validate();
  return sc;
}

Scenario load_scenario(const std::string& path,
                       const std::vector<std::string>& overrides) {
  const std::string text = read_file(path);
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
  const std::string base =
      std::filesystem::path(path).parent_path().string();
  return scenario_from_json(doc, overrides, base);
}

void Scenario::validate() const {
  cluster.validate();
  if (!(duration >= 0.0)) throw ValidationError("run.duration must be >= 0");
  if (!(drain_limit >= 0.0)) {
    throw ValidationError("run.drain_limit must be >= 0");
  }
  if (warmup && !(*warmup >= 0.0)) {
    throw ValidationError("run.warmup must be >= 0");
  }
  if (standby_nodes >= cluster.node_gpus.size()) {
    throw ValidationError("at least one node must start enabled");
  }
  if (phases.empty() && trace_events.empty() && duration > 0.0) {
    throw ValidationError("trace needs phases or a file");
  }
  for (const auto& p : phases) {
    p.params.validate();
    if (!(p.duration > 0.0)) {
      throw ValidationError("trace phase duration must be > 0");
    }
    if (p.rate && !(*p.rate > 0.0)) {
      throw ValidationError("trace phase rate must be > 0");
    }
    if (p.saturation && !(*p.saturation > 0.0)) {
      throw ValidationError("trace phase saturation must be > 0");
    }
  }
  pipeline.validate();
  scheduler.validate();
  profile.validate();
  if (pipeline.deployment == DeploymentMode::kMonolithic) {
    if (monolithic_instances < 1 || monolithic_instances > initial_gpus()) {
      throw ValidationError(fmt::format(
          "deployment.instances must be in [1, {}]", initial_gpus()));
    }
    if (scheduler_mode == SchedulerMode::kHybrid) {
      throw ValidationError("monolithic deployments run with a static scheduler");
    }
  } else if (allocation) {
    allocation->validate(initial_gpus());
  } else if (initial_gpus() < 3) {
    throw InfeasibleError("fewer than 3 GPUs cannot host three stages");
  }
  // Every request the trace can produce must have stage times.
  for (const auto& p : phases) (void)stage_times(profile, p.params);
  for (const auto& e : trace_events) (void)stage_times(profile, e.params);
}

std::vector<bool> Scenario::node_enabled() const {
  std::vector<bool> out(cluster.node_gpus.size(), true);
  for (uint32_t i = 0; i < standby_nodes; ++i) out[out.size() - 1 - i] = false;
  return out;
}

uint32_t Scenario::initial_gpus() const {
  uint32_t g = 0;
  auto enabled = node_enabled();
  for (size_t i = 0; i < enabled.size(); ++i) {
    if (enabled[i]) g += cluster.node_gpus[i];
  }
  return g;
}

namespace {

const WorkloadParams* first_params(const Scenario& sc) {
  if (!sc.trace_events.empty()) return &sc.trace_events.front().params;
  if (!sc.phases.empty()) return &sc.phases.front().params;
  return nullptr;
}

}  // namespace

Allocation Scenario::initial_allocation() const {
  if (allocation) return *allocation;
  const WorkloadParams* p = first_params(*this);
  if (!p) return Allocation(1, 1, 1);
  return plan_allocation(initial_gpus(), stage_times(profile, *p));
}

double Scenario::effective_warmup() const {
  if (warmup) return *warmup;
  double longest = 0.0;
  auto consider = [&](const WorkloadParams& p) {
    StageTimes t = stage_times(profile, p);
    for (Stage s : kAllStages) longest = std::max(longest, t[s]);
  };
  for (const auto& p : phases) consider(p.params);
  if (phases.empty()) {
    for (const auto& e : trace_events) consider(e.params);
  }
  return 3.0 * longest;
}

double Scenario::predicted_capacity(const WorkloadParams& params) const {
  StageTimes t = stage_times(profile, params);
  if (pipeline.deployment == DeploymentMode::kMonolithic) {
    const double service = pipeline.load_cost + t[Stage::kEncoder] +
                           t[Stage::kTransformer] + t[Stage::kDecoder];
    return static_cast<double>(monolithic_instances) / service;
  }
  return system_qps(initial_allocation(), t).qps;
}

TraceSpec Scenario::trace_spec() const {
  TraceSpec spec;
  spec.rng_seed = derive_seed(seed, "trace");
  for (const auto& p : phases) {
    TracePhase tp;
    tp.duration = p.duration;
    tp.process = p.process;
    tp.params = p.params;
    tp.rate = p.rate ? *p.rate : *p.saturation * predicted_capacity(p.params);
    spec.phases.push_back(tp);
  }
  return spec;
}

std::vector<TraceEvent> Scenario::trace() const {
  std::vector<TraceEvent> events =
      trace_events.empty() ? generate_trace(trace_spec()) : trace_events;
  std::erase_if(events,
                [&](const TraceEvent& e) { return e.arrival_time >= duration; });
  return events;
}

// ---------------------------------------------------------------------------
// Run

Quantiles latency_quantiles(std::vector<double> values) {
  Quantiles q;
  if (values.empty()) return q;
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  auto rank = [&](double p) {
    auto r = static_cast<size_t>(std::ceil(p * static_cast<double>(n)));
    return values[std::clamp<size_t>(r, 1, n) - 1];
  };
  q.p50 = rank(0.50);
  q.p90 = rank(0.90);
  q.p99 = rank(0.99);
  double sum = 0.0;
  for (double v : values) sum += v;
  q.mean = sum / static_cast<double>(n);
  return q;
}

namespace {

RequestId request_id_for(uint64_t ids_seed, uint64_t k) {
  return RequestId{mix64(ids_seed + k), k};
}

Stage busiest(const std::vector<UtilizationSample>& samples, double t0,
              double t1) {
  PerStage<double> sum{};
  for (const auto& s : samples) {
    if (s.time > t0 && s.time <= t1) {
      for (Stage st : kAllStages) sum[index_of(st)] += s.metrics[st].utilization;
    }
  }
  Stage best = Stage::kEncoder;
  for (Stage st : kAllStages) {
    if (sum[index_of(st)] > sum[index_of(best)]) best = st;
  }
  return best;
}

}  // namespace

RunReport run(const Scenario& sc) {
  sc.validate();
  RunReport report;
  report.scenario = sc.name;
  report.seed = sc.seed;
  report.duration = sc.duration;
  report.warmup = sc.effective_warmup();
  report.document = sc.document;
  report.overrides = sc.overrides;

  EventEngine engine;
  PipelineConfig pc = sc.pipeline;
  pc.link.seed = derive_seed(sc.seed, "jitter");
  Pipeline pipe(engine, pc, sc.profile, sc.cluster, sc.node_enabled());

  const bool mono = pc.deployment == DeploymentMode::kMonolithic;
  if (mono) {
    for (uint32_t i = 0; i < sc.monolithic_instances; ++i) {
      pipe.spawn_monolithic({}, true);
    }
  } else {
    const Allocation init = sc.initial_allocation();
    for (Stage s : kAllStages) {
      for (uint32_t i = 0; i < init[s]; ++i) pipe.spawn_instance(s, {}, true);
    }
  }

  const std::vector<TraceEvent> events = sc.trace();
  std::optional<HybridScheduler> sched;
  if (!mono && sc.scheduler_mode == SchedulerMode::kHybrid) {
    sched.emplace(sc.scheduler, sc.profile);
    if (const WorkloadParams* p = first_params(sc)) {
      sched->set_planned_key(p->key());
    }
  }

  const uint64_t ids_seed = derive_seed(sc.seed, "ids");
  size_t next = 0;
  std::function<void()> arrive = [&] {
    const TraceEvent& e = events[next];
    Request r;
    r.request_id = request_id_for(ids_seed, next);
    r.arrival_time = e.arrival_time;
    r.params = e.params;
    pipe.admit(r);
    ++next;
    if (next < events.size()) engine.schedule_at(events[next].arrival_time, arrive);
  };
  if (!events.empty()) engine.schedule_at(events.front().arrival_time, arrive);

  const double horizon = sc.duration + sc.drain_limit;
  const double interval = sc.scheduler.interval;
  PerStage<StageCounters> before{};
  Allocation last_alloc = pipe.live_allocation();
  report.allocations.push_back({0.0, last_alloc, "initial"});
  std::function<void()> monitor = [&] {
    const double now = engine.now();
    PerStage<StageCounters> after;
    PerStage<size_t> queues{};
    for (Stage s : kAllStages) {
      after[index_of(s)] = pipe.counters(s);
      queues[index_of(s)] = pipe.queue_length(s);
    }
    report.utilization.push_back(
        {now, collect(before, after, queues, now), pipe.in_flight()});
    before = after;
    std::string reason = "drain";
    if (sched) {
      auto issued = sched->tick(pipe, now);
      if (!issued.empty()) reason = issued.back().reason;
    }
    const Allocation alloc = pipe.live_allocation();
    if (alloc != last_alloc) {
      report.allocations.push_back({now, alloc, reason});
      last_alloc = alloc;
    }
    if (now + interval <= horizon && (now < sc.duration || !pipe.idle())) {
      engine.schedule_after(interval, monitor);
    }
  };
  if (sc.duration > 0.0) engine.schedule_at(interval, monitor);

  engine.run_until(horizon);

  if (!pipe.idle()) {
    throw InvariantViolation(fmt::format(
        "drain: {} requests still in flight at t={} (run.drain_limit={})",
        pipe.in_flight(), horizon, sc.drain_limit));
  }
  pipe.check_invariants();
  const std::string log = format_event_log(pipe.events());
  if (pc.record_events) {
    LogValidation v = validate_event_log(log);
    if (!v.ok) {
      throw InvariantViolation(
          fmt::format("event log line {}: {}", v.line, v.message));
    }
    report.event_log = log;
  }

  report.end_time = engine.now();
  report.admissions = pipe.admissions();
  report.completions = pipe.completed().size();
  report.failures = pipe.failed().size();
  report.rejections = pipe.rejections();
  if (report.completions + report.failures != report.admissions) {
    throw InvariantViolation("conservation: completions + failures != admissions");
  }
  report.failed = pipe.failed();
  std::vector<double> e2e;
  double last_completion = 0.0;
  for (const auto& c : pipe.completed()) {
    report.latencies.push_back({c.id, c.arrival, c.completion});
    e2e.push_back(c.completion - c.arrival);
    last_completion = std::max(last_completion, c.completion);
  }
  report.quantiles = latency_quantiles(e2e);

  const double series_end = std::max(sc.duration, last_completion);
  const auto minutes = static_cast<uint32_t>(std::ceil(series_end / 60.0));
  std::vector<uint64_t> per_minute(minutes, 0);
  for (const auto& l : report.latencies) {
    auto m = static_cast<size_t>(l.completion / 60.0);
    if (m < per_minute.size()) ++per_minute[m];
  }
  for (uint32_t m = 0; m < minutes; ++m) {
    report.throughput.push_back(
        {m, static_cast<double>(per_minute[m]),
         busiest(report.utilization, 60.0 * m, 60.0 * (m + 1))});
  }
  report.steady_qpm = throughput_qpm(report, report.warmup, sc.duration);
  if (sched) report.decisions = sched->decisions();
  report.transport = pipe.transport_stats();
  report.overlap_witnessed = pipe.overlap_witnessed();
  report.final_allocation = pipe.live_allocation();
  report.final_gpus = pipe.enabled_gpus();
  return report;
}

double throughput_qpm(const RunReport& report, double t0, double t1) {
  if (!(t1 > t0)) return 0.0;
  uint64_t n = 0;
  for (const auto& l : report.latencies) {
    if (l.completion >= t0 && l.completion < t1) ++n;
  }
  return static_cast<double>(n) * 60.0 / (t1 - t0);
}

Allocation allocation_at(const RunReport& report, double t) {
  Allocation a = report.allocations.empty() ? Allocation()
                                            : report.allocations.front().alloc;
  for (const auto& c : report.allocations) {
    if (c.time <= t) a = c.alloc;
  }
  return a;
}

double mean_in_flight(const RunReport& report, double t0, double t1) {
  double sum = 0.0;
  size_t n = 0;
  for (const auto& s : report.utilization) {
    if (s.time >= t0 && s.time < t1) {
      sum += static_cast<double>(s.in_flight);
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

std::vector<RunReport> run_batch(const std::vector<Scenario>& scenarios) {
  std::vector<RunReport> out(scenarios.size());
  std::vector<std::string> errors(scenarios.size());
  const auto n = static_cast<int64_t>(scenarios.size());
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < n; ++i) {
    try {
      out[i] = run(scenarios[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) {
      throw InvariantViolation(
          fmt::format("{}: {}", scenarios[i].name, errors[i]));
    }
  }
  return out;
}

std::vector<RunReport> run_batch_serial(const std::vector<Scenario>& scenarios) {
  std::vector<RunReport> out;
  out.reserve(scenarios.size());
  for (const auto& s : scenarios) out.push_back(run(s));
  return out;
}

// ---------------------------------------------------------------------------
// Compare / emit

std::vector<ComparisonRow> compare(const std::vector<RunReport>& reports) {
  std::vector<ComparisonRow> rows;
  if (reports.empty()) return rows;
  const double base = reports.front().steady_qpm;
  for (const auto& r : reports) {
    ComparisonRow row;
    row.name = r.scenario;
    row.qpm = r.steady_qpm;
    if (base == 0.0) {
      row.undefined = true;
    } else {
      row.degradation = (base - r.steady_qpm) / base;
    }
    rows.push_back(row);
  }
  return rows;
}

namespace {

std::string g6(double v) { return fmt::format("{:.6g}", v); }

}  // namespace

std::string format_comparison(const std::vector<ComparisonRow>& rows) {
  std::string out = "name,qpm,degradation_pct\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{}\n", r.name, g6(r.qpm),
                       r.undefined ? "undefined" : g6(100.0 * r.degradation));
  }
  return out;
}

std::string format_summary(const RunReport& r) {
  std::string out;
  out += fmt::format("scenario        {}\n", r.scenario);
  out += fmt::format("seed            {}\n", r.seed);
  for (const auto& o : r.overrides) out += fmt::format("override        {}\n", o);
  out += fmt::format("duration_s      {}\n", g6(r.duration));
  out += fmt::format("warmup_s        {}\n", g6(r.warmup));
  out += fmt::format("end_time_s      {}\n", g6(r.end_time));
  out += fmt::format("admissions      {}\n", r.admissions);
  out += fmt::format("completions     {}\n", r.completions);
  out += fmt::format("failures        {}\n", r.failures);
  out += fmt::format("rejections      {}\n", r.rejections);
  out += fmt::format("steady_qpm      {}\n", g6(r.steady_qpm));
  out += fmt::format("latency_p50_s   {}\n", g6(r.quantiles.p50));
  out += fmt::format("latency_p90_s   {}\n", g6(r.quantiles.p90));
  out += fmt::format("latency_p99_s   {}\n", g6(r.quantiles.p99));
  out += fmt::format("latency_mean_s  {}\n", g6(r.quantiles.mean));
  out += fmt::format("final_alloc     {}\n", r.final_allocation.to_string());
  out += fmt::format("final_gpus      {}\n", r.final_gpus);
  out += fmt::format("decisions       {}\n", r.decisions.size());
  out += fmt::format("transfers       {} ({} attempts, {} timeouts, {} failed)\n",
                     r.transport.transfers, r.transport.attempts,
                     r.transport.timeouts, r.transport.failures);
  out += fmt::format("overlap         {}\n", r.overlap_witnessed ? "yes" : "no");
  return out;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError(fmt::format("cannot write '{}': {}", path.string(),
                              std::strerror(errno)));
  }
  out << text;
  out.close();
  if (!out) {
    throw IoError(fmt::format("write to '{}' failed", path.string()));
  }
}

}  // namespace

void emit(const RunReport& r, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw IoError(fmt::format("cannot create '{}': {}", dir, ec.message()));
  }
  const std::filesystem::path base(dir);

  std::string tp = "minute,qpm,bottleneck_stage\n";
  for (const auto& p : r.throughput) {
    tp += fmt::format("{},{},{}\n", p.minute, g6(p.qpm), stage_name(p.bottleneck));
  }
  write_file(base / "throughput.csv", tp);

  std::string lat = "request_id,arrival_s,completion_s,e2e_s\n";
  for (const auto& l : r.latencies) {
    lat += fmt::format("{},{},{},{}\n", l.id.to_string(), g6(l.arrival),
                       g6(l.completion), g6(l.e2e()));
  }
  write_file(base / "latency.csv", lat);

  std::string al = "time,g_E,g_T,g_D,reason\n";
  for (const auto& a : r.allocations) {
    al += fmt::format("{},{},{},{},{}\n", g6(a.time), a.alloc.count[0],
                      a.alloc.count[1], a.alloc.count[2], a.reason);
  }
  write_file(base / "allocation.csv", al);

  write_file(base / "decisions.csv", format_decision_log(r.decisions));

  std::string ut = "time,u_E,u_T,u_D,q_E,q_T,q_D,d_E,d_T,d_D,in_flight\n";
  for (const auto& s : r.utilization) {
    const auto& m = s.metrics;
    ut += fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", g6(s.time),
                      g6(m.stage[0].utilization), g6(m.stage[1].utilization),
                      g6(m.stage[2].utilization), g6(m.stage[0].queue_length),
                      g6(m.stage[1].queue_length), g6(m.stage[2].queue_length),
                      g6(m.stage[0].queue_delay), g6(m.stage[1].queue_delay),
                      g6(m.stage[2].queue_delay), s.in_flight);
  }
  write_file(base / "utilization.csv", ut);

  write_file(base / "events.csv", r.event_log);
  write_file(base / "summary.txt", format_summary(r));

  json js;
  js["scenario"] = r.scenario;
  js["seed"] = r.seed;
  js["overrides"] = r.overrides;
  js["admissions"] = r.admissions;
  js["completions"] = r.completions;
  js["failures"] = r.failures;
  js["rejections"] = r.rejections;
  js["steady_qpm"] = g6(r.steady_qpm);
  js["latency"] = {{"p50", g6(r.quantiles.p50)},
                   {"p90", g6(r.quantiles.p90)},
                   {"p99", g6(r.quantiles.p99)},
                   {"mean", g6(r.quantiles.mean)}};
  js["final_allocation"] = r.final_allocation.to_string();
  js["final_gpus"] = r.final_gpus;
  js["scenario_document"] = r.document;
  write_file(base / "summary.json", js.dump(2) + "\n");
}

}  // namespace disagsim

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

#include "disagsim/workload.h"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <random>

#include <fmt/format.h>

namespace disagsim {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' ||
                        s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  size_t pos = 0;
  while (true) {
    size_t next = s.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(trim(s.substr(pos)));
      break;
    }
    out.push_back(trim(s.substr(pos, next - pos)));
    pos = next + 1;
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  auto* first = text.data();
  auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

}  // namespace

std::string WorkloadKey::to_string() const {
  return fmt::format("{}/{}x{}/{}", steps, width, height, frames);
}

WorkloadKey WorkloadKey::parse(std::string_view text) {
  WorkloadKey key;
  auto parts = split(text, '/');
  if (parts.size() != 3) {
    throw ValidationError(
        fmt::format("workload key '{}' is not steps/WxH/frames", text));
  }
  auto dims = split(parts[1], 'x');
  if (dims.size() != 2 || !parse_number(parts[0], key.steps) ||
      !parse_number(dims[0], key.width) ||
      !parse_number(dims[1], key.height) ||
      !parse_number(parts[2], key.frames)) {
    throw ValidationError(
        fmt::format("workload key '{}' is not steps/WxH/frames", text));
  }
  return key;
}

void WorkloadParams::validate() const {
  if (steps < 1) throw ValidationError("steps must be >= 1");
  if (width < 1) throw ValidationError("width must be >= 1");
  if (height < 1) throw ValidationError("height must be >= 1");
  if (frames < 1) throw ValidationError("frames must be >= 1");
}

double TraceSpec::total_duration() const {
  double total = 0.0;
  for (const auto& phase : phases) total += phase.duration;
  return total;
}

void TraceSpec::validate() const {
  for (size_t i = 0; i < phases.size(); ++i) {
    const auto& phase = phases[i];
    if (!(phase.duration > 0.0)) {
      throw ValidationError(
          fmt::format("phases[{}].duration must be > 0", i));
    }
    if (!(phase.rate > 0.0)) {
      throw ValidationError(fmt::format("phases[{}].rate must be > 0", i));
    }
    try {
      phase.params.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("phases[{}].{}", i, e.what()));
    }
  }
}

std::vector<TraceEvent> generate_trace(const TraceSpec& spec) {
  spec.validate();
  std::vector<TraceEvent> events;
  double start = 0.0;
  for (size_t i = 0; i < spec.phases.size(); ++i) {
    const auto& phase = spec.phases[i];
    const double end = start + phase.duration;
    if (phase.process == ArrivalProcess::kDeterministic) {
      // The epsilon absorbs representation error in products like 900 * 0.1.
      const auto count = static_cast<uint64_t>(
          std::floor(phase.duration * phase.rate + 1e-9));
      for (uint64_t k = 0; k < count; ++k) {
        double t = start + static_cast<double>(k) / phase.rate;
        if (t >= end) break;
        events.push_back({t, phase.params});
      }
    } else {
      std::mt19937_64 rng(derive_seed(spec.rng_seed, fmt::format("phase{}", i)));
      double t = start;
      while (true) {
        double u = unit_interval(rng());
        t += -std::log1p(-u) / phase.rate;
        if (t >= end) break;
        events.push_back({t, phase.params});
      }
    }
    start = end;
  }
  return events;
}

ParsedTrace parse_trace(std::string_view text) {
  ParsedTrace out;
  size_t line_no = 0;
  size_t pos = 0;
  bool seen_data = false;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(
        pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;

    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    auto fields = split(line, ',');
    if (!seen_data) {
      seen_data = true;
      // Header: first non-comment line starting with a letter.
      if (!fields[0].empty() &&
          std::isalpha(static_cast<unsigned char>(fields[0][0]))) {
        continue;
      }
    }
    if (fields.size() != 6) {
      throw ValidationError(fmt::format(
          "trace line {}: expected 6 fields, got {}", line_no, fields.size()));
    }
    TraceEvent ev;
    if (!parse_number(fields[0], ev.arrival_time) ||
        !parse_number(fields[1], ev.params.steps) ||
        !parse_number(fields[2], ev.params.width) ||
        !parse_number(fields[3], ev.params.height) ||
        !parse_number(fields[4], ev.params.frames)) {
      throw ValidationError(
          fmt::format("trace line {}: malformed number", line_no));
    }
    ev.params.task_tag = std::string(fields[5]);
    if (!(ev.arrival_time >= 0.0)) {
      throw ValidationError(
          fmt::format("trace line {}: arrival_time must be >= 0", line_no));
    }
    try {
      ev.params.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("trace line {}: {}", line_no, e.what()));
    }
    out.events.push_back(std::move(ev));
  }
  auto by_time = [](const TraceEvent& a, const TraceEvent& b) {
    return a.arrival_time < b.arrival_time;
  };
  if (!std::is_sorted(out.events.begin(), out.events.end(), by_time)) {
    out.was_unsorted = true;
    std::stable_sort(out.events.begin(), out.events.end(), by_time);
  }
  return out;
}

std::string serialize_trace(const std::vector<TraceEvent>& events) {
  std::string out = "arrival_time_s,steps,width,height,frames,task_tag\n";
  for (const auto& ev : events) {
    // {} gives the shortest representation that round-trips exactly.
    out += fmt::format("{},{},{},{},{},{}\n", ev.arrival_time,
                       ev.params.steps, ev.params.width, ev.params.height,
                       ev.params.frames, ev.params.task_tag);
  }
  return out;
}

}  // namespace disagsim

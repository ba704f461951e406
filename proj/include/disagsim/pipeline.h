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

// Three-stage serving pipeline driven by the event engine.
//
// Per request and stage the protocol runs:
//
//   Encoder      fetch -> Initialized (publish phase1) -> Executing ->
//                [AwaitingPeerAddress] -> Sending -> Complete
//   Transformer  fetch -> Initialized (address to encoder, publish phase2)
//                -> AwaitingUpstreamData -> Executing ->
//                [AwaitingPeerAddress] -> Sending -> Complete
//   Decoder      fetch -> Initialized (address to transformer) ->
//                AwaitingUpstreamData -> Executing -> Complete
//
// Any non-terminal state may go to Failed. A monolithic instance runs
// fetch -> Initialized (model load) -> Executing -> Complete.

#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "disagsim/common.h"
#include "disagsim/engine.h"
#include "disagsim/perfmodel.h"
#include "disagsim/ringqueue.h"
#include "disagsim/transport.h"
#include "disagsim/workload.h"

namespace disagsim {

enum class HandoffMode { kAsync, kSync };

std::string_view handoff_name(HandoffMode m);
std::optional<HandoffMode> parse_handoff(std::string_view text);

enum class InstanceState { kColdStarting, kActive, kDraining, kStopped };

std::string_view instance_state_name(InstanceState s);

enum class ProtoState : uint8_t {
  kNone,
  kAdmitted,
  kRejected,
  kInitialized,
  kAwaitingPeerAddress,
  kAwaitingUpstreamData,
  kExecuting,
  kSending,
  kComplete,
  kFailed,
};

// "-" for kNone.
std::string_view proto_state_name(ProtoState s);
std::optional<ProtoState> parse_proto_state(std::string_view text);

struct PipelineConfig {
  DeploymentMode deployment = DeploymentMode::kDisaggregated;
  HandoffMode handoff = HandoffMode::kAsync;
  // Per-request initialization in disaggregated mode (weights stay
  // resident) and model load/unload per request in monolithic mode.
  double init_cost = 0.0;
  double load_cost = 30.3;
  double cold_start = 10.0;
  // Async mode only: a busy instance fetches its next request once its
  // current computation is within this many seconds of finishing, so the
  // inbound transfer overlaps compute.
  double prefetch_lead = 5.0;
  size_t ring_capacity = 64;
  uint32_t rings_per_queue = 1;
  double reroute_threshold = 0.8;
  double admission_backoff = 0.1;
  // One-way delay of address messages.
  double control_latency = 0.0;
  // Waiting-queue entries that see no upstream data for this long fail.
  double upstream_timeout = 3600.0;
  uint32_t max_readmissions = 1;
  // Payload bytes of the encoder->transformer and transformer->decoder
  // handoffs.
  std::array<uint64_t, 2> transfer_bytes{8'000'000, 8'000'000};
  LinkModel link;
  RetryPolicy retry;
  // Batch address messages per sending instance.
  bool batch_control = false;
  BatchPolicy batch;
  bool record_events = true;

  void validate() const;
};

struct EventRecord {
  double time = 0.0;
  std::string instance;  // "ctl", "E3", "T4", "D7", "M0"
  RequestId request;
  ProtoState from = ProtoState::kNone;
  ProtoState to = ProtoState::kNone;
  std::string detail;
};

// One line per record, with a header:
// time,instance,request_id,from_state,to_state,detail
std::string format_event_log(const std::vector<EventRecord>& events);

struct LogValidation {
  bool ok = true;
  size_t line = 0;  // 1-based line of the first problem, 0 if none
  std::string message;
  uint64_t transitions = 0;
  uint64_t admissions = 0;
  uint64_t completions = 0;
  uint64_t failures = 0;
};

// Replays an event log against the protocol: legal transitions per stage,
// from_state matching the replayed state, ownership, non-decreasing time,
// address received before every data send, and every admitted request in
// a terminal state at the end.
LogValidation validate_event_log(std::string_view text);

struct CompletedRequest {
  RequestId id;
  WorkloadKey key;
  double arrival = 0.0;
  double completion = 0.0;
  uint32_t attempts = 1;
};

struct FailedRequest {
  RequestId id;
  double arrival = 0.0;
  double time = 0.0;
  std::string reason;
};

// Cumulative per-stage accounting. busy includes blocked time.
struct StageCounters {
  double busy_seconds = 0.0;
  double blocked_seconds = 0.0;
  double instance_seconds = 0.0;  // time spent Active or Draining
  uint64_t exec_starts = 0;
  double queue_delay_sum = 0.0;
};

struct InstanceView {
  uint32_t id = 0;
  std::string name;
  Stage stage = Stage::kEncoder;
  bool monolithic = false;
  uint32_t node = 0;
  InstanceState state = InstanceState::kActive;
  double busy_seconds = 0.0;
  double blocked_seconds = 0.0;
};

inline constexpr uint32_t kNoInstance = 0xffffffffu;

class Pipeline {
 public:
  // node_enabled[i] says whether node i's GPUs are in the budget from the
  // start; disabled nodes can be enabled later.
  Pipeline(EventEngine& engine, PipelineConfig config, StageProfile profile,
           ClusterSpec cluster, std::vector<bool> node_enabled = {});
  ~Pipeline();

  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  // Returns false (and logs a rejection) when the id was seen before.
  bool admit(const Request& request);

  // Places a new instance of the stage on the given node, or on the first
  // enabled node with a free GPU. ColdStarting for cold_start seconds
  // unless immediate. Throws InfeasibleError when no GPU is free.
  uint32_t spawn_instance(Stage stage, std::optional<uint32_t> node = {},
                          bool immediate = false);
  uint32_t spawn_monolithic(std::optional<uint32_t> node = {},
                            bool immediate = true);
  // Spawns now when a GPU is free; otherwise queues the spawn until a
  // draining instance releases one. True when spawned now.
  bool spawn_when_free(Stage stage);
  uint32_t deferred_spawns() const;
  // Active -> Draining; Stopped once every owned request has left. A
  // ColdStarting instance stops at once.
  void retire_instance(uint32_t id);
  // Instance of the stage with the least committed work; newest on ties.
  std::optional<uint32_t> retire_candidate(Stage stage) const;
  void enable_node(uint32_t node);

  // ColdStarting + Active instances per stage.
  Allocation live_allocation() const;
  uint32_t live_count(Stage stage) const;
  uint32_t monolithic_count() const;
  uint32_t enabled_gpus() const;
  // Enabled GPUs neither occupied nor promised to a deferred spawn.
  uint32_t free_gpus() const;
  std::optional<uint32_t> standby_node() const;

  StageCounters counters(Stage stage) const;
  // Requests of the stage not yet executing: inbound ring, local queues
  // and, for the encoder, the admission backlog.
  size_t queue_length(Stage stage) const;
  // Workload keys admitted since the previous call.
  std::vector<WorkloadKey> take_recent_keys();
  size_t in_flight() const;
  bool idle() const;

  uint64_t admissions() const;
  uint64_t rejections() const;
  uint64_t duplicates_dropped() const;
  const std::vector<CompletedRequest>& completed() const;
  const std::vector<FailedRequest>& failed() const;
  const std::vector<EventRecord>& events() const;
  const PayloadRegistry& registry() const;
  const TransportStats& transport_stats() const;
  std::vector<InstanceView> instances() const;
  // Two different stages were observed computing different requests at
  // the same instant.
  bool overlap_witnessed() const;
  const RingBuffer& ring(PhaseTag queue, uint32_t index = 0) const;

  // Leak, conservation and ring checks. Throws InvariantViolation.
  void check_invariants() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace disagsim

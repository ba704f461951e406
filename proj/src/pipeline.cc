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

#include "disagsim/pipeline.h"

#include <algorithm>
#include <unordered_set>

#include <fmt/format.h>

namespace disagsim {

namespace {

constexpr std::array<std::string_view, 10> kStateNames = {
    "-",         "Admitted",
    "Rejected",  "Initialized",
    "AwaitingPeerAddress", "AwaitingUpstreamData",
    "Executing", "Sending",
    "Complete",  "Failed"};

constexpr uint32_t kControllerProducer = kNoInstance;
// Round-trip estimates for rings on the same node and on another node.
constexpr double kLocalRingLatency = 1e-6;
constexpr double kRemoteRingLatency = 5e-6;

PhaseTag inbound_queue(Stage s) {
  switch (s) {
    case Stage::kEncoder:
      return PhaseTag::kRequest;
    case Stage::kTransformer:
      return PhaseTag::kPhase1;
    case Stage::kDecoder:
      return PhaseTag::kPhase2;
  }
  return PhaseTag::kRequest;
}

bool terminal(ProtoState s) {
  return s == ProtoState::kComplete || s == ProtoState::kFailed ||
         s == ProtoState::kRejected;
}

bool erase_from(std::deque<RequestId>& q, const RequestId& id) {
  auto it = std::find(q.begin(), q.end(), id);
  if (it == q.end()) return false;
  q.erase(it);
  return true;
}

struct AddressMsg {
  uint32_t to = 0;
  uint32_t from = 0;
  RequestId id;
  uint32_t attempt = 0;
};

}  // namespace

std::string_view handoff_name(HandoffMode m) {
  return m == HandoffMode::kAsync ? "async" : "sync";
}

std::optional<HandoffMode> parse_handoff(std::string_view text) {
  if (text == "async") return HandoffMode::kAsync;
  if (text == "sync") return HandoffMode::kSync;
  return std::nullopt;
}

std::string_view instance_state_name(InstanceState s) {
  switch (s) {
    case InstanceState::kColdStarting:
      return "ColdStarting";
    case InstanceState::kActive:
      return "Active";
    case InstanceState::kDraining:
      return "Draining";
    case InstanceState::kStopped:
      return "Stopped";
  }
  return "?";
}

std::string_view proto_state_name(ProtoState s) {
  return kStateNames[static_cast<size_t>(s)];
}

std::optional<ProtoState> parse_proto_state(std::string_view text) {
  for (size_t i = 0; i < kStateNames.size(); ++i) {
    if (kStateNames[i] == text) return static_cast<ProtoState>(i);
  }
  return std::nullopt;
}

void PipelineConfig::validate() const {
  if (init_cost < 0.0) throw ValidationError("init_cost must be >= 0");
  if (load_cost < 0.0) throw ValidationError("load_cost must be >= 0");
  if (cold_start < 0.0) throw ValidationError("cold_start must be >= 0");
  if (prefetch_lead < 0.0) throw ValidationError("prefetch_lead must be >= 0");
  if (rings_per_queue < 1) {
    throw ValidationError("rings_per_queue must be >= 1");
  }
  if (!(admission_backoff > 0.0)) {
    throw ValidationError("admission_backoff must be > 0");
  }
  if (control_latency < 0.0) {
    throw ValidationError("control_latency must be >= 0");
  }
  if (!(upstream_timeout > 0.0)) {
    throw ValidationError("upstream_timeout must be > 0");
  }
  if (!(reroute_threshold > 0.0 && reroute_threshold <= 1.0)) {
    throw ValidationError("reroute_threshold must be in (0, 1]");
  }
  link.validate();
  retry.validate();
  batch.validate();
  // Ring capacity is checked by RingBuffer itself.
}

std::string format_event_log(const std::vector<EventRecord>& events) {
  std::string out = "time,instance,request_id,from_state,to_state,detail\n";
  for (const auto& e : events) {
    out += fmt::format("{},{},{},{},{},{}\n", e.time, e.instance,
                       e.request.to_string(), proto_state_name(e.from),
                       proto_state_name(e.to), e.detail);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct StageRecord {
  ProtoState state = ProtoState::kNone;
  uint32_t owner = kNoInstance;
  uint32_t upstream = kNoInstance;
  uint32_t downstream = kNoInstance;
  double arrival = 0.0;  // metadata became visible to the stage
  bool data_arrived = false;
  std::optional<PayloadHandle> inbound;
  std::optional<PayloadHandle> outbound;
  EventId timeout = 0;
  bool timeout_armed = false;
};

struct Flight {
  Request req;
  uint32_t attempt = 1;
  uint32_t readmissions = 0;
  ProtoState ctl = ProtoState::kNone;
  PerStage<StageRecord> st{};
  StageRecord mono;
};

struct Instance {
  uint32_t id = 0;
  Stage stage = Stage::kEncoder;
  bool monolithic = false;
  uint32_t node = 0;
  InstanceState state = InstanceState::kColdStarting;
  std::string name;
  QueueTable table;

  std::deque<RequestId> request_q;
  std::deque<RequestId> waiting_q;
  std::deque<RequestId> execute_q;
  std::deque<RequestId> complete_q;

  bool busy = false;       // worker occupied (compute, init, or blocked)
  bool computing = false;  // inside a compute interval
  bool blocked = false;    // sync sender waiting for its handoff
  std::optional<RequestId> current;
  std::optional<RequestId> blocked_on;
  double compute_end = 0.0;
  double busy_since = 0.0;
  double busy_total = 0.0;
  double blocked_since = 0.0;
  double blocked_total = 0.0;
  double active_since = 0.0;
  double active_total = 0.0;
  uint64_t sequence = 0;
  bool publish_blocked = false;
  DedupSet dedup;
  std::unique_ptr<Batcher<AddressMsg>> batcher;

  size_t owned_not_started() const {
    return request_q.size() + waiting_q.size() + execute_q.size();
  }
  bool holds_nothing() const {
    return owned_not_started() == 0 && complete_q.empty() && !busy;
  }
};

}  // namespace

struct Pipeline::Impl {
  EventEngine& engine;
  PipelineConfig cfg;
  StageProfile profile;
  ClusterSpec cluster;
  std::vector<bool> node_enabled;
  std::vector<uint32_t> node_used;
  Transport transport;
  PayloadRegistry registry;
  std::array<std::vector<std::unique_ptr<RingBuffer>>, 3> rings;
  std::vector<std::unique_ptr<Instance>> instances;
  std::unordered_map<RequestId, Flight, RequestIdHash> flights;
  std::deque<RequestId> backlog;
  bool backlog_timer = false;
  uint64_t controller_seq = 0;
  QueueTable controller_table;
  std::deque<Stage> deferred;
  std::array<bool, 3> publish_retry_pending{};
  std::map<WorkloadKey, StageTimes> time_cache;

  PerStage<uint64_t> exec_starts{};
  PerStage<double> queue_delay_sum{};
  PerStage<uint32_t> computing_now{};
  uint64_t mono_exec_starts = 0;
  double mono_queue_delay_sum = 0.0;

  uint64_t admissions = 0;
  uint64_t rejections = 0;
  uint64_t duplicates = 0;
  uint64_t stale_slots = 0;
  size_t in_flight = 0;
  bool overlap = false;
  std::vector<WorkloadKey> recent;
  std::vector<CompletedRequest> completed;
  std::vector<FailedRequest> failed;
  std::vector<EventRecord> events;

  Impl(EventEngine& e, PipelineConfig c, StageProfile p, ClusterSpec cl,
       std::vector<bool> enabled)
      : engine(e),
        cfg(std::move(c)),
        profile(std::move(p)),
        cluster(std::move(cl)),
        node_enabled(std::move(enabled)),
        transport(e, cfg.link, cfg.retry),
        controller_table(cfg.reroute_threshold) {
    cfg.validate();
    cluster.validate();
    profile.validate();
    if (node_enabled.empty()) {
      node_enabled.assign(cluster.node_gpus.size(), true);
    }
    if (node_enabled.size() != cluster.node_gpus.size()) {
      throw ValidationError("node_enabled must list every node");
    }
    node_used.assign(cluster.node_gpus.size(), 0);
    // Ring i of every queue lives on node i mod nodes.
    for (size_t q = 0; q < 3; ++q) {
      for (uint32_t i = 0; i < cfg.rings_per_queue; ++i) {
        rings[q].push_back(std::make_unique<RingBuffer>(cfg.ring_capacity));
      }
    }
    controller_table = make_table(0);
  }

  // -- helpers -------------------------------------------------------------

  uint32_t ring_node(uint32_t ring) const {
    return ring % static_cast<uint32_t>(cluster.node_gpus.size());
  }

  QueueTable make_table(uint32_t node) const {
    QueueTable t(cfg.reroute_threshold);
    for (size_t q = 0; q < 3; ++q) {
      for (uint32_t i = 0; i < cfg.rings_per_queue; ++i) {
        t.add(static_cast<PhaseTag>(q),
              {i, ring_node(i) == node ? kLocalRingLatency
                                       : kRemoteRingLatency});
      }
    }
    return t;
  }

  std::map<uint32_t, double> hints(PhaseTag q) const {
    std::map<uint32_t, double> h;
    const auto& list = rings[static_cast<size_t>(q)];
    for (uint32_t i = 0; i < list.size(); ++i) {
      h[i] = list[i]->occupancy_fraction();
    }
    return h;
  }

  bool ring_nonempty(PhaseTag q) const {
    for (const auto& r : rings[static_cast<size_t>(q)]) {
      if (r->occupancy() > 0) return true;
    }
    return false;
  }

  const StageTimes& times_for(const WorkloadParams& p) {
    auto key = p.key();
    auto it = time_cache.find(key);
    if (it == time_cache.end()) {
      it = time_cache.emplace(key, stage_times(profile, p)).first;
    }
    return it->second;
  }

  Instance& inst(uint32_t id) { return *instances.at(id); }

  Flight* live_flight(const RequestId& id, uint32_t attempt) {
    auto it = flights.find(id);
    if (it == flights.end()) return nullptr;
    Flight& f = it->second;
    if (f.attempt != attempt || f.ctl != ProtoState::kAdmitted) return nullptr;
    return &f;
  }

  StageRecord& record(Flight& f, const Instance& in) {
    return in.monolithic ? f.mono : f.st[index_of(in.stage)];
  }

  void log(const std::string& who, const RequestId& id, ProtoState from,
           ProtoState to, std::string detail = {}) {
    if (!cfg.record_events) return;
    events.push_back({engine.now(), who, id, from, to, std::move(detail)});
  }

  void move(Flight& f, const Instance& in, ProtoState to,
            std::string detail = {}) {
    StageRecord& r = record(f, in);
    log(in.name, f.req.request_id, r.state, to, std::move(detail));
    r.state = to;
  }

  void move_ctl(Flight& f, ProtoState to, std::string detail = {}) {
    log("ctl", f.req.request_id, f.ctl, to, std::move(detail));
    f.ctl = to;
  }

  void set_busy(Instance& in) {
    in.busy = true;
    in.busy_since = engine.now();
  }

  void clear_busy(Instance& in) {
    in.busy = false;
    in.busy_total += engine.now() - in.busy_since;
  }

  void begin_block(Instance& in, const RequestId& id) {
    in.blocked = true;
    in.blocked_on = id;
    in.blocked_since = engine.now();
  }

  void end_block(Instance& in) {
    in.blocked = false;
    in.blocked_on.reset();
    in.blocked_total += engine.now() - in.blocked_since;
    clear_busy(in);
  }

  void release(std::optional<PayloadHandle>& h) {
    if (h && registry.is_live(*h)) registry.release(*h);
    h.reset();
  }

  // -- admission -----------------------------------------------------------

  bool admit(const Request& req) {
    req.params.validate();
    if (flights.count(req.request_id)) {
      ++rejections;
      log("ctl", req.request_id, ProtoState::kNone, ProtoState::kRejected,
          "duplicate id");
      return false;
    }
    Flight& f = flights[req.request_id];
    f.req = req;
    f.req.attempt_count = 1;
    move_ctl(f, ProtoState::kAdmitted,
             fmt::format("attempt=1 key={}", req.params.key().to_string()));
    ++admissions;
    ++in_flight;
    recent.push_back(req.params.key());
    backlog.push_back(req.request_id);
    drain_backlog();
    return true;
  }

  void drain_backlog() {
    bool published = false;
    while (!backlog.empty()) {
      const RequestId id = backlog.front();
      auto it = flights.find(id);
      if (it == flights.end() || it->second.ctl != ProtoState::kAdmitted) {
        backlog.pop_front();
        continue;
      }
      Flight& f = it->second;
      MetadataSlot slot = make_slot(id, f.req.params, PhaseTag::kRequest,
                                    kControllerProducer);
      slot.enqueue_time = engine.now();
      slot.sequence = controller_seq;
      slot.attempt = f.attempt;
      uint32_t ring = route(controller_table, PhaseTag::kRequest,
                            hints(PhaseTag::kRequest));
      if (!rings[0][ring]->enqueue(slot).accepted) {
        if (!backlog_timer) {
          backlog_timer = true;
          engine.schedule_after(cfg.admission_backoff, [this] {
            backlog_timer = false;
            drain_backlog();
          });
        }
        break;
      }
      ++controller_seq;
      f.st[0].arrival = engine.now();
      backlog.pop_front();
      published = true;
    }
    if (published) notify(PhaseTag::kRequest);
  }

  // -- consumption ---------------------------------------------------------

  bool eligible(const Instance& in) const {
    if (in.state != InstanceState::kActive) return false;
    if (in.owned_not_started() != 0 || in.publish_blocked) return false;
    if (!in.busy) return true;
    if (in.monolithic || in.stage == Stage::kEncoder) return false;
    return cfg.handoff == HandoffMode::kAsync && in.computing &&
           engine.now() >= in.compute_end - cfg.prefetch_lead;
  }

  bool consumes(const Instance& in, PhaseTag q) const {
    if (in.monolithic) return q == PhaseTag::kRequest;
    return inbound_queue(in.stage) == q;
  }

  void notify(PhaseTag q) {
    // Idle consumers first, then prefetching ones; lowest id within each.
    for (int pass = 0; pass < 2; ++pass) {
      for (auto& p : instances) {
        if (!ring_nonempty(q)) return;
        Instance& in = *p;
        if (!consumes(in, q) || in.busy != (pass == 1)) continue;
        try_work(in);
      }
    }
  }

  bool pull(Instance& in) {
    PhaseTag q = in.monolithic ? PhaseTag::kRequest : inbound_queue(in.stage);
    auto order = in.table.buffers(q);
    std::stable_sort(order.begin(), order.end(),
                     [](const BufferLocation& a, const BufferLocation& b) {
                       return a.latency < b.latency;
                     });
    for (const auto& loc : order) {
      auto got = rings[static_cast<size_t>(q)][loc.ring_id]->dequeue();
      if (!got) continue;
      on_ring_space(q);
      if (fetch(in, got->slot)) return true;
      // Stale slot from an abandoned attempt; keep looking.
      return pull(in);
    }
    return false;
  }

  void on_ring_space(PhaseTag q) {
    if (q == PhaseTag::kRequest) return;  // the controller retries on a timer
    size_t qi = static_cast<size_t>(q);
    if (publish_retry_pending[qi]) return;
    publish_retry_pending[qi] = true;
    engine.schedule_after(0.0, [this, q, qi] {
      publish_retry_pending[qi] = false;
      Stage producer = q == PhaseTag::kPhase1 ? Stage::kEncoder
                                              : Stage::kTransformer;
      for (auto& p : instances) {
        Instance& in = *p;
        if (in.monolithic || in.stage != producer || !in.publish_blocked) {
          continue;
        }
        in.publish_blocked = false;
        if (!in.request_q.empty()) after_init(in, in.request_q.front());
        try_work(in);
      }
    });
  }

  bool fetch(Instance& in, const MetadataSlot& slot) {
    Flight* f = live_flight(slot.request_id, slot.attempt);
    if (!f) {
      ++stale_slots;
      return false;
    }
    StageRecord& r = record(*f, in);
    if (r.state != ProtoState::kNone) {
      ++stale_slots;
      return false;
    }
    r.owner = in.id;
    r.upstream = slot.producer;
    r.arrival = slot.enqueue_time;
    in.request_q.push_back(slot.request_id);
    const uint32_t attempt = f->attempt;
    const RequestId id = slot.request_id;
    if (in.monolithic) {
      move(*f, in, ProtoState::kInitialized, "load");
      set_busy(in);
      engine.schedule_after(cfg.load_cost, [this, iid = in.id, id, attempt] {
        mono_execute(inst(iid), id, attempt);
      });
      return true;
    }
    if (cfg.init_cost > 0.0) {
      set_busy(in);
      engine.schedule_after(cfg.init_cost, [this, iid = in.id, id, attempt] {
        Instance& me = inst(iid);
        clear_busy(me);
        if (Flight* g = live_flight(id, attempt)) {
          init_done(me, *g);
        }
        try_work(me);
      });
      return true;
    }
    init_done(in, *f);
    return true;
  }

  void init_done(Instance& in, Flight& f) {
    StageRecord& r = record(f, in);
    std::string detail;
    if (in.stage != Stage::kEncoder) {
      detail = fmt::format("addr_to={}", inst(r.upstream).name);
    }
    move(f, in, ProtoState::kInitialized, std::move(detail));
    if (in.stage != Stage::kEncoder) {
      send_address(in, r.upstream, f.req.request_id, f.attempt);
    }
    after_init(in, f.req.request_id);
  }

  // Publishes downstream metadata if this stage has any, then queues the
  // request locally.
  void after_init(Instance& in, const RequestId& id) {
    auto it = flights.find(id);
    if (it == flights.end()) return;
    Flight& f = it->second;
    if (in.stage != Stage::kDecoder) {
      PhaseTag q = in.stage == Stage::kEncoder ? PhaseTag::kPhase1
                                               : PhaseTag::kPhase2;
      if (!publish(in, f, q)) {
        in.publish_blocked = true;
        return;
      }
    }
    erase_from(in.request_q, id);
    StageRecord& r = record(f, in);
    if (in.stage == Stage::kEncoder) {
      in.execute_q.push_back(id);
    } else {
      move(f, in, ProtoState::kAwaitingUpstreamData);
      if (r.data_arrived) {
        in.execute_q.push_back(id);
      } else {
        in.waiting_q.push_back(id);
        arm_timeout(in, f);
      }
    }
    if (in.stage != Stage::kDecoder) {
      notify(in.stage == Stage::kEncoder ? PhaseTag::kPhase1
                                         : PhaseTag::kPhase2);
    }
  }

  bool publish(Instance& in, Flight& f, PhaseTag q) {
    MetadataSlot slot = make_slot(f.req.request_id, f.req.params, q, in.id);
    slot.enqueue_time = engine.now();
    slot.sequence = in.sequence;
    slot.attempt = f.attempt;
    slot.payload.node_id = in.node;
    slot.payload.buffer_token = f.req.request_id.lo;
    slot.payload.length =
        cfg.transfer_bytes[q == PhaseTag::kPhase1 ? 0 : 1];
    uint32_t ring = route(in.table, q, hints(q));
    if (!rings[static_cast<size_t>(q)][ring]->enqueue(slot).accepted) {
      return false;
    }
    ++in.sequence;
    return true;
  }

  void arm_timeout(Instance& in, Flight& f) {
    StageRecord& r = record(f, in);
    const RequestId id = f.req.request_id;
    const uint32_t attempt = f.attempt;
    r.timeout_armed = true;
    r.timeout = engine.schedule_after(
        cfg.upstream_timeout, [this, iid = in.id, id, attempt] {
          Flight* g = live_flight(id, attempt);
          if (!g) return;
          StageRecord& rr = record(*g, inst(iid));
          rr.timeout_armed = false;
          if (rr.state == ProtoState::kAwaitingUpstreamData &&
              !rr.data_arrived) {
            fail_request(id, attempt, "upstream timeout");
          }
        });
  }

  void disarm_timeout(StageRecord& r) {
    if (r.timeout_armed) {
      engine.cancel(r.timeout);
      r.timeout_armed = false;
    }
  }

  // -- control messages ----------------------------------------------------

  void send_address(Instance& from, uint32_t to, const RequestId& id,
                    uint32_t attempt) {
    AddressMsg msg{to, from.id, id, attempt};
    if (cfg.batch_control) {
      if (!from.batcher) {
        from.batcher = std::make_unique<Batcher<AddressMsg>>(
            engine, cfg.batch, [this](Batch<AddressMsg>&& b) {
              for (const auto& m : b.messages) schedule_address(m);
            });
      }
      from.batcher->submit(msg, kSlotBytes);
      return;
    }
    schedule_address(msg);
  }

  void schedule_address(const AddressMsg& m) {
    engine.schedule_after(cfg.control_latency,
                          [this, m] { on_address(m); });
  }

  void on_address(const AddressMsg& m) {
    Flight* f = live_flight(m.id, m.attempt);
    if (!f) return;
    Instance& up = inst(m.to);
    StageRecord& r = record(*f, up);
    if (r.owner != up.id) return;
    r.downstream = m.from;
    if (r.state == ProtoState::kAwaitingPeerAddress) start_send(up, *f);
  }

  // -- execution -----------------------------------------------------------

  void try_work(Instance& in) {
    if (in.state == InstanceState::kColdStarting ||
        in.state == InstanceState::kStopped) {
      return;
    }
    for (;;) {
      bool progressed = false;
      if (!in.busy && !in.execute_q.empty()) {
        start_compute(in);
        progressed = true;
      }
      if (eligible(in) && pull(in)) progressed = true;
      if (!progressed) break;
    }
    maybe_stop(in);
  }

  void start_compute(Instance& in) {
    const RequestId id = in.execute_q.front();
    in.execute_q.pop_front();
    Flight& f = flights.at(id);
    StageRecord& r = record(f, in);
    const size_t s = index_of(in.stage);
    const double duration = times_for(f.req.params).seconds[s];
    move(f, in, ProtoState::kExecuting);
    ++exec_starts[s];
    queue_delay_sum[s] += engine.now() - r.arrival;
    for (size_t o = 0; o < 3; ++o) {
      if (o != s && computing_now[o] > 0) overlap = true;
    }
    ++computing_now[s];
    set_busy(in);
    in.computing = true;
    in.current = id;
    in.compute_end = engine.now() + duration;
    const uint32_t attempt = f.attempt;
    engine.schedule_at(in.compute_end, [this, iid = in.id, id, attempt] {
      compute_done(inst(iid), id, attempt);
    });
    if (cfg.handoff == HandoffMode::kAsync && in.stage != Stage::kEncoder) {
      double at = std::max(engine.now(), in.compute_end - cfg.prefetch_lead);
      engine.schedule_at(at, [this, iid = in.id] {
        Instance& me = inst(iid);
        if (eligible(me)) try_work(me);
      });
    }
  }

  void compute_done(Instance& in, const RequestId& id, uint32_t attempt) {
    in.computing = false;
    in.current.reset();
    --computing_now[index_of(in.stage)];
    Flight* f = live_flight(id, attempt);
    StageRecord* r = f ? &record(*f, in) : nullptr;
    if (!f || r->state != ProtoState::kExecuting) {
      // The request failed elsewhere while this instance was computing.
      clear_busy(in);
      try_work(in);
      return;
    }
    if (in.stage == Stage::kDecoder) {
      move(*f, in, ProtoState::kComplete);
      release(r->inbound);
      clear_busy(in);
      finish(*f);
      try_work(in);
      return;
    }
    if (in.stage == Stage::kTransformer) release(r->inbound);
    r->outbound = registry.allocate(
        cfg.transfer_bytes[in.stage == Stage::kEncoder ? 0 : 1], in.id);
    in.complete_q.push_back(id);
    if (cfg.handoff == HandoffMode::kSync) {
      // The worker stays held until the downstream stage has the data.
      begin_block(in, id);
    } else {
      clear_busy(in);
    }
    if (r->downstream != kNoInstance) {
      start_send(in, *f);
    } else {
      move(*f, in, ProtoState::kAwaitingPeerAddress);
    }
    if (cfg.handoff == HandoffMode::kAsync) try_work(in);
  }

  void start_send(Instance& in, Flight& f) {
    StageRecord& r = record(f, in);
    Instance& dest = inst(r.downstream);
    move(f, in, ProtoState::kSending, fmt::format("dest={}", dest.name));
    const RequestId id = f.req.request_id;
    const uint32_t attempt = f.attempt;
    const PayloadHandle h = *r.outbound;
    TransferCallbacks cbs;
    cbs.on_deliver = [this, did = dest.id, id, attempt, h](double) {
      deliver(inst(did), id, attempt, h);
    };
    cbs.on_complete = [this, iid = in.id, id, attempt](double) {
      acked(inst(iid), id, attempt);
    };
    cbs.on_failed = [this, id, attempt](double) {
      fail_request(id, attempt, "transfer failed");
    };
    if (cfg.handoff == HandoffMode::kSync) {
      transport.send_sync(h, dest.id, std::move(cbs));
    } else {
      transport.send_async(h, dest.id, std::move(cbs));
    }
  }

  void deliver(Instance& dest, const RequestId& id, uint32_t attempt,
               const PayloadHandle& h) {
    Flight* f = live_flight(id, attempt);
    if (!f) return;
    StageRecord& r = record(*f, dest);
    if (r.owner != dest.id) return;
    if (dest.dedup.check(id, attempt) == Delivery::kDuplicate) {
      ++duplicates;
      return;
    }
    r.inbound = h;
    r.data_arrived = true;
    disarm_timeout(r);
    if (erase_from(dest.waiting_q, id)) {
      dest.execute_q.push_back(id);
      try_work(dest);
    }
  }

  void acked(Instance& in, const RequestId& id, uint32_t attempt) {
    Flight* f = live_flight(id, attempt);
    if (!f) return;
    StageRecord& r = record(*f, in);
    if (r.state != ProtoState::kSending) return;
    move(*f, in, ProtoState::kComplete);
    // The handle now belongs to the receiver.
    r.outbound.reset();
    erase_from(in.complete_q, id);
    if (in.blocked && in.blocked_on == id) end_block(in);
    try_work(in);
  }

  void mono_execute(Instance& in, const RequestId& id, uint32_t attempt) {
    Flight* f = live_flight(id, attempt);
    if (!f) {
      clear_busy(in);
      try_work(in);
      return;
    }
    erase_from(in.request_q, id);
    const StageTimes& t = times_for(f->req.params);
    const double work = t.seconds[0] + t.seconds[1] + t.seconds[2];
    move(*f, in, ProtoState::kExecuting,
         fmt::format("load={} E={} T={} D={}", cfg.load_cost, t.seconds[0],
                     t.seconds[1], t.seconds[2]));
    ++mono_exec_starts;
    mono_queue_delay_sum += engine.now() - cfg.load_cost - f->mono.arrival;
    in.computing = true;
    in.current = id;
    in.compute_end = engine.now() + work;
    engine.schedule_at(in.compute_end, [this, iid = in.id, id, attempt] {
      Instance& me = inst(iid);
      me.computing = false;
      me.current.reset();
      clear_busy(me);
      if (Flight* g = live_flight(id, attempt)) {
        move(*g, me, ProtoState::kComplete);
        finish(*g);
      }
      try_work(me);
    });
  }

  void finish(Flight& f) {
    move_ctl(f, ProtoState::kComplete);
    completed.push_back({f.req.request_id, f.req.params.key(),
                         f.req.arrival_time, engine.now(), f.attempt});
    --in_flight;
  }

  // -- failure -------------------------------------------------------------

  void abort_record(Flight& f, StageRecord& r, const std::string& reason) {
    if (r.owner == kNoInstance) return;
    Instance& in = inst(r.owner);
    const RequestId& id = f.req.request_id;
    bool touched = erase_from(in.request_q, id);
    touched |= erase_from(in.waiting_q, id);
    touched |= erase_from(in.execute_q, id);
    touched |= erase_from(in.complete_q, id);
    if (touched && in.request_q.empty()) in.publish_blocked = false;
    if (in.blocked && in.blocked_on == id) end_block(in);
    disarm_timeout(r);
    release(r.inbound);
    release(r.outbound);
    if (r.state != ProtoState::kNone && !terminal(r.state)) {
      move(f, in, ProtoState::kFailed, reason);
    }
  }

  void fail_request(const RequestId& id, uint32_t attempt,
                    const std::string& reason) {
    Flight* f = live_flight(id, attempt);
    if (!f) return;
    std::vector<uint32_t> owners;
    for (auto& r : f->st) {
      if (r.owner != kNoInstance) owners.push_back(r.owner);
      abort_record(*f, r, reason);
    }
    if (f->mono.owner != kNoInstance) owners.push_back(f->mono.owner);
    abort_record(*f, f->mono, reason);
    erase_from(backlog, id);
    move_ctl(*f, ProtoState::kFailed, reason);
    if (f->readmissions < cfg.max_readmissions) {
      ++f->readmissions;
      ++f->attempt;
      f->req.attempt_count = f->attempt;
      f->st = PerStage<StageRecord>{};
      f->mono = StageRecord{};
      move_ctl(*f, ProtoState::kAdmitted,
               fmt::format("attempt={}", f->attempt));
      backlog.push_back(id);
      drain_backlog();
    } else {
      failed.push_back({id, f->req.arrival_time, engine.now(), reason});
      --in_flight;
    }
    for (uint32_t o : owners) try_work(inst(o));
  }

  // -- lifecycle -----------------------------------------------------------

  std::optional<uint32_t> pick_node(std::optional<uint32_t> node) const {
    auto has_room = [&](uint32_t n) {
      return node_enabled[n] && node_used[n] < cluster.node_gpus[n];
    };
    if (node) {
      if (*node >= node_used.size() || !has_room(*node)) return std::nullopt;
      return node;
    }
    for (uint32_t n = 0; n < node_used.size(); ++n) {
      if (has_room(n)) return n;
    }
    return std::nullopt;
  }

  uint32_t spawn(Stage stage, bool mono, std::optional<uint32_t> node,
                 bool immediate) {
    auto where = pick_node(node);
    if (!where) {
      throw InfeasibleError(fmt::format(
          "no free GPU to spawn a {} instance", mono ? "monolithic"
                                                     : stage_name(stage)));
    }
    auto p = std::make_unique<Instance>();
    Instance& in = *p;
    in.id = static_cast<uint32_t>(instances.size());
    in.stage = stage;
    in.monolithic = mono;
    in.node = *where;
    in.name = fmt::format("{}{}", mono ? 'M' : stage_letter(stage), in.id);
    in.table = make_table(in.node);
    instances.push_back(std::move(p));
    ++node_used[in.node];
    if (immediate || cfg.cold_start == 0.0) {
      activate(in);
    } else {
      in.state = InstanceState::kColdStarting;
      engine.schedule_after(cfg.cold_start, [this, iid = in.id] {
        Instance& me = inst(iid);
        if (me.state == InstanceState::kColdStarting) activate(me);
      });
    }
    return in.id;
  }

  void activate(Instance& in) {
    in.state = InstanceState::kActive;
    in.active_since = engine.now();
    try_work(in);
  }

  void retire(uint32_t id) {
    Instance& in = inst(id);
    if (in.state == InstanceState::kColdStarting) {
      in.state = InstanceState::kStopped;
      gpu_freed(in.node);
      return;
    }
    if (in.state != InstanceState::kActive) {
      throw ValidationError(fmt::format("{} is {}, not Active", in.name,
                                        instance_state_name(in.state)));
    }
    in.state = InstanceState::kDraining;
    maybe_stop(in);
  }

  void maybe_stop(Instance& in) {
    if (in.state != InstanceState::kDraining || !in.holds_nothing()) return;
    in.state = InstanceState::kStopped;
    in.active_total += engine.now() - in.active_since;
    gpu_freed(in.node);
  }

  void gpu_freed(uint32_t node) {
    --node_used[node];
    serve_deferred();
  }

  void serve_deferred() {
    while (!deferred.empty() && pick_node(std::nullopt)) {
      Stage s = deferred.front();
      deferred.pop_front();
      spawn(s, false, std::nullopt, false);
    }
  }

  double committed_work(const Instance& in) const {
    double w = in.computing ? in.compute_end - engine.now() : 0.0;
    auto add = [&](const std::deque<RequestId>& q) {
      for (const auto& id : q) {
        auto it = flights.find(id);
        if (it == flights.end()) continue;
        auto c = time_cache.find(it->second.req.params.key());
        if (c != time_cache.end()) w += c->second[in.stage];
      }
    };
    add(in.request_q);
    add(in.waiting_q);
    add(in.execute_q);
    return w;
  }

  uint32_t free_gpus() const {
    uint32_t free = 0;
    for (size_t n = 0; n < node_used.size(); ++n) {
      if (node_enabled[n]) free += cluster.node_gpus[n] - node_used[n];
    }
    auto promised = static_cast<uint32_t>(deferred.size());
    return free > promised ? free - promised : 0;
  }
};

// ---------------------------------------------------------------------------

Pipeline::Pipeline(EventEngine& engine, PipelineConfig config,
                   StageProfile profile, ClusterSpec cluster,
                   std::vector<bool> node_enabled)
    : impl_(std::make_unique<Impl>(engine, std::move(config),
                                   std::move(profile), std::move(cluster),
                                   std::move(node_enabled))) {}

Pipeline::~Pipeline() = default;

bool Pipeline::admit(const Request& request) { return impl_->admit(request); }

uint32_t Pipeline::spawn_instance(Stage stage, std::optional<uint32_t> node,
                                  bool immediate) {
  if (impl_->cfg.deployment == DeploymentMode::kMonolithic) {
    throw ConfigError("stage instances need disaggregated deployment");
  }
  return impl_->spawn(stage, false, node, immediate);
}

uint32_t Pipeline::spawn_monolithic(std::optional<uint32_t> node,
                                    bool immediate) {
  if (impl_->cfg.deployment != DeploymentMode::kMonolithic) {
    throw ConfigError("monolithic instances need monolithic deployment");
  }
  return impl_->spawn(Stage::kEncoder, true, node, immediate);
}

bool Pipeline::spawn_when_free(Stage stage) {
  if (impl_->free_gpus() > 0) {
    impl_->spawn(stage, false, std::nullopt, false);
    return true;
  }
  impl_->deferred.push_back(stage);
  return false;
}

uint32_t Pipeline::deferred_spawns() const {
  return static_cast<uint32_t>(impl_->deferred.size());
}

void Pipeline::retire_instance(uint32_t id) { impl_->retire(id); }

std::optional<uint32_t> Pipeline::retire_candidate(Stage stage) const {
  std::optional<uint32_t> best;
  double best_work = 0.0;
  for (const auto& p : impl_->instances) {
    const Instance& in = *p;
    if (in.monolithic || in.stage != stage) continue;
    double w;
    if (in.state == InstanceState::kColdStarting) {
      w = -1.0;  // nothing owned yet; cheapest to undo
    } else if (in.state == InstanceState::kActive) {
      w = impl_->committed_work(in);
    } else {
      continue;
    }
    if (!best || w <= best_work) {
      best = in.id;
      best_work = w;
    }
  }
  return best;
}

void Pipeline::enable_node(uint32_t node) {
  if (node >= impl_->node_enabled.size()) {
    throw ValidationError(fmt::format("node {} does not exist", node));
  }
  impl_->node_enabled[node] = true;
  impl_->serve_deferred();
}

uint32_t Pipeline::live_count(Stage stage) const {
  uint32_t n = 0;
  for (const auto& p : impl_->instances) {
    if (p->monolithic || p->stage != stage) continue;
    if (p->state == InstanceState::kActive ||
        p->state == InstanceState::kColdStarting) {
      ++n;
    }
  }
  return n;
}

Allocation Pipeline::live_allocation() const {
  return Allocation(live_count(Stage::kEncoder),
                    live_count(Stage::kTransformer),
                    live_count(Stage::kDecoder));
}

uint32_t Pipeline::monolithic_count() const {
  uint32_t n = 0;
  for (const auto& p : impl_->instances) {
    if (p->monolithic && p->state != InstanceState::kStopped) ++n;
  }
  return n;
}

uint32_t Pipeline::enabled_gpus() const {
  uint32_t n = 0;
  for (size_t i = 0; i < impl_->node_enabled.size(); ++i) {
    if (impl_->node_enabled[i]) n += impl_->cluster.node_gpus[i];
  }
  return n;
}

uint32_t Pipeline::free_gpus() const { return impl_->free_gpus(); }

std::optional<uint32_t> Pipeline::standby_node() const {
  for (uint32_t i = 0; i < impl_->node_enabled.size(); ++i) {
    if (!impl_->node_enabled[i]) return i;
  }
  return std::nullopt;
}

StageCounters Pipeline::counters(Stage stage) const {
  const double now = impl_->engine.now();
  StageCounters c;
  bool mono = impl_->cfg.deployment == DeploymentMode::kMonolithic;
  for (const auto& p : impl_->instances) {
    const Instance& in = *p;
    if (in.monolithic != mono) continue;
    if (!mono && in.stage != stage) continue;
    c.busy_seconds += in.busy_total + (in.busy ? now - in.busy_since : 0.0);
    c.blocked_seconds +=
        in.blocked_total + (in.blocked ? now - in.blocked_since : 0.0);
    c.instance_seconds += in.active_total;
    if (in.state == InstanceState::kActive ||
        in.state == InstanceState::kDraining) {
      c.instance_seconds += now - in.active_since;
    }
  }
  if (mono) {
    c.exec_starts = impl_->mono_exec_starts;
    c.queue_delay_sum = impl_->mono_queue_delay_sum;
  } else {
    c.exec_starts = impl_->exec_starts[index_of(stage)];
    c.queue_delay_sum = impl_->queue_delay_sum[index_of(stage)];
  }
  return c;
}

size_t Pipeline::queue_length(Stage stage) const {
  bool mono = impl_->cfg.deployment == DeploymentMode::kMonolithic;
  PhaseTag q = mono ? PhaseTag::kRequest : inbound_queue(stage);
  size_t n = 0;
  for (const auto& r : impl_->rings[static_cast<size_t>(q)]) {
    n += static_cast<size_t>(r->occupancy());
  }
  for (const auto& p : impl_->instances) {
    const Instance& in = *p;
    if (in.monolithic != mono) continue;
    if (!mono && in.stage != stage) continue;
    n += in.owned_not_started();
  }
  if (mono || stage == Stage::kEncoder) n += impl_->backlog.size();
  return n;
}

std::vector<WorkloadKey> Pipeline::take_recent_keys() {
  std::vector<WorkloadKey> out;
  out.swap(impl_->recent);
  return out;
}

size_t Pipeline::in_flight() const { return impl_->in_flight; }

bool Pipeline::idle() const {
  if (impl_->in_flight != 0) return false;
  for (const auto& p : impl_->instances) {
    if (p->busy) return false;
  }
  return true;
}

uint64_t Pipeline::admissions() const { return impl_->admissions; }
uint64_t Pipeline::rejections() const { return impl_->rejections; }
uint64_t Pipeline::duplicates_dropped() const { return impl_->duplicates; }
const std::vector<CompletedRequest>& Pipeline::completed() const {
  return impl_->completed;
}
const std::vector<FailedRequest>& Pipeline::failed() const {
  return impl_->failed;
}
const std::vector<EventRecord>& Pipeline::events() const {
  return impl_->events;
}
const PayloadRegistry& Pipeline::registry() const { return impl_->registry; }
const TransportStats& Pipeline::transport_stats() const {
  return impl_->transport.stats();
}
bool Pipeline::overlap_witnessed() const { return impl_->overlap; }

const RingBuffer& Pipeline::ring(PhaseTag queue, uint32_t index) const {
  return *impl_->rings[static_cast<size_t>(queue)].at(index);
}

std::vector<InstanceView> Pipeline::instances() const {
  std::vector<InstanceView> out;
  const double now = impl_->engine.now();
  for (const auto& p : impl_->instances) {
    const Instance& in = *p;
    out.push_back({in.id, in.name, in.stage, in.monolithic, in.node, in.state,
                   in.busy_total + (in.busy ? now - in.busy_since : 0.0),
                   in.blocked_total +
                       (in.blocked ? now - in.blocked_since : 0.0)});
  }
  return out;
}

void Pipeline::check_invariants() const {
  const Impl& m = *impl_;
  const uint64_t terminal_count = m.completed.size() + m.failed.size();
  if (terminal_count + m.in_flight != m.admissions) {
    throw InvariantViolation(fmt::format(
        "conservation: {} completed + {} failed + {} in flight != {} admitted",
        m.completed.size(), m.failed.size(), m.in_flight, m.admissions));
  }
  if (m.in_flight != 0) {
    throw InvariantViolation(
        fmt::format("leak: {} requests never reached a terminal state",
                    m.in_flight));
  }
  if (m.registry.live_count() != 0) {
    throw InvariantViolation(fmt::format(
        "leak: {} payload handles never released", m.registry.live_count()));
  }
  if (m.transport.active_transfers() != 0) {
    throw InvariantViolation("leak: transfers still in flight");
  }
  for (const auto& p : m.instances) {
    const Instance& in = *p;
    if (!in.holds_nothing()) {
      throw InvariantViolation(
          fmt::format("leak: {} still holds requests", in.name));
    }
    if (in.state == InstanceState::kStopped && !in.holds_nothing()) {
      throw InvariantViolation(
          fmt::format("{} stopped while holding requests", in.name));
    }
  }
  for (const auto& q : m.rings) {
    for (const auto& r : q) {
      if (r->occupancy() < 0 ||
          r->occupancy() > static_cast<int64_t>(r->capacity())) {
        throw InvariantViolation("ring occupancy out of bounds");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Event-log replay.

namespace {

struct Key {
  char stage;
  RequestId id;
  friend auto operator<=>(const Key&, const Key&) = default;
};

struct Replay {
  ProtoState state = ProtoState::kNone;
  std::string owner;
  std::string address_from;  // receiver that sent its address
  double address_time = -1.0;
};

bool legal(char stage, ProtoState from, ProtoState to) {
  using P = ProtoState;
  if (stage == 'C') {
    return (from == P::kNone && (to == P::kAdmitted || to == P::kRejected)) ||
           (from == P::kAdmitted &&
            (to == P::kComplete || to == P::kFailed)) ||
           (from == P::kFailed && to == P::kAdmitted);
  }
  if (to == P::kFailed) return from != P::kNone && !terminal(from);
  switch (stage) {
    case 'E':
      return (from == P::kNone && to == P::kInitialized) ||
             (from == P::kInitialized && to == P::kExecuting) ||
             (from == P::kExecuting &&
              (to == P::kAwaitingPeerAddress || to == P::kSending)) ||
             (from == P::kAwaitingPeerAddress && to == P::kSending) ||
             (from == P::kSending && to == P::kComplete);
    case 'T':
      return (from == P::kNone && to == P::kInitialized) ||
             (from == P::kInitialized && to == P::kAwaitingUpstreamData) ||
             (from == P::kAwaitingUpstreamData && to == P::kExecuting) ||
             (from == P::kExecuting &&
              (to == P::kAwaitingPeerAddress || to == P::kSending)) ||
             (from == P::kAwaitingPeerAddress && to == P::kSending) ||
             (from == P::kSending && to == P::kComplete);
    case 'D':
      return (from == P::kNone && to == P::kInitialized) ||
             (from == P::kInitialized && to == P::kAwaitingUpstreamData) ||
             (from == P::kAwaitingUpstreamData && to == P::kExecuting) ||
             (from == P::kExecuting && to == P::kComplete);
    case 'M':
      return (from == P::kNone && to == P::kInitialized) ||
             (from == P::kInitialized && to == P::kExecuting) ||
             (from == P::kExecuting && to == P::kComplete);
    default:
      return false;
  }
}

std::string_view field_value(std::string_view detail, std::string_view name) {
  size_t pos = 0;
  while (pos <= detail.size()) {
    size_t end = detail.find(' ', pos);
    if (end == std::string_view::npos) end = detail.size();
    std::string_view tok = detail.substr(pos, end - pos);
    if (tok.size() > name.size() && tok.substr(0, name.size()) == name &&
        tok[name.size()] == '=') {
      return tok.substr(name.size() + 1);
    }
    pos = end + 1;
  }
  return {};
}

}  // namespace

LogValidation validate_event_log(std::string_view text) {
  LogValidation v;
  std::map<Key, Replay> state;
  double last_time = 0.0;
  size_t line_no = 0;
  auto fail = [&](std::string msg) {
    v.ok = false;
    v.line = line_no;
    v.message = std::move(msg);
    return v;
  };
  size_t pos = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    if (line_no == 1 && line.substr(0, 5) == "time,") continue;

    std::array<std::string_view, 6> f;
    size_t start = 0;
    for (size_t i = 0; i < 5; ++i) {
      size_t comma = line.find(',', start);
      if (comma == std::string_view::npos) {
        return fail("expected 6 comma-separated fields");
      }
      f[i] = line.substr(start, comma - start);
      start = comma + 1;
    }
    f[5] = line.substr(start);

    double t = 0.0;
    try {
      size_t used = 0;
      t = std::stod(std::string(f[0]), &used);
      if (used != f[0].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      return fail(fmt::format("bad time '{}'", f[0]));
    }
    if (t < last_time) return fail("time goes backwards");
    last_time = t;

    const std::string_view who = f[1];
    char stage;
    if (who == "ctl") {
      stage = 'C';
    } else if (who.size() >= 2 && std::string_view("ETDM").find(who[0]) !=
                                      std::string_view::npos) {
      stage = who[0];
    } else {
      return fail(fmt::format("bad instance '{}'", who));
    }
    auto id = RequestId::parse(f[2]);
    if (!id) return fail(fmt::format("bad request id '{}'", f[2]));
    auto from = parse_proto_state(f[3]);
    auto to = parse_proto_state(f[4]);
    if (!from || !to) return fail("unknown state name");

    Replay& r = state[{stage, *id}];
    if (r.state != *from) {
      return fail(fmt::format("{} {} claims {} but replay has {}", who,
                              f[2], f[3], proto_state_name(r.state)));
    }
    if (!legal(stage, *from, *to)) {
      return fail(fmt::format("illegal {} transition {} -> {}", who, f[3],
                              f[4]));
    }
    if (stage != 'C') {
      if (*from == ProtoState::kNone) {
        if (state[{'C', *id}].state != ProtoState::kAdmitted) {
          return fail("stage work on a request that is not admitted");
        }
        r.owner = std::string(who);
      } else if (r.owner != who) {
        return fail(fmt::format("{} acts on a request owned by {}", who,
                                r.owner));
      }
      if (*from == ProtoState::kNone && (stage == 'T' || stage == 'D')) {
        auto target = field_value(f[5], "addr_to");
        char up = stage == 'T' ? 'E' : 'T';
        Replay& u = state[{up, *id}];
        if (target.empty() || u.owner != target) {
          return fail("address sent to an instance that does not own the "
                      "request upstream");
        }
        u.address_from = std::string(who);
        u.address_time = t;
      }
      if (*to == ProtoState::kSending) {
        auto dest = field_value(f[5], "dest");
        if (r.address_from.empty() || r.address_time > t) {
          return fail("data sent before the destination address arrived");
        }
        if (dest != r.address_from) {
          return fail(fmt::format("data sent to {} but address came from {}",
                                  dest, r.address_from));
        }
      }
    } else {
      if (*from == ProtoState::kNone && *to == ProtoState::kAdmitted) {
        ++v.admissions;
      }
      if (*to == ProtoState::kComplete) ++v.completions;
      if (*from == ProtoState::kFailed && *to == ProtoState::kAdmitted) {
        // Re-admission: per-stage replay starts over.
        for (char s : std::string_view("ETDM")) {
          auto it = state.find({s, *id});
          if (it == state.end()) continue;
          if (it->second.state != ProtoState::kNone &&
              !terminal(it->second.state)) {
            return fail("re-admitted while a stage still holds the request");
          }
          state.erase(it);
        }
      }
    }
    r.state = *to;
    ++v.transitions;
  }
  line_no = 0;
  for (const auto& [k, r] : state) {
    if (k.stage == 'C') {
      if (r.state == ProtoState::kFailed) ++v.failures;
      if (r.state == ProtoState::kAdmitted) {
        return fail(fmt::format("request {} never reached a terminal state",
                                k.id.to_string()));
      }
    } else if (r.state != ProtoState::kNone && !terminal(r.state)) {
      return fail(fmt::format("{} left request {} in {}", r.owner,
                              k.id.to_string(), proto_state_name(r.state)));
    }
  }
  return v;
}

}  // namespace disagsim

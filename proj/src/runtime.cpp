#include "dapp/runtime.hpp"

#include <pthread.h>
#include <sched.h>
#include <time.h>

#include <algorithm>
#include <array>
#include <cerrno>
#include <cstring>
#include <variant>

namespace dapp::runtime {

namespace {

std::uint64_t thread_cpu_ns() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<std::uint64_t>(ts.tv_sec) * 1'000'000'000ull + static_cast<std::uint64_t>(ts.tv_nsec);
}

std::uint64_t process_cpu_ns() {
  timespec ts{};
  clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
  return static_cast<std::uint64_t>(ts.tv_sec) * 1'000'000'000ull + static_cast<std::uint64_t>(ts.tv_nsec);
}

std::int64_t elapsed(std::uint64_t from, std::uint64_t to) { return static_cast<std::int64_t>(to - from); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Common slot-0 time for every simulator of a fleet. Each instance either
// arrives (handshake done) or withdraws (handshake failed) exactly once.
class StartGate {
 public:
  explicit StartGate(std::size_t parties) : pending_(parties) {}

  std::uint64_t arrive() {
    std::unique_lock lock(m_);
    count_down();
    cv_.wait(lock, [&] { return t0_.has_value(); });
    return *t0_;
  }

  void withdraw() {
    std::lock_guard lock(m_);
    count_down();
  }

 private:
  void count_down() {
    if (pending_ > 0 && --pending_ == 0) {
      t0_ = monotonic_ns() + 1'000'000;  // 1 ms to let every waiter wake
      cv_.notify_all();
    }
  }

  std::mutex m_;
  std::condition_variable cv_;
  std::size_t pending_;
  std::optional<std::uint64_t> t0_;
};

// Multi-producer, single-consumer record channel.
class RecordQueue {
 public:
  void push(const PhaseLatencyRecord& r) {
    {
      std::lock_guard lock(m_);
      items_.push_back(r);
    }
    cv_.notify_one();
  }

  void producer_done() {
    {
      std::lock_guard lock(m_);
      ++done_;
    }
    cv_.notify_one();
  }

  // Blocks for the next record; nullopt when every producer is done and the
  // queue is drained.
  std::optional<PhaseLatencyRecord> pop(std::size_t producers) {
    std::unique_lock lock(m_);
    cv_.wait(lock, [&] { return !items_.empty() || done_ == producers; });
    if (items_.empty()) return std::nullopt;
    PhaseLatencyRecord r = items_.front();
    items_.pop_front();
    return r;
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  std::deque<PhaseLatencyRecord> items_;
  std::size_t done_ = 0;
};

std::unique_ptr<ByteStream> maybe_delayed(std::unique_ptr<ByteStream> s, double delay_ms) {
  if (delay_ms <= 0.0) return s;
  return with_write_delay(std::move(s), std::chrono::nanoseconds(static_cast<std::int64_t>(delay_ms * 1e6)));
}

bool pin_current_thread(const std::vector<int>& cores, std::string& note) {
  cpu_set_t set;
  CPU_ZERO(&set);
  for (int c : cores) {
    if (c < 0 || c >= CPU_SETSIZE) {
      note = "AffinityUnsupported: core " + std::to_string(c) + " out of range";
      return false;
    }
    CPU_SET(c, &set);
  }
  if (cores.empty()) {
    note = "AffinityUnsupported: empty core set";
    return false;
  }
  const int rc = pthread_setaffinity_np(pthread_self(), sizeof set, &set);
  if (rc != 0) {
    note = std::string("AffinityUnsupported: ") + std::strerror(rc);
    return false;
  }
  note = "pinned";
  return true;
}

}  // namespace

const char* to_string(TransportKind kind) {
  switch (kind) {
    case TransportKind::InProcess: return "in_process";
    case TransportKind::LocalStream: return "local_stream";
    case TransportKind::DelayedStream: return "delayed_stream";
    case TransportKind::DirectCapture: return "direct_capture";
  }
  return "?";
}

std::optional<TransportKind> parse_transport_kind(std::string_view name) {
  for (auto k : {TransportKind::InProcess, TransportKind::LocalStream, TransportKind::DelayedStream,
                 TransportKind::DirectCapture})
    if (name == to_string(k)) return k;
  return std::nullopt;
}

PhaseLatencyRecord PhaseLatencyRecord::make(std::uint32_t instance_id, std::uint32_t seq, std::int64_t p1,
                                            std::int64_t p2, std::int64_t p3, std::int64_t p4,
                                            std::int64_t rtt, std::int64_t deadline) {
  PhaseLatencyRecord r;
  r.instance_id = instance_id;
  r.seq = seq;
  r.p1_collection_ns = p1;
  r.p2_processing_ns = p2;
  r.p3_create_control_ns = p3;
  r.p4_deliver_ns = p4;
  r.rtt_ns = rtt;
  r.total_ns = p1 + p2 + p3 + p4 + rtt;
  r.deadline_ns = deadline;
  r.violated = r.total_ns > deadline;
  return r;
}

std::optional<SourcedSlot> IndicationSource::collect() {
  std::vector<std::uint8_t> frame;
  try {
    frame = e3::read_frame(stream_);
  } catch (const StreamClosed&) {
    return std::nullopt;
  } catch (const e3::DecodeError& e) {
    // a bad header leaves no way to find the next frame boundary
    throw TransportError(std::string("E3 stream desynchronized: ") + e.what());
  }
  e3::Message msg;
  try {
    msg = e3::decode(frame);
  } catch (const e3::DecodeError&) {
    session_.skip_indication();
    throw;
  }
  session_.received(msg);
  auto& ind = std::get<e3::IndicationMessage>(msg);
  return SourcedSlot{from_fixed_point(ind.payload), ind.seq};
}

std::optional<SourcedSlot> CaptureSlotSource::collect() {
  auto slot = capture_.next();
  if (!slot) return std::nullopt;
  std::uint32_t seq = slot->seq_id;
  if (last_seq_) {
    // smallest value above the previous one with the same low 16 bits
    const std::uint32_t base = *last_seq_ & ~0xFFFFu;
    seq = base | slot->seq_id;
    if (seq <= *last_seq_) seq += 0x10000u;
  }
  last_seq_ = seq;
  return SourcedSlot{std::move(slot->samples), seq};
}

const std::vector<std::uint8_t>& ControlSink::prepare(std::uint32_t seq, const workloads::Detection& d) {
  last_.seq = seq;
  last_.decision = make_decision(d.verdict, d.score, channel_);
  session_.sent(last_);
  encoded_.clear();
  e3::encode_into(last_, encoded_);
  return encoded_;
}

void ControlSink::deliver() {
  stream_.write(encoded_);
  if (last_.decision.channel_change) channel_.current = *last_.decision.channel_change;
}

LoopOutcome run_closed_loop(SlotSource& source, const workloads::Workload& dapp, ControlSink& sink,
                            const LoopSpec& spec, const RecordCallback& on_record) {
  LoopOutcome out;
  out.records.reserve(spec.slots);
  std::uint64_t previous_end = 0;
  try {
    while (out.records.size() < spec.slots) {
      while (!source.wait(std::chrono::milliseconds(100))) {
      }
      const std::uint64_t woke = monotonic_ns();
      // Collection starts when the message reached the endpoint, so time
      // spent waiting for a CPU counts; never before the previous slot ended.
      std::uint64_t t1 = woke;
      if (const auto arrived = source.arrival_ns()) t1 = std::min(t1, std::max(*arrived, previous_end));
      if (spec.own_cpu_clock) t1 = thread_cpu_ns();
      const auto now = [&] { return spec.own_cpu_clock ? thread_cpu_ns() : monotonic_ns(); };
      std::optional<SourcedSlot> slot;
      try {
        slot = source.collect();
      } catch (const e3::DecodeError&) {
        ++out.skipped_slots;
        continue;
      }
      if (!slot) break;
      const std::uint64_t t2 = now();
      const workloads::Detection det = dapp.detect(slot->samples);
      const std::uint64_t t3 = now();
      sink.prepare(slot->seq, det);
      const std::uint64_t t4 = now();
      sink.deliver();
      const std::uint64_t t5 = now();
      previous_end = t5;

      auto rec = PhaseLatencyRecord::make(spec.instance_id, slot->seq, elapsed(t1, t2), elapsed(t2, t3),
                                          elapsed(t3, t4), elapsed(t4, t5), spec.rtt_ns, spec.deadline_ns);
      rec.start_ns = spec.own_cpu_clock ? woke : t1;
      rec.decision = sink.last_decision();
      if (on_record) on_record(rec);
      out.records.push_back(rec);
    }
  } catch (const e3::ProtocolViolation& e) {
    out.error = std::string("protocol violation: ") + e.what();
  } catch (const StreamClosed&) {
    // peer went away mid-write; nothing more to do
  } catch (const TransportError& e) {
    out.error = e.what();
  }
  return out;
}

SetupOutcome establish_session(ByteStream& stream, e3::Session& session, const e3::SetupRequest& request) {
  const auto bytes = e3::encode(request);
  session.sent(request);
  const std::uint64_t t0 = monotonic_ns();
  stream.write(bytes);
  const auto frame = e3::read_frame(stream);
  const auto msg = e3::decode(frame);
  const std::uint64_t t1 = monotonic_ns();
  session.received(msg);
  const auto& resp = std::get<e3::SetupResponse>(msg);
  return {resp.accepted, resp.reason_code, elapsed(t0, t1)};
}

unsigned available_cores() {
  cpu_set_t set;
  CPU_ZERO(&set);
  if (sched_getaffinity(0, sizeof set, &set) == 0) return std::max(1, CPU_COUNT(&set));
  return std::max(1u, std::thread::hardware_concurrency());
}

std::int64_t probe_rtt(ByteStream& stream, int probes) {
  std::vector<std::int64_t> rtts;
  std::array<std::uint8_t, 8> buf{};
  for (int i = 0; i < probes; ++i) {
    buf[0] = static_cast<std::uint8_t>(i);
    const std::uint64_t t0 = monotonic_ns();
    stream.write(buf);
    stream.read_exact(buf);
    rtts.push_back(elapsed(t0, monotonic_ns()));
    if (buf[0] != static_cast<std::uint8_t>(i)) throw TransportError("rtt probe echo mismatch");
  }
  std::nth_element(rtts.begin(), rtts.begin() + rtts.size() / 2, rtts.end());
  return rtts[rtts.size() / 2];
}

void serve_rtt_probe(ByteStream& stream, int probes) {
  std::array<std::uint8_t, 8> buf{};
  for (int i = 0; i < probes; ++i) {
    stream.read_exact(buf);
    stream.write(buf);
  }
}

std::uint64_t instance_seed(std::uint64_t fleet_seed, std::uint32_t index) {
  return splitmix64(splitmix64(fleet_seed) ^ (static_cast<std::uint64_t>(index) + 1));
}

// ---------------------------------------------------------------------------

namespace {

struct Instance {
  InstanceResult result;
  ransim::ChannelState channel;  // owned by the simulator thread once started
  ChannelContext initial_channel;
  std::uint32_t samples = 0;
  std::shared_ptr<const workloads::Workload> workload;
  std::unique_ptr<ByteStream> ran_io, dapp_io;          // E3 session
  std::unique_ptr<ByteStream> ran_frames, dapp_frames;  // eCPRI tap (DirectCapture)
  std::string ran_error;  // merged into result.error after join
  std::atomic<std::int64_t> cpu_ns{-1};
  std::thread ran_thread, dapp_thread;
};

}  // namespace

struct ExperimentHandle::Impl {
  FleetConfig config;
  std::vector<std::unique_ptr<Instance>> instances;
  StartGate gate;
  RecordQueue queue;
  std::vector<PhaseLatencyRecord> collected;
  std::thread collector;
  std::atomic<std::size_t> workers_done{0};
  std::uint64_t started_ns = 0;
  bool joined = false;

  Impl(std::size_t n, const FleetConfig& cfg) : config(cfg), gate(n) {}

  void run_ran(Instance& in);
  void run_dapp(Instance& in);
  void join_all();
};

void ExperimentHandle::Impl::run_ran(Instance& in) {
  // The RAN stands in for another box; don't let its wakeups preempt a dApp
  // mid-phase when everything shares a core.
  sched_param batch{};
  pthread_setschedparam(pthread_self(), SCHED_BATCH, &batch);
  bool gate_passed = false;
  ransim::ServeOptions opts;
  opts.expected_token = config.token;
  opts.pc_id = static_cast<std::uint16_t>(in.result.instance_id & 0xFFFF);
  opts.start_time = [&] {
    gate_passed = true;
    return gate.arrive() + static_cast<std::uint64_t>(in.result.spec.start_offset_ns);
  };
  opts.on_setup_failed = [&] {
    gate_passed = true;
    gate.withdraw();
  };
  try {
    serve_rtt_probe(*in.ran_io);
    if (in.result.spec.transport.kind == TransportKind::DirectCapture)
      in.result.ground_truth = ransim::emit_ecpri(*in.ran_frames, *in.ran_io, in.channel,
                                                  in.result.spec.slots, opts);
    else
      in.result.ground_truth = ransim::serve_e3(*in.ran_io, in.channel, in.result.spec.slots, opts);
  } catch (const std::exception& e) {
    if (!gate_passed) gate.withdraw();
    in.ran_error = std::string("simulator: ") + e.what();
    in.ran_io->close();
    if (in.ran_frames) in.ran_frames->close();
  }
}

void ExperimentHandle::Impl::run_dapp(Instance& in) {
  auto& res = in.result;
  if (res.spec.pinned_cores) {
    res.affinity_requested = true;
    res.affinity_applied = pin_current_thread(*res.spec.pinned_cores, res.affinity_note);
  } else {
    res.affinity_note = "unpinned";
  }
  if (res.spec.offloaded) {
    if (res.affinity_applied) {
      res.placement_note = "dedicated cores";
    } else {
      sched_param param{};
      const int rc = pthread_setschedparam(pthread_self(), SCHED_IDLE, &param);
      res.placement_note = rc == 0 ? "idle priority" : std::string("shared, priority unchanged: ") + std::strerror(rc);
      res.placement_note += "; phases on thread CPU clock";
    }
  }

  const bool direct = res.spec.transport.kind == TransportKind::DirectCapture;
  e3::Session session(e3::Role::DApp, direct ? e3::IndicationPath::DirectCapture : e3::IndicationPath::E3);
  try {
    e3::SetupRequest req;
    req.dapp_id = res.instance_id;
    req.auth_token = config.dapp_token.value_or(config.token);
    req.subscription = {res.spec.dapp_kind, in.samples, config.period_ms};
    res.rtt_ns = probe_rtt(*in.dapp_io);
    const auto setup = establish_session(*in.dapp_io, session, req);
    res.setup_accepted = setup.accepted;
    res.reason_code = setup.reason_code;
    res.setup_rtt_ns = setup.rtt_ns;
    in.cpu_ns.store(static_cast<std::int64_t>(thread_cpu_ns()));

    if (setup.accepted) {
      ControlSink sink(*in.dapp_io, session, in.initial_channel);
      LoopSpec spec{res.instance_id, res.spec.deadline_ns, res.spec.slots, res.rtt_ns};
      spec.own_cpu_clock = res.spec.offloaded && !res.affinity_applied;
      auto publish = [&](const PhaseLatencyRecord& r) {
        queue.push(r);
        in.cpu_ns.store(static_cast<std::int64_t>(thread_cpu_ns()), std::memory_order_relaxed);
      };
      LoopOutcome outcome;
      if (direct) {
        CaptureSlotSource source(*in.dapp_frames, static_cast<std::uint16_t>(res.instance_id & 0xFFFF));
        outcome = run_closed_loop(source, *in.workload, sink, spec, publish);
        res.capture = source.stats();
      } else {
        IndicationSource source(*in.dapp_io, session);
        outcome = run_closed_loop(source, *in.workload, sink, spec, publish);
      }
      res.skipped_slots = outcome.skipped_slots;
      if (!outcome.error.empty()) res.error = "dApp: " + outcome.error;
    }
  } catch (const std::exception& e) {
    res.error = std::string("dApp: ") + e.what();
  }
  in.cpu_ns.store(static_cast<std::int64_t>(thread_cpu_ns()));
  in.dapp_io->close();
  queue.producer_done();
  workers_done.fetch_add(1);
}

void ExperimentHandle::Impl::join_all() {
  if (joined) return;
  for (auto& in : instances) {
    if (in->dapp_thread.joinable()) in->dapp_thread.join();
    if (in->ran_thread.joinable()) in->ran_thread.join();
  }
  if (collector.joinable()) collector.join();
  joined = true;
}

ExperimentHandle::ExperimentHandle(std::vector<InstanceSpec> specs, const FleetConfig& config)
    : impl_(std::make_unique<Impl>(specs.size(), config)) {
  config.channel.validate();
  auto& im = *impl_;

  std::vector<std::shared_ptr<const workloads::Workload>> shared(4);
  for (std::uint32_t i = 0; i < specs.size(); ++i) {
    auto in = std::make_unique<Instance>();
    in->result.instance_id = i;
    in->result.spec = specs[i];
    in->channel = config.channel;
    in->channel.rng_seed = instance_seed(config.seed, specs[i].seed_stream.value_or(i));
    in->initial_channel = {config.channel.current_channel, config.channel.num_channels};
    in->samples = config.channel.samples;
    auto& w = shared[static_cast<std::size_t>(specs[i].dapp_kind)];
    if (!w) w = workloads::make_workload(specs[i].dapp_kind, config.workload);
    in->workload = w;

    const auto& t = specs[i].transport;
    StreamPair io;
    switch (t.kind) {
      case TransportKind::InProcess: io = make_memory_pipe(); break;
      case TransportKind::LocalStream: io = make_loopback_tcp_pair(); break;
      case TransportKind::DelayedStream:
      case TransportKind::DirectCapture: {
        io = make_loopback_tcp_pair();
        io.first = maybe_delayed(std::move(io.first), t.delay_ms);
        io.second = maybe_delayed(std::move(io.second), t.delay_ms);
        break;
      }
    }
    in->ran_io = std::move(io.first);
    in->dapp_io = std::move(io.second);
    if (t.kind == TransportKind::DirectCapture) {
      auto frames = make_memory_pipe();
      in->ran_frames = std::move(frames.first);
      in->dapp_frames = std::move(frames.second);
    }
    im.instances.push_back(std::move(in));
  }

  im.started_ns = monotonic_ns();
  const std::size_t n = im.instances.size();
  im.collector = std::thread([&im, n] {
    while (auto r = im.queue.pop(n)) im.collected.push_back(*r);
  });
  for (auto& in : im.instances) {
    Instance* p = in.get();
    p->ran_thread = std::thread([&im, p] { im.run_ran(*p); });
    p->dapp_thread = std::thread([&im, p] { im.run_dapp(*p); });
  }
}

ExperimentHandle::~ExperimentHandle() {
  if (impl_) impl_->join_all();
}

bool ExperimentHandle::finished() const { return impl_->workers_done.load() == impl_->instances.size(); }

std::size_t ExperimentHandle::instance_count() const { return impl_->instances.size(); }

std::vector<std::optional<std::uint64_t>> ExperimentHandle::instance_cpu_ns() const {
  std::vector<std::optional<std::uint64_t>> out;
  for (const auto& in : impl_->instances) {
    const auto v = in->cpu_ns.load(std::memory_order_relaxed);
    out.push_back(v < 0 ? std::nullopt : std::optional<std::uint64_t>(static_cast<std::uint64_t>(v)));
  }
  return out;
}

ExperimentResult ExperimentHandle::wait() {
  auto& im = *impl_;
  im.join_all();
  ExperimentResult out;
  out.wall_ns = monotonic_ns() - im.started_ns;
  out.records = std::move(im.collected);
  for (auto& in : im.instances) {
    if (in->result.error.empty()) in->result.error = in->ran_error;
    out.instances.push_back(std::move(in->result));
  }
  return out;
}

std::unique_ptr<ExperimentHandle> spawn_instances(std::vector<InstanceSpec> specs, const FleetConfig& config) {
  return std::make_unique<ExperimentHandle>(std::move(specs), config);
}

std::vector<ResourceSample> sample_resources(const ExperimentHandle& handle, std::chrono::nanoseconds interval) {
  if (interval.count() <= 0) throw std::invalid_argument("sampling interval must be positive");
  std::vector<ResourceSample> out;
  std::uint64_t wall_prev = monotonic_ns();
  std::uint64_t proc_prev = process_cpu_ns();
  auto inst_prev = handle.instance_cpu_ns();
  std::uint64_t next = wall_prev + static_cast<std::uint64_t>(interval.count());
  while (!handle.finished()) {
    // short naps so the loop notices the end promptly
    const std::uint64_t now = monotonic_ns();
    if (now < next) {
      std::this_thread::sleep_for(std::chrono::nanoseconds(std::min<std::uint64_t>(next - now, 5'000'000)));
      continue;
    }
    const std::uint64_t wall = monotonic_ns();
    const std::uint64_t proc = process_cpu_ns();
    const auto inst = handle.instance_cpu_ns();
    const double dt = static_cast<double>(wall - wall_prev);

    ResourceSample s;
    s.timestamp_ns = wall;
    s.host_utilization = static_cast<double>(proc - proc_prev) / dt;
    for (std::size_t i = 0; i < inst.size(); ++i) {
      if (inst[i] && inst_prev[i] && *inst[i] >= *inst_prev[i])
        s.instance_utilization.push_back(static_cast<double>(*inst[i] - *inst_prev[i]) / dt);
      else
        s.instance_utilization.push_back(std::nullopt);
    }
    out.push_back(std::move(s));
    wall_prev = wall;
    proc_prev = proc;
    inst_prev = inst;
    next += static_cast<std::uint64_t>(interval.count());
  }
  return out;
}

ExperimentResult run_fleet(std::vector<InstanceSpec> specs, const FleetConfig& config) {
  return spawn_instances(std::move(specs), config)->wait();
}

}  // namespace dapp::runtime

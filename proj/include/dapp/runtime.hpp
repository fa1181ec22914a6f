#pragma once

// dApp closed loop: Collection (P1), Processing (P2), Create Control (P3) and
// Deliver Control (P4), timed on the monotonic clock, over one of four
// deployment transports:
//
//   InProcess      memory pipe, dApp and RAN in one address space
//                  (bare-metal / co-located container)
//   LocalStream    loopback TCP (separated containers)
//   DelayedStream  loopback TCP with a per-direction write delay
//                  (separated containers behind a virtual bridge)
//   DirectCapture  I/Q tapped from the eCPRI stream, Control over loopback TCP
//                  (smart NIC inline between RU and RAN)

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dapp/control.hpp"
#include "dapp/e3.hpp"
#include "dapp/ecpri.hpp"
#include "dapp/ran_sim.hpp"
#include "dapp/stream.hpp"
#include "dapp/workloads.hpp"

namespace dapp::runtime {

inline constexpr std::int64_t kDefaultDeadlineNs = 10'000'000;

enum class TransportKind { InProcess, LocalStream, DelayedStream, DirectCapture };

const char* to_string(TransportKind kind);
/// Accepts "in_process", "local_stream", "delayed_stream", "direct_capture".
std::optional<TransportKind> parse_transport_kind(std::string_view name);

struct TransportSpec {
  TransportKind kind = TransportKind::InProcess;
  double delay_ms = 0.0;  // per direction; DelayedStream (and DirectCapture's control path)
  friend bool operator==(const TransportSpec&, const TransportSpec&) = default;
};

struct PhaseLatencyRecord {
  std::uint32_t instance_id = 0;
  std::uint32_t seq = 0;
  std::int64_t p1_collection_ns = 0;
  std::int64_t p2_processing_ns = 0;
  std::int64_t p3_create_control_ns = 0;
  std::int64_t p4_deliver_ns = 0;
  std::int64_t rtt_ns = 0;
  std::int64_t total_ns = 0;
  std::int64_t deadline_ns = kDefaultDeadlineNs;
  bool violated = false;
  std::uint64_t start_ns = 0;  // monotonic time at which P1 began
  ControlDecision decision;

  /// Fills total_ns and violated from the components.
  static PhaseLatencyRecord make(std::uint32_t instance_id, std::uint32_t seq, std::int64_t p1,
                                 std::int64_t p2, std::int64_t p3, std::int64_t p4,
                                 std::int64_t rtt, std::int64_t deadline);
};

// ---------------------------------------------------------------------------
// Loop building blocks

struct SourcedSlot {
  IQBuffer samples;
  std::uint32_t seq = 0;
};

/// Where the dApp's I/Q comes from.
class SlotSource {
 public:
  virtual ~SlotSource() = default;
  /// Blocks until collect() would not block.
  virtual bool wait(std::chrono::nanoseconds timeout) = 0;
  /// When the next message reached the dApp's endpoint, if the transport knows.
  virtual std::optional<std::uint64_t> arrival_ns() = 0;
  /// Receive and decode one slot. nullopt when the transport is closed.
  /// Throws e3::DecodeError for a malformed message body (slot skipped).
  virtual std::optional<SourcedSlot> collect() = 0;
};

/// E3 Indication messages on a session stream.
class IndicationSource final : public SlotSource {
 public:
  IndicationSource(ByteStream& stream, e3::Session& session) : stream_(stream), session_(session) {}
  bool wait(std::chrono::nanoseconds timeout) override { return stream_.wait_readable(timeout); }
  std::optional<std::uint64_t> arrival_ns() override { return stream_.arrival_ns(); }
  std::optional<SourcedSlot> collect() override;

 private:
  ByteStream& stream_;
  e3::Session& session_;
};

/// eCPRI direct capture. The 16-bit seq_id is unwrapped to a 32-bit
/// slot sequence number for the Control path.
class CaptureSlotSource final : public SlotSource {
 public:
  CaptureSlotSource(ByteStream& frames, std::uint16_t pc_id) : capture_(frames, pc_id) {}
  bool wait(std::chrono::nanoseconds timeout) override { return capture_.wait(timeout); }
  std::optional<std::uint64_t> arrival_ns() override { return capture_.arrival_ns(); }
  std::optional<SourcedSlot> collect() override;
  const ecpri::CaptureStats& stats() const { return capture_.stats(); }

 private:
  ecpri::CaptureSource capture_;
  std::optional<std::uint32_t> last_seq_;
};

/// E3 Control path. Tracks the channel the RAN is believed to be on.
class ControlSink {
 public:
  ControlSink(ByteStream& stream, e3::Session& session, ChannelContext channel)
      : stream_(stream), session_(session), channel_(channel) {}

  /// P3: construct the decision and encode the Control message.
  const std::vector<std::uint8_t>& prepare(std::uint32_t seq, const workloads::Detection& d);
  /// P4: write the prepared message.
  void deliver();

  const ControlDecision& last_decision() const { return last_.decision; }

 private:
  ByteStream& stream_;
  e3::Session& session_;
  ChannelContext channel_;
  e3::ControlMessage last_;
  std::vector<std::uint8_t> encoded_;
};

struct LoopSpec {
  std::uint32_t instance_id = 0;
  std::int64_t deadline_ns = kDefaultDeadlineNs;
  std::uint32_t slots = 300;
  std::int64_t rtt_ns = 0;
  // Time phases on the thread's CPU clock, as if it had a core to itself.
  // Used for offloaded workers emulated on a shared host.
  bool own_cpu_clock = false;
};

struct LoopOutcome {
  std::vector<PhaseLatencyRecord> records;
  std::uint64_t skipped_slots = 0;  // decode errors
  std::string error;                // protocol violation or transport failure, if any
};

using RecordCallback = std::function<void(const PhaseLatencyRecord&)>;

/// Runs until `slots` records exist or the source closes.
LoopOutcome run_closed_loop(SlotSource& source, const workloads::Workload& dapp, ControlSink& sink,
                            const LoopSpec& spec, const RecordCallback& on_record = {});

struct SetupOutcome {
  bool accepted = false;
  std::uint8_t reason_code = 0;
  std::int64_t rtt_ns = 0;  // SetupRequest write -> SetupResponse decoded
};

/// dApp side of the E3AP handshake. The request/response exchange doubles as
/// the echo that measures the transport round trip charged to every record.
SetupOutcome establish_session(ByteStream& stream, e3::Session& session,
                               const e3::SetupRequest& request);

inline constexpr int kRttProbes = 33;

/// Transport calibration before the session starts: `probes` 8-byte echoes,
/// returns the median round trip. The peer runs serve_rtt_probe.
std::int64_t probe_rtt(ByteStream& stream, int probes = kRttProbes);
void serve_rtt_probe(ByteStream& stream, int probes = kRttProbes);

// ---------------------------------------------------------------------------
// Fleets

struct InstanceSpec {
  e3::DappKind dapp_kind = e3::DappKind::Ebs;
  TransportSpec transport;
  std::optional<std::vector<int>> pinned_cores;
  std::int64_t deadline_ns = kDefaultDeadlineNs;
  std::uint32_t slots = 300;
  /// Emulates execution off the host (smart NIC cores): with pinned_cores the
  /// worker is pinned there, otherwise it runs at idle scheduling priority so
  /// it only takes cycles host-resident dApps leave unused.
  bool offloaded = false;
  /// Slot k of this instance starts at fleet t0 + start_offset_ns + k * period;
  /// staggering keeps instances of a fleet from competing for the CPU.
  std::int64_t start_offset_ns = 0;
  /// Instances with the same seed stream see identical slot data; defaults to
  /// the instance index.
  std::optional<std::uint32_t> seed_stream;
};

/// Settings shared by every instance of one experiment.
struct FleetConfig {
  std::uint64_t seed = 1;
  ransim::ChannelState channel;  // rng_seed is derived per instance from `seed`
  double period_ms = 10.0;
  workloads::WorkloadConfig workload;
  e3::AuthToken token{};
  /// Token presented by the dApps; defaults to `token` (tests override it).
  std::optional<e3::AuthToken> dapp_token;
};

/// Cores this process may run on (affinity mask), at least 1.
unsigned available_cores();

/// Simulator seed of instance `index`, independent of its transport.
std::uint64_t instance_seed(std::uint64_t fleet_seed, std::uint32_t index);

struct InstanceResult {
  std::uint32_t instance_id = 0;
  InstanceSpec spec;
  bool setup_accepted = false;
  std::uint8_t reason_code = 0;
  std::int64_t rtt_ns = 0;        // echo median, charged to every record
  std::int64_t setup_rtt_ns = 0;  // SetupRequest -> SetupResponse
  bool affinity_requested = false;
  bool affinity_applied = false;
  std::string affinity_note;
  std::string placement_note;  // offloaded instances: how off-host execution was emulated
  std::uint64_t skipped_slots = 0;
  ransim::GroundTruthLog ground_truth;
  ecpri::CaptureStats capture;
  std::string error;
};

struct ExperimentResult {
  std::vector<PhaseLatencyRecord> records;  // collector arrival order
  std::vector<InstanceResult> instances;
  std::uint64_t wall_ns = 0;
};

struct ResourceSample {
  std::uint64_t timestamp_ns = 0;
  std::vector<std::optional<double>> instance_utilization;  // gaps as nullopt
  double host_utilization = 0.0;                            // process CPU / wall
};

class ExperimentHandle {
 public:
  ExperimentHandle(std::vector<InstanceSpec> specs, const FleetConfig& config);
  ~ExperimentHandle();
  ExperimentHandle(const ExperimentHandle&) = delete;
  ExperimentHandle& operator=(const ExperimentHandle&) = delete;

  bool finished() const;
  std::size_t instance_count() const;
  /// Thread CPU time of each instance's dApp worker, as last published.
  std::vector<std::optional<std::uint64_t>> instance_cpu_ns() const;

  /// Joins every worker and the collector.
  ExperimentResult wait();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// One dApp worker and one simulator per spec; records reach a single
/// collector through a queue. Pinning is best effort (see InstanceResult).
std::unique_ptr<ExperimentHandle> spawn_instances(std::vector<InstanceSpec> specs,
                                                  const FleetConfig& config);

/// Samples CPU utilization every `interval` until the experiment finishes.
std::vector<ResourceSample> sample_resources(const ExperimentHandle& handle,
                                             std::chrono::nanoseconds interval);

/// Convenience: spawn, wait, return.
ExperimentResult run_fleet(std::vector<InstanceSpec> specs, const FleetConfig& config);

}  // namespace dapp::runtime

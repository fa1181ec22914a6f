#pragma once

// Scenario files, experiment execution, result bundles and statistics.
//
// Bundle layout (one directory per run of a scenario):
//   records.csv          instance_id,seq,p1_ns,p2_ns,p3_ns,p4_ns,rtt_ns,total_ns,violated
//   verdicts.csv         instance_id,seq,verdict,action,target_channel
//   ground_truth_<i>.csv slot_index,channel,occupied,verdict,action
//   resources.csv        timestamp_ns,host_utilization,instance_<i>...
//   metadata.json

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dapp/runtime.hpp"

namespace dapp::bench {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line, std::string field)
      : std::runtime_error(what), line_(line), field_(std::move(field)) {}
  std::size_t line() const { return line_; }  // 0 when unknown
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptyInput : public std::invalid_argument {
 public:
  EmptyInput() : std::invalid_argument("no records") {}
};

class UnknownKind : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Scenario

struct InterfererConfig {
  std::optional<std::uint8_t> channel = 0;  // null: no interferer
  std::uint32_t bin = 37;
  double amplitude = 1.0;
  double phase = 0.0;
  friend bool operator==(const InterfererConfig&, const InterfererConfig&) = default;
};

struct SimulatorConfig {
  double noise_sigma = 0.01;
  InterfererConfig interferer;
  std::uint8_t num_channels = 4;
  std::uint8_t initial_channel = 0;
  double period_ms = 10.0;
  std::uint32_t samples = kDefaultSlotSamples;
  friend bool operator==(const SimulatorConfig&, const SimulatorConfig&) = default;
};

struct WorkloadSettings {
  double ebs_threshold = 0.05;
  double fft_bin_threshold = 0.1;
  std::uint64_t model_seed = 1;
  friend bool operator==(const WorkloadSettings&, const WorkloadSettings&) = default;
};

struct InstanceGroup {
  e3::DappKind kind = e3::DappKind::Ebs;
  std::uint32_t count = 1;
  /// When set, count = max(1, floor(available_cores * count_per_core)).
  std::optional<double> count_per_core;
  runtime::TransportSpec transport;
  std::optional<std::vector<int>> pinned_cores;
  std::optional<std::int64_t> deadline_ns;  // default 10 ms, or the calibrated value
  std::uint32_t slots = 300;
  bool offloaded = false;  // direct_capture only; see runtime::InstanceSpec
  double start_offset_ms = 0.0;
  std::optional<std::uint32_t> seed_stream;  // applies to every instance of the group
  friend bool operator==(const InstanceGroup&, const InstanceGroup&) = default;
};

struct RunSpec {
  std::string label;
  std::optional<double> x;  // independent variable of a sweep
  std::vector<InstanceGroup> instances;
  friend bool operator==(const RunSpec&, const RunSpec&) = default;
};

/// Runs one instance first and sets the deadline of every group without an
/// explicit one to factor x its p99 total latency.
struct DeadlineCalibration {
  e3::DappKind kind = e3::DappKind::Fcn;
  runtime::TransportSpec transport{runtime::TransportKind::LocalStream, 0.0};
  std::uint32_t slots = 300;
  double factor = 2.0;
  friend bool operator==(const DeadlineCalibration&, const DeadlineCalibration&) = default;
};

struct Scenario {
  std::string name;
  std::uint64_t seed = 1;
  SimulatorConfig simulator;
  WorkloadSettings workloads;
  std::optional<DeadlineCalibration> calibration;
  double resource_interval_ms = 1000.0;
  bool containerize = false;  // hint for external wrappers, not acted on
  /// Each run executes in `rounds` interleaved parts of slots/rounds slots.
  std::uint32_t rounds = 1;
  std::vector<RunSpec> runs;
  std::string output = "out";
  friend bool operator==(const Scenario&, const Scenario&) = default;
};

/// JSON text -> Scenario with defaults filled. Throws ParseError, ValidationError.
Scenario parse_scenario(const std::string& text);
Scenario load_scenario(const std::filesystem::path& path);
std::string serialize_scenario(const Scenario& scenario);
/// Throws ValidationError naming the first violated invariant.
void validate(const Scenario& scenario);

/// Expands a run into per-instance specs (count_per_core resolved).
std::vector<runtime::InstanceSpec> expand_instances(const RunSpec& run, unsigned cores,
                                                    std::int64_t default_deadline_ns);

runtime::FleetConfig fleet_config(const Scenario& scenario);

// ---------------------------------------------------------------------------
// Statistics

struct SummaryStats {
  std::size_t count = 0;
  double mean_ns = 0;
  std::int64_t min_ns = 0;
  std::int64_t p50_ns = 0;
  std::int64_t p95_ns = 0;
  std::int64_t p99_ns = 0;
  std::int64_t max_ns = 0;
  std::size_t violated = 0;
  double violation_rate = 0;
  double mean_p1_ns = 0, mean_p2_ns = 0, mean_p3_ns = 0, mean_p4_ns = 0, mean_rtt_ns = 0;
};

/// Nearest rank: the ceil(pct/100 * n)-th smallest value (1-indexed).
std::int64_t nearest_rank(std::span<const std::int64_t> sorted, unsigned pct);

SummaryStats summarize(std::span<const runtime::PhaseLatencyRecord> records);

struct CdfPoint {
  std::int64_t latency_ns = 0;
  double fraction = 0;
};

std::vector<CdfPoint> cdf_points(std::span<const runtime::PhaseLatencyRecord> records);

struct Deltas {
  double mean_pct = 0;
  double p95_pct = 0;
  double max_pct = 0;
  double violation_pp = 0;  // percentage points
};

/// (B - A) / A * 100 for latencies, B - A in points for the violation rate.
Deltas compare(std::span<const runtime::PhaseLatencyRecord> a, std::span<const runtime::PhaseLatencyRecord> b);

// ---------------------------------------------------------------------------
// Files

void write_records_csv(std::ostream& out, std::span<const runtime::PhaseLatencyRecord> records);
/// Throws ParseError for malformed rows.
std::vector<runtime::PhaseLatencyRecord> read_records_csv(std::istream& in);
/// Accepts a records.csv file or a bundle directory containing one.
std::vector<runtime::PhaseLatencyRecord> load_records(const std::filesystem::path& path);

/// Sorted by (instance_id, seq).
void write_verdicts_csv(std::ostream& out, std::span<const runtime::PhaseLatencyRecord> records);

void write_resources_csv(std::ostream& out, std::span<const runtime::ResourceSample> samples,
                         std::size_t instances);

/// Records of host-resident (not offloaded) instances of a bundle, per its metadata.
std::vector<runtime::PhaseLatencyRecord> load_host_records(const std::filesystem::path& bundle);

enum class PlotKind { Cdf, PhaseBars, Sweep };
/// "cdf", "phase-bars", "sweep"; throws UnknownKind.
PlotKind parse_plot_kind(const std::string& name);

/// cdf: latency_ms,fraction (bundle dir or records.csv)
/// phase-bars: group,p1_ns,p2_ns,p3_ns,p4_ns,rtt_ns,total_ns (bundle dir; one
///   row per dApp kind plus "all")
/// sweep: x,label,count,mean_ms,p95_ms,max_ms,violation_rate,host_count,
///   host_mean_ms,host_p95_ms,host_max_ms,host_violation_rate (scenario output
///   dir holding one bundle per run; rows ordered by x; host_* columns cover
///   instances that are not offloaded and are empty when there are none)
void emit_plot_data(const std::filesystem::path& bundle, PlotKind kind, std::ostream& out);

// ---------------------------------------------------------------------------
// Running

struct RunOptions {
  std::optional<std::filesystem::path> out_dir;  // overrides scenario.output
  std::optional<std::uint64_t> seed;             // overrides scenario.seed
  std::ostream* log = nullptr;                   // progress and warnings
};

struct BundleInfo {
  std::string label;
  std::optional<double> x;
  std::filesystem::path path;
  SummaryStats stats;
  std::optional<SummaryStats> host_stats;  // instances not offloaded
  std::vector<std::string> warnings;
};

/// Runs every RunSpec in order and writes one bundle per run under
/// <out_dir>/<scenario.name>/<label>/. Violations are data, never errors.
std::vector<BundleInfo> run_experiment(const Scenario& scenario, const RunOptions& options = {});

}  // namespace dapp::bench

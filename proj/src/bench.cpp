#include "dapp/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dapp::bench {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---- scenario parsing ------------------------------------------------------

[[noreturn]] void field_error(const std::string& field, const std::string& msg) {
  throw ParseError(field + ": " + msg, 0, field);
}

const json& require_object(const json& j, const std::string& field) {
  if (!j.is_object()) field_error(field, "expected an object");
  return j;
}

void reject_unknown(const json& obj, const std::string& field, std::initializer_list<const char*> known) {
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      field_error(field.empty() ? key : field + "." + key, "unknown key");
  }
}

std::string join(const std::string& parent, const std::string& key) {
  return parent.empty() ? key : parent + "." + key;
}

template <class T>
T get_number(const json& obj, const std::string& parent, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  const std::string field = join(parent, key);
  if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) field_error(field, "expected a number");
    return v.get<T>();
  } else {
    if (!v.is_number_integer()) field_error(field, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_unsigned()) {
        const auto u = v.get<std::uint64_t>();
        if (u > std::numeric_limits<T>::max()) field_error(field, "out of range");
        return static_cast<T>(u);
      }
      field_error(field, "must be non-negative");
    } else {
      const auto s = v.get<std::int64_t>();
      if (s < std::numeric_limits<T>::min() || s > std::numeric_limits<T>::max()) field_error(field, "out of range");
      return static_cast<T>(s);
    }
  }
}

std::string get_string(const json& obj, const std::string& parent, const char* key, std::string fallback) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_string()) field_error(join(parent, key), "expected a string");
  return v.get<std::string>();
}

bool get_bool(const json& obj, const std::string& parent, const char* key, bool fallback) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_boolean()) field_error(join(parent, key), "expected true or false");
  return v.get<bool>();
}

e3::DappKind parse_kind_field(const json& obj, const std::string& parent) {
  const std::string field = join(parent, "kind");
  if (!obj.contains("kind")) field_error(field, "missing");
  const auto name = get_string(obj, parent, "kind", "");
  const auto kind = e3::parse_dapp_kind(name);
  if (!kind) field_error(field, "unknown dApp kind '" + name + "'");
  return *kind;
}

runtime::TransportSpec parse_transport(const json& obj, const std::string& parent,
                                       runtime::TransportSpec fallback) {
  runtime::TransportSpec t = fallback;
  if (obj.contains("transport")) {
    const auto name = get_string(obj, parent, "transport", "");
    const auto kind = runtime::parse_transport_kind(name);
    if (!kind) field_error(join(parent, "transport"), "unknown transport '" + name + "'");
    t.kind = *kind;
  }
  t.delay_ms = get_number<double>(obj, parent, "delay_ms", t.delay_ms);
  return t;
}

InstanceGroup parse_group(const json& j, const std::string& field) {
  require_object(j, field);
  reject_unknown(j, field,
                 {"kind", "count", "count_per_core", "transport", "delay_ms", "pinned_cores", "deadline_ns", "slots",
                  "offloaded", "start_offset_ms", "seed_stream"});
  InstanceGroup g;
  g.kind = parse_kind_field(j, field);
  g.count = get_number<std::uint32_t>(j, field, "count", 1);
  if (j.contains("count_per_core")) g.count_per_core = get_number<double>(j, field, "count_per_core", 0.0);
  g.transport = parse_transport(j, field, {});
  if (j.contains("pinned_cores")) {
    const auto& arr = j.at("pinned_cores");
    if (!arr.is_array()) field_error(field + ".pinned_cores", "expected an array of core indices");
    std::vector<int> cores;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      if (!arr[i].is_number_integer())
        field_error(field + ".pinned_cores[" + std::to_string(i) + "]", "expected an integer");
      cores.push_back(arr[i].get<int>());
    }
    g.pinned_cores = std::move(cores);
  }
  if (j.contains("deadline_ns")) g.deadline_ns = get_number<std::int64_t>(j, field, "deadline_ns", 0);
  g.slots = get_number<std::uint32_t>(j, field, "slots", 300);
  g.offloaded = get_bool(j, field, "offloaded", false);
  g.start_offset_ms = get_number<double>(j, field, "start_offset_ms", 0.0);
  if (j.contains("seed_stream")) g.seed_stream = get_number<std::uint32_t>(j, field, "seed_stream", 0);
  return g;
}

std::vector<InstanceGroup> parse_groups(const json& j, const std::string& field) {
  if (!j.is_array()) field_error(field, "expected an array");
  std::vector<InstanceGroup> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(parse_group(j[i], field + "[" + std::to_string(i) + "]"));
  return out;
}

Scenario from_json(const json& j) {
  require_object(j, "<root>");
  reject_unknown(j, "", {"name", "seed", "simulator", "workloads", "calibration", "resource_interval_ms",
                         "containerize", "runs", "instances", "output", "rounds"});
  Scenario s;
  if (!j.contains("name")) field_error("name", "missing");
  s.name = get_string(j, "", "name", "");
  s.seed = get_number<std::uint64_t>(j, "", "seed", 1);
  s.output = get_string(j, "", "output", s.output);
  s.resource_interval_ms = get_number<double>(j, "", "resource_interval_ms", s.resource_interval_ms);
  s.containerize = get_bool(j, "", "containerize", false);
  s.rounds = get_number<std::uint32_t>(j, "", "rounds", 1);

  if (j.contains("simulator")) {
    const auto& sim = require_object(j.at("simulator"), "simulator");
    reject_unknown(sim, "simulator",
                   {"noise_sigma", "interferer", "num_channels", "initial_channel", "period_ms", "samples"});
    auto& c = s.simulator;
    c.noise_sigma = get_number<double>(sim, "simulator", "noise_sigma", c.noise_sigma);
    c.num_channels = get_number<std::uint8_t>(sim, "simulator", "num_channels", c.num_channels);
    c.initial_channel = get_number<std::uint8_t>(sim, "simulator", "initial_channel", c.initial_channel);
    c.period_ms = get_number<double>(sim, "simulator", "period_ms", c.period_ms);
    c.samples = get_number<std::uint32_t>(sim, "simulator", "samples", c.samples);
    if (sim.contains("interferer")) {
      const auto& itf = sim.at("interferer");
      if (itf.is_null()) {
        c.interferer.channel.reset();
      } else {
        require_object(itf, "simulator.interferer");
        reject_unknown(itf, "simulator.interferer", {"channel", "bin", "amplitude", "phase"});
        auto& i = c.interferer;
        if (itf.contains("channel")) {
          if (itf.at("channel").is_null()) i.channel.reset();
          else i.channel = get_number<std::uint8_t>(itf, "simulator.interferer", "channel", 0);
        }
        i.bin = get_number<std::uint32_t>(itf, "simulator.interferer", "bin", i.bin);
        i.amplitude = get_number<double>(itf, "simulator.interferer", "amplitude", i.amplitude);
        i.phase = get_number<double>(itf, "simulator.interferer", "phase", i.phase);
      }
    }
  }

  if (j.contains("workloads")) {
    const auto& w = require_object(j.at("workloads"), "workloads");
    reject_unknown(w, "workloads", {"ebs_threshold", "fft_bin_threshold", "model_seed"});
    s.workloads.ebs_threshold = get_number<double>(w, "workloads", "ebs_threshold", s.workloads.ebs_threshold);
    s.workloads.fft_bin_threshold =
        get_number<double>(w, "workloads", "fft_bin_threshold", s.workloads.fft_bin_threshold);
    s.workloads.model_seed = get_number<std::uint64_t>(w, "workloads", "model_seed", s.workloads.model_seed);
  }

  if (j.contains("calibration") && !j.at("calibration").is_null()) {
    const auto& c = require_object(j.at("calibration"), "calibration");
    reject_unknown(c, "calibration", {"kind", "transport", "delay_ms", "slots", "factor"});
    DeadlineCalibration cal;
    cal.kind = parse_kind_field(c, "calibration");
    cal.transport = parse_transport(c, "calibration", cal.transport);
    cal.slots = get_number<std::uint32_t>(c, "calibration", "slots", cal.slots);
    cal.factor = get_number<double>(c, "calibration", "factor", cal.factor);
    s.calibration = cal;
  }

  if (j.contains("runs") && j.contains("instances")) field_error("instances", "give either runs or instances");
  if (j.contains("instances")) {
    s.runs.push_back({"default", std::nullopt, parse_groups(j.at("instances"), "instances")});
  } else if (j.contains("runs")) {
    const auto& runs = j.at("runs");
    if (!runs.is_array()) field_error("runs", "expected an array");
    for (std::size_t r = 0; r < runs.size(); ++r) {
      const std::string field = "runs[" + std::to_string(r) + "]";
      require_object(runs[r], field);
      reject_unknown(runs[r], field, {"label", "x", "instances"});
      RunSpec run;
      if (!runs[r].contains("label")) field_error(field + ".label", "missing");
      run.label = get_string(runs[r], field, "label", "");
      if (runs[r].contains("x")) run.x = get_number<double>(runs[r], field, "x", 0.0);
      if (!runs[r].contains("instances")) field_error(field + ".instances", "missing");
      run.instances = parse_groups(runs[r].at("instances"), field + ".instances");
      s.runs.push_back(std::move(run));
    }
  } else {
    field_error("instances", "missing (give instances or runs)");
  }
  return s;
}

json transport_json(const runtime::TransportSpec& t, json& into) {
  into["transport"] = runtime::to_string(t.kind);
  if (t.delay_ms != 0.0) into["delay_ms"] = t.delay_ms;
  return into;
}

json to_json(const Scenario& s) {
  json j;
  j["name"] = s.name;
  j["seed"] = s.seed;
  j["output"] = s.output;
  j["resource_interval_ms"] = s.resource_interval_ms;
  if (s.containerize) j["containerize"] = true;
  if (s.rounds != 1) j["rounds"] = s.rounds;
  const auto& c = s.simulator;
  json itf = c.interferer.channel ? json{{"channel", *c.interferer.channel}} : json{{"channel", nullptr}};
  itf["bin"] = c.interferer.bin;
  itf["amplitude"] = c.interferer.amplitude;
  itf["phase"] = c.interferer.phase;
  j["simulator"] = {{"noise_sigma", c.noise_sigma},   {"interferer", itf},       {"num_channels", c.num_channels},
                    {"initial_channel", c.initial_channel}, {"period_ms", c.period_ms}, {"samples", c.samples}};
  j["workloads"] = {{"ebs_threshold", s.workloads.ebs_threshold},
                    {"fft_bin_threshold", s.workloads.fft_bin_threshold},
                    {"model_seed", s.workloads.model_seed}};
  if (s.calibration) {
    json cal{{"kind", e3::to_string(s.calibration->kind)},
             {"slots", s.calibration->slots},
             {"factor", s.calibration->factor}};
    transport_json(s.calibration->transport, cal);
    j["calibration"] = cal;
  }
  json runs = json::array();
  for (const auto& r : s.runs) {
    json run{{"label", r.label}};
    if (r.x) run["x"] = *r.x;
    json groups = json::array();
    for (const auto& g : r.instances) {
      json gj{{"kind", e3::to_string(g.kind)}, {"count", g.count}, {"slots", g.slots}};
      if (g.count_per_core) gj["count_per_core"] = *g.count_per_core;
      transport_json(g.transport, gj);
      if (g.pinned_cores) gj["pinned_cores"] = *g.pinned_cores;
      if (g.deadline_ns) gj["deadline_ns"] = *g.deadline_ns;
      if (g.offloaded) gj["offloaded"] = true;
      if (g.start_offset_ms != 0.0) gj["start_offset_ms"] = g.start_offset_ms;
      if (g.seed_stream) gj["seed_stream"] = *g.seed_stream;
      groups.push_back(gj);
    }
    run["instances"] = groups;
    runs.push_back(run);
  }
  j["runs"] = runs;
  return j;
}

bool safe_path_component(const std::string& s) {
  if (s.empty() || s == "." || s == "..") return false;
  return std::all_of(s.begin(), s.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.';
  });
}

void check(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

void validate_transport(const runtime::TransportSpec& t, const std::string& field) {
  check(std::isfinite(t.delay_ms) && t.delay_ms >= 0.0, field + ".delay_ms must be >= 0");
  check(t.delay_ms == 0.0 || t.kind == runtime::TransportKind::DelayedStream ||
            t.kind == runtime::TransportKind::DirectCapture,
        field + ".delay_ms only applies to delayed_stream and direct_capture");
}

}  // namespace

void validate(const Scenario& s) {
  check(safe_path_component(s.name), "name must be a non-empty file-name-safe string");
  const auto& c = s.simulator;
  check(std::isfinite(c.noise_sigma) && c.noise_sigma >= 0.0, "simulator.noise_sigma must be >= 0");
  check(c.num_channels >= 1, "simulator.num_channels must be >= 1");
  check(c.initial_channel < c.num_channels, "simulator.initial_channel must be < num_channels");
  check(!c.interferer.channel || *c.interferer.channel < c.num_channels,
        "simulator.interferer.channel must be < num_channels");
  check(c.samples >= 1, "simulator.samples must be >= 1");
  check(c.interferer.bin < c.samples, "simulator.interferer.bin must be < samples");
  check(std::isfinite(c.interferer.amplitude) && c.interferer.amplitude >= 0.0,
        "simulator.interferer.amplitude must be >= 0");
  check(std::isfinite(c.interferer.phase), "simulator.interferer.phase must be finite");
  check(std::isfinite(c.period_ms) && c.period_ms > 0.0, "simulator.period_ms must be > 0");
  check(std::isfinite(s.workloads.ebs_threshold) && s.workloads.ebs_threshold >= 0.0,
        "workloads.ebs_threshold must be >= 0");
  check(std::isfinite(s.workloads.fft_bin_threshold) && s.workloads.fft_bin_threshold >= 0.0,
        "workloads.fft_bin_threshold must be >= 0");
  check(std::isfinite(s.resource_interval_ms) && s.resource_interval_ms > 0.0, "resource_interval_ms must be > 0");
  check(!s.output.empty(), "output must be non-empty");
  check(s.rounds >= 1, "rounds must be >= 1");
  if (s.calibration) {
    check(s.calibration->slots >= 1, "calibration.slots must be >= 1");
    check(std::isfinite(s.calibration->factor) && s.calibration->factor > 0.0, "calibration.factor must be > 0");
    validate_transport(s.calibration->transport, "calibration");
  }
  check(!s.runs.empty(), "at least one run is required");
  std::set<std::string> labels;
  for (std::size_t r = 0; r < s.runs.size(); ++r) {
    const auto& run = s.runs[r];
    const std::string rf = "runs[" + std::to_string(r) + "]";
    check(safe_path_component(run.label), rf + ".label must be a non-empty file-name-safe string");
    check(labels.insert(run.label).second, rf + ".label '" + run.label + "' is not unique");
    check(!run.x || std::isfinite(*run.x), rf + ".x must be finite");
    check(!run.instances.empty(), rf + ".instances must be non-empty");
    std::uint64_t total = 0;
    for (std::size_t g = 0; g < run.instances.size(); ++g) {
      const auto& grp = run.instances[g];
      const std::string gf = rf + ".instances[" + std::to_string(g) + "]";
      check(grp.slots >= 1, gf + ".slots must be >= 1");
      check(grp.slots % s.rounds == 0, gf + ".slots must be a multiple of rounds");
      check(grp.count >= 1, gf + ".count must be >= 1");
      check(!grp.count_per_core || (std::isfinite(*grp.count_per_core) && *grp.count_per_core > 0.0),
            gf + ".count_per_core must be > 0");
      check(!grp.deadline_ns || *grp.deadline_ns > 0, gf + ".deadline_ns must be > 0");
      if (grp.pinned_cores) {
        check(!grp.pinned_cores->empty(), gf + ".pinned_cores must be non-empty");
        for (int core : *grp.pinned_cores) check(core >= 0, gf + ".pinned_cores entries must be >= 0");
      }
      validate_transport(grp.transport, gf);
      check(std::isfinite(grp.start_offset_ms) && grp.start_offset_ms >= 0.0,
            gf + ".start_offset_ms must be >= 0");
      check(!grp.offloaded || grp.transport.kind == runtime::TransportKind::DirectCapture,
            gf + ".offloaded requires the direct_capture transport");
      total += grp.count;
    }
    check(total <= 65536, rf + " has more than 65536 instances");
  }
}

Scenario parse_scenario(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    const std::size_t line = 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + upto, '\n'));
    throw ParseError("line " + std::to_string(line) + ": " + e.what(), line, "");
  }
  Scenario s = from_json(j);
  validate(s);
  return s;
}

Scenario load_scenario(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scenario " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

std::string serialize_scenario(const Scenario& scenario) { return to_json(scenario).dump(2) + "\n"; }

std::vector<runtime::InstanceSpec> expand_instances(const RunSpec& run, unsigned cores,
                                                    std::int64_t default_deadline_ns) {
  std::vector<runtime::InstanceSpec> out;
  for (const auto& g : run.instances) {
    std::uint32_t n = g.count;
    if (g.count_per_core)
      n = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::floor(cores * *g.count_per_core)));
    for (std::uint32_t i = 0; i < n; ++i) {
      runtime::InstanceSpec spec;
      spec.dapp_kind = g.kind;
      spec.transport = g.transport;
      spec.pinned_cores = g.pinned_cores;
      spec.deadline_ns = g.deadline_ns.value_or(default_deadline_ns);
      spec.slots = g.slots;
      spec.offloaded = g.offloaded;
      spec.start_offset_ns = static_cast<std::int64_t>(std::llround(g.start_offset_ms * 1e6));
      spec.seed_stream = g.seed_stream;
      out.push_back(spec);
    }
  }
  return out;
}

runtime::FleetConfig fleet_config(const Scenario& s) {
  runtime::FleetConfig f;
  f.seed = s.seed;
  f.period_ms = s.simulator.period_ms;
  f.channel.current_channel = s.simulator.initial_channel;
  f.channel.num_channels = s.simulator.num_channels;
  f.channel.interferer_on_channel = s.simulator.interferer.channel;
  f.channel.interferer = {s.simulator.interferer.bin, s.simulator.interferer.amplitude, s.simulator.interferer.phase};
  f.channel.noise_sigma = s.simulator.noise_sigma;
  f.channel.samples = s.simulator.samples;
  f.workload.ebs.threshold = s.workloads.ebs_threshold;
  f.workload.fft.bin_threshold = s.workloads.fft_bin_threshold;
  f.workload.model_seed = s.workloads.model_seed;
  // token derived from the seed; both ends of every session share it
  std::uint64_t x = s.seed ^ 0xD1B54A32D192ED03ull;
  for (auto& b : f.token) {
    x = x * 6364136223846793005ull + 1442695040888963407ull;
    b = static_cast<std::uint8_t>(x >> 56);
  }
  return f;
}

// ---- statistics ------------------------------------------------------------

std::int64_t nearest_rank(std::span<const std::int64_t> sorted, unsigned pct) {
  if (sorted.empty()) throw EmptyInput();
  const std::size_t n = sorted.size();
  std::size_t rank = (static_cast<std::size_t>(pct) * n + 99) / 100;  // ceil(pct * n / 100)
  rank = std::clamp<std::size_t>(rank, 1, n);
  return sorted[rank - 1];
}

SummaryStats summarize(std::span<const runtime::PhaseLatencyRecord> records) {
  if (records.empty()) throw EmptyInput();
  SummaryStats s;
  s.count = records.size();
  std::vector<std::int64_t> totals;
  totals.reserve(records.size());
  long double sum = 0, p1 = 0, p2 = 0, p3 = 0, p4 = 0, rtt = 0;
  for (const auto& r : records) {
    totals.push_back(r.total_ns);
    sum += r.total_ns;
    p1 += r.p1_collection_ns;
    p2 += r.p2_processing_ns;
    p3 += r.p3_create_control_ns;
    p4 += r.p4_deliver_ns;
    rtt += r.rtt_ns;
    if (r.violated) ++s.violated;
  }
  std::sort(totals.begin(), totals.end());
  const auto n = static_cast<long double>(s.count);
  s.mean_ns = static_cast<double>(sum / n);
  s.mean_p1_ns = static_cast<double>(p1 / n);
  s.mean_p2_ns = static_cast<double>(p2 / n);
  s.mean_p3_ns = static_cast<double>(p3 / n);
  s.mean_p4_ns = static_cast<double>(p4 / n);
  s.mean_rtt_ns = static_cast<double>(rtt / n);
  s.min_ns = totals.front();
  s.p50_ns = nearest_rank(totals, 50);
  s.p95_ns = nearest_rank(totals, 95);
  s.p99_ns = nearest_rank(totals, 99);
  s.max_ns = totals.back();
  s.violation_rate = static_cast<double>(s.violated) / static_cast<double>(s.count);
  return s;
}

std::vector<CdfPoint> cdf_points(std::span<const runtime::PhaseLatencyRecord> records) {
  if (records.empty()) throw EmptyInput();
  std::vector<std::int64_t> totals;
  totals.reserve(records.size());
  for (const auto& r : records) totals.push_back(r.total_ns);
  std::sort(totals.begin(), totals.end());
  std::vector<CdfPoint> out;
  const double n = static_cast<double>(totals.size());
  for (std::size_t i = 0; i < totals.size(); ++i) {
    if (i + 1 < totals.size() && totals[i + 1] == totals[i]) continue;
    out.push_back({totals[i], static_cast<double>(i + 1) / n});
  }
  return out;
}

Deltas compare(std::span<const runtime::PhaseLatencyRecord> a, std::span<const runtime::PhaseLatencyRecord> b) {
  const auto sa = summarize(a);
  const auto sb = summarize(b);
  auto pct = [](double from, double to) { return from == 0.0 ? 0.0 : (to - from) / from * 100.0; };
  return {pct(sa.mean_ns, sb.mean_ns), pct(static_cast<double>(sa.p95_ns), static_cast<double>(sb.p95_ns)),
          pct(static_cast<double>(sa.max_ns), static_cast<double>(sb.max_ns)),
          (sb.violation_rate - sa.violation_rate) * 100.0};
}

// ---- files -------------------------------------------------------------------

namespace {

constexpr const char* kRecordsHeader = "instance_id,seq,p1_ns,p2_ns,p3_ns,p4_ns,rtt_ns,total_ns,violated";

std::string action_of(const ControlDecision& d) {
  return d.channel_change ? "channel_change" : "noop";
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string ms(double ns) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << ns / 1e6;
  return os.str();
}

fs::path records_path(const fs::path& p) { return fs::is_directory(p) ? p / "records.csv" : p; }

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return json::parse(in);
}

}  // namespace

void write_records_csv(std::ostream& out, std::span<const runtime::PhaseLatencyRecord> records) {
  out << kRecordsHeader << '\n';
  for (const auto& r : records)
    out << r.instance_id << ',' << r.seq << ',' << r.p1_collection_ns << ',' << r.p2_processing_ns << ','
        << r.p3_create_control_ns << ',' << r.p4_deliver_ns << ',' << r.rtt_ns << ',' << r.total_ns << ','
        << (r.violated ? 1 : 0) << '\n';
}

std::vector<runtime::PhaseLatencyRecord> read_records_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty records file", 1, "");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kRecordsHeader) throw ParseError("line 1: unexpected header", 1, "header");
  std::vector<runtime::PhaseLatencyRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::int64_t> v;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        v.push_back(std::stoll(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw ParseError("line " + std::to_string(lineno) + ": bad number '" + cell + "'", lineno, "");
      }
    }
    if (v.size() != 9)
      throw ParseError("line " + std::to_string(lineno) + ": expected 9 columns", lineno, "");
    runtime::PhaseLatencyRecord r;
    r.instance_id = static_cast<std::uint32_t>(v[0]);
    r.seq = static_cast<std::uint32_t>(v[1]);
    r.p1_collection_ns = v[2];
    r.p2_processing_ns = v[3];
    r.p3_create_control_ns = v[4];
    r.p4_deliver_ns = v[5];
    r.rtt_ns = v[6];
    r.total_ns = v[7];
    r.violated = v[8] != 0;
    // deadline is not stored; the flag is taken as recorded
    out.push_back(r);
  }
  return out;
}

std::vector<runtime::PhaseLatencyRecord> load_records(const fs::path& path) {
  const auto p = records_path(path);
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return read_records_csv(in);
}

void write_verdicts_csv(std::ostream& out, std::span<const runtime::PhaseLatencyRecord> records) {
  std::vector<const runtime::PhaseLatencyRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) {
    return std::pair(a->instance_id, a->seq) < std::pair(b->instance_id, b->seq);
  });
  out << "instance_id,seq,verdict,action,target_channel\n";
  for (const auto* r : sorted) {
    out << r->instance_id << ',' << r->seq << ',' << to_string(r->decision.verdict) << ','
        << action_of(r->decision) << ',';
    if (r->decision.channel_change) out << static_cast<int>(*r->decision.channel_change);
    out << '\n';
  }
}

void write_resources_csv(std::ostream& out, std::span<const runtime::ResourceSample> samples, std::size_t instances) {
  out << "timestamp_ns,host_utilization";
  for (std::size_t i = 0; i < instances; ++i) out << ",instance_" << i;
  out << '\n';
  out << std::setprecision(6);
  for (const auto& s : samples) {
    out << s.timestamp_ns << ',' << s.host_utilization;
    for (std::size_t i = 0; i < instances; ++i) {
      out << ',';
      if (i < s.instance_utilization.size() && s.instance_utilization[i]) out << *s.instance_utilization[i];
    }
    out << '\n';
  }
}

std::vector<runtime::PhaseLatencyRecord> load_host_records(const fs::path& bundle) {
  const auto meta = read_json(records_path(bundle).parent_path() / "metadata.json");
  std::set<std::uint32_t> offloaded;
  for (const auto& in : meta.at("instances"))
    if (in.value("offloaded", false)) offloaded.insert(in.at("id").get<std::uint32_t>());
  auto records = load_records(bundle);
  std::erase_if(records, [&](const auto& r) { return offloaded.count(r.instance_id) > 0; });
  return records;
}

PlotKind parse_plot_kind(const std::string& name) {
  if (name == "cdf") return PlotKind::Cdf;
  if (name == "phase-bars") return PlotKind::PhaseBars;
  if (name == "sweep") return PlotKind::Sweep;
  throw UnknownKind("unknown plot kind '" + name + "' (cdf, phase-bars, sweep)");
}

void emit_plot_data(const fs::path& bundle, PlotKind kind, std::ostream& out) {
  switch (kind) {
    case PlotKind::Cdf: {
      const auto records = load_records(bundle);
      out << "latency_ms,fraction\n";
      for (const auto& p : cdf_points(records))
        out << ms(static_cast<double>(p.latency_ns)) << ',' << std::setprecision(10) << p.fraction << '\n';
      return;
    }
    case PlotKind::PhaseBars: {
      const auto records = load_records(bundle);
      std::map<std::string, std::vector<runtime::PhaseLatencyRecord>> groups;
      const auto meta_path = records_path(bundle).parent_path() / "metadata.json";
      std::map<std::uint32_t, std::string> kind_of;
      if (fs::exists(meta_path)) {
        const auto meta = read_json(meta_path);
        for (const auto& in : meta.at("instances")) kind_of[in.at("id").get<std::uint32_t>()] = in.at("kind");
      }
      for (const auto& r : records) {
        auto it = kind_of.find(r.instance_id);
        if (it != kind_of.end()) groups[it->second].push_back(r);
      }
      groups["all"] = records;
      out << "group,p1_ns,p2_ns,p3_ns,p4_ns,rtt_ns,total_ns\n" << std::fixed << std::setprecision(3);
      for (const auto& [name, recs] : groups) {
        const auto s = summarize(recs);
        out << name << ',' << s.mean_p1_ns << ',' << s.mean_p2_ns << ',' << s.mean_p3_ns << ',' << s.mean_p4_ns
            << ',' << s.mean_rtt_ns << ',' << s.mean_ns << '\n';
      }
      return;
    }
    case PlotKind::Sweep: {
      struct Row {
        double x;
        std::string label;
        SummaryStats s;
        std::optional<SummaryStats> host;
      };
      std::vector<Row> rows;
      std::size_t position = 0;
      for (const auto& entry : fs::directory_iterator(bundle)) {
        if (!entry.is_directory() || !fs::exists(entry.path() / "metadata.json")) continue;
        const auto meta = read_json(entry.path() / "metadata.json");
        const auto records = load_records(entry.path());
        double x = meta.contains("x") && !meta.at("x").is_null() ? meta.at("x").get<double>()
                                                                  : meta.value("run_index", double(position));
        ++position;
        const auto host_records = load_host_records(entry.path());
        std::optional<SummaryStats> host;
        if (!host_records.empty()) host = summarize(host_records);
        rows.push_back({x, meta.value("label", entry.path().filename().string()), summarize(records), host});
      }
      if (rows.empty()) throw std::runtime_error("no bundles under " + bundle.string());
      std::sort(rows.begin(), rows.end(),
                [](const Row& a, const Row& b) { return std::tie(a.x, a.label) < std::tie(b.x, b.label); });
      out << "x,label,count,mean_ms,p95_ms,max_ms,violation_rate,"
             "host_count,host_mean_ms,host_p95_ms,host_max_ms,host_violation_rate\n";
      for (const auto& r : rows) {
        out << r.x << ',' << r.label << ',' << r.s.count << ',' << ms(r.s.mean_ns) << ','
            << ms(static_cast<double>(r.s.p95_ns)) << ',' << ms(static_cast<double>(r.s.max_ns)) << ','
            << std::setprecision(6) << r.s.violation_rate;
        if (r.host)
          out << ',' << r.host->count << ',' << ms(r.host->mean_ns) << ',' << ms(static_cast<double>(r.host->p95_ns))
              << ',' << ms(static_cast<double>(r.host->max_ns)) << ',' << std::setprecision(6)
              << r.host->violation_rate;
        else
          out << ",0,,,,";
        out << '\n';
      }
      return;
    }
  }
}

// ---- running -----------------------------------------------------------------

namespace {

json stats_json(const SummaryStats& s) {
  return {{"count", s.count},     {"mean_ns", s.mean_ns},       {"p50_ns", s.p50_ns},
          {"p95_ns", s.p95_ns},   {"p99_ns", s.p99_ns},         {"max_ns", s.max_ns},
          {"violated", s.violated}, {"violation_rate", s.violation_rate}, {"mean_p1_ns", s.mean_p1_ns},
          {"mean_p2_ns", s.mean_p2_ns}, {"mean_p3_ns", s.mean_p3_ns}, {"mean_p4_ns", s.mean_p4_ns},
          {"mean_rtt_ns", s.mean_rtt_ns}};
}

std::int64_t calibrate(const Scenario& s, const runtime::FleetConfig& fleet, std::ostream* log) {
  const auto& cal = *s.calibration;
  runtime::InstanceSpec spec;
  spec.dapp_kind = cal.kind;
  spec.transport = cal.transport;
  spec.slots = cal.slots;
  auto result = runtime::run_fleet({spec}, fleet);
  if (result.records.empty()) throw std::runtime_error("calibration run produced no records");
  const auto stats = summarize(result.records);
  const auto deadline = static_cast<std::int64_t>(std::llround(static_cast<double>(stats.p99_ns) * cal.factor));
  if (log)
    *log << "calibration: " << e3::to_string(cal.kind) << " p99 " << ms(static_cast<double>(stats.p99_ns))
         << " ms -> deadline " << ms(static_cast<double>(deadline)) << " ms\n";
  return deadline;
}

// Appends round `round` of a run to the accumulated result; slot and seq
// numbers of later rounds continue after the earlier ones.
void merge_round(runtime::ExperimentResult& acc, runtime::ExperimentResult&& part, std::uint32_t round,
                 const std::vector<runtime::InstanceSpec>& round_specs) {
  for (auto& r : part.records) r.seq += round * round_specs.at(r.instance_id).slots;
  acc.wall_ns += part.wall_ns;
  if (round == 0) {
    acc.records = std::move(part.records);
    acc.instances = std::move(part.instances);
    return;
  }
  acc.records.insert(acc.records.end(), part.records.begin(), part.records.end());
  for (std::size_t i = 0; i < part.instances.size(); ++i) {
    auto& a = acc.instances.at(i);
    const auto& p = part.instances[i];
    const std::uint64_t offset = static_cast<std::uint64_t>(round) * round_specs[i].slots;
    for (const auto& g : p.ground_truth.records()) {
      a.ground_truth.append(g.slot_index + offset, g.channel, g.occupied);
      if (g.decision) a.ground_truth.attach_decision(g.slot_index + offset, *g.decision);
      if (g.control_timed_out) a.ground_truth.mark_timeout(g.slot_index + offset);
    }
    a.ground_truth.late_controls += p.ground_truth.late_controls;
    a.ground_truth.rejected_controls += p.ground_truth.rejected_controls;
    a.skipped_slots += p.skipped_slots;
    a.setup_accepted = a.setup_accepted && p.setup_accepted;
    a.capture.frames_seen += p.capture.frames_seen;
    a.capture.frames_parsed += p.capture.frames_parsed;
    a.capture.frames_skipped += p.capture.frames_skipped;
    a.capture.seq_gaps += p.capture.seq_gaps;
    if (a.error.empty()) a.error = p.error;
  }
}

}  // namespace

std::vector<BundleInfo> run_experiment(const Scenario& scenario, const RunOptions& options) {
  validate(scenario);
  Scenario s = scenario;
  if (options.seed) s.seed = *options.seed;
  const fs::path root = options.out_dir.value_or(fs::path(s.output)) / s.name;
  const unsigned cores = runtime::available_cores();
  const auto fleet = fleet_config(s);

  std::int64_t default_deadline = runtime::kDefaultDeadlineNs;
  std::optional<std::int64_t> calibrated;
  if (s.calibration) {
    calibrated = calibrate(s, fleet, options.log);
    default_deadline = *calibrated;
  }

  // Rounds interleave the runs (run 0, run 1, ..., run 0, run 1, ...) so slow
  // drift of the host affects every run alike; results are merged per run.
  struct Accumulated {
    std::vector<runtime::InstanceSpec> specs;
    runtime::ExperimentResult result;
    std::vector<runtime::ResourceSample> samples;
  };
  std::vector<Accumulated> acc(s.runs.size());
  for (std::size_t i = 0; i < s.runs.size(); ++i) acc[i].specs = expand_instances(s.runs[i], cores, default_deadline);

  const auto interval = std::chrono::nanoseconds(static_cast<std::int64_t>(s.resource_interval_ms * 1e6));
  for (std::uint32_t round = 0; round < s.rounds; ++round) {
    auto round_fleet = fleet;
    if (round > 0) round_fleet.seed = runtime::instance_seed(fleet.seed, 0x10000u + round);
    for (std::size_t i = 0; i < s.runs.size(); ++i) {
      auto specs = acc[i].specs;
      for (auto& spec : specs) spec.slots /= s.rounds;
      if (options.log) {
        *options.log << "run " << s.runs[i].label << ": " << specs.size() << " instance(s)";
        if (s.rounds > 1) *options.log << ", round " << round + 1 << "/" << s.rounds;
        *options.log << '\n';
      }
      auto handle = runtime::spawn_instances(specs, round_fleet);
      auto samples = runtime::sample_resources(*handle, interval);
      merge_round(acc[i].result, handle->wait(), round, specs);
      acc[i].samples.insert(acc[i].samples.end(), samples.begin(), samples.end());
    }
  }

  std::vector<BundleInfo> bundles;
  for (std::size_t run_index = 0; run_index < s.runs.size(); ++run_index) {
    const auto& run = s.runs[run_index];
    auto& result = acc[run_index].result;
    const auto& samples = acc[run_index].samples;
    for (std::size_t i = 0; i < result.instances.size(); ++i) result.instances[i].spec = acc[run_index].specs[i];

    BundleInfo info;
    info.label = run.label;
    info.x = run.x;
    info.path = root / run.label;
    fs::create_directories(info.path);

    std::ostringstream records, verdicts, resources;
    write_records_csv(records, result.records);
    write_verdicts_csv(verdicts, result.records);
    write_resources_csv(resources, samples, result.instances.size());
    write_file(info.path / "records.csv", records.str());
    write_file(info.path / "verdicts.csv", verdicts.str());
    write_file(info.path / "resources.csv", resources.str());

    json instances = json::array();
    for (const auto& in : result.instances) {
      std::ostringstream gt;
      in.ground_truth.write_csv(gt);
      write_file(info.path / ("ground_truth_" + std::to_string(in.instance_id) + ".csv"), gt.str());

      std::size_t timeouts = 0;
      for (const auto& g : in.ground_truth.records()) timeouts += g.control_timed_out ? 1 : 0;
      if (in.affinity_requested && !in.affinity_applied)
        info.warnings.push_back("instance " + std::to_string(in.instance_id) + ": " + in.affinity_note);
      if (!in.setup_accepted)
        info.warnings.push_back("instance " + std::to_string(in.instance_id) + ": setup rejected (reason " +
                                std::to_string(in.reason_code) + ")");
      if (!in.error.empty()) info.warnings.push_back("instance " + std::to_string(in.instance_id) + ": " + in.error);
      if (timeouts > 0)
        info.warnings.push_back("instance " + std::to_string(in.instance_id) + ": " + std::to_string(timeouts) +
                                " control timeout(s)");

      instances.push_back({{"id", in.instance_id},
                           {"kind", e3::to_string(in.spec.dapp_kind)},
                           {"transport", runtime::to_string(in.spec.transport.kind)},
                           {"delay_ms", in.spec.transport.delay_ms},
                           {"deadline_ns", in.spec.deadline_ns},
                           {"slots", in.spec.slots},
                           {"offloaded", in.spec.offloaded},
                           {"start_offset_ns", in.spec.start_offset_ns},
                           {"seed_stream", in.spec.seed_stream.value_or(in.instance_id)},
                           {"placement", in.spec.offloaded ? in.placement_note : std::string("host")},
                           {"setup_accepted", in.setup_accepted},
                           {"rtt_ns", in.rtt_ns},
                           {"setup_rtt_ns", in.setup_rtt_ns},
                           {"affinity", {{"requested", in.affinity_requested},
                                         {"applied", in.affinity_applied},
                                         {"note", in.affinity_note}}},
                           {"skipped_slots", in.skipped_slots},
                           {"control_timeouts", timeouts},
                           {"late_controls", in.ground_truth.late_controls},
                           {"rejected_controls", in.ground_truth.rejected_controls},
                           {"capture", {{"frames_seen", in.capture.frames_seen},
                                        {"frames_parsed", in.capture.frames_parsed},
                                        {"frames_skipped", in.capture.frames_skipped},
                                        {"seq_gaps", in.capture.seq_gaps}}},
                           {"error", in.error}});
    }

    json meta{{"scenario", s.name},
              {"label", run.label},
              {"run_index", run_index},
              {"x", run.x ? json(*run.x) : json(nullptr)},
              {"seed", s.seed},
              {"available_cores", cores},
              {"period_ms", s.simulator.period_ms},
              {"samples", s.simulator.samples},
              {"wall_ns", result.wall_ns},
              {"resource_interval_ms", s.resource_interval_ms},
              {"rounds", s.rounds},
              {"calibrated_deadline_ns", calibrated ? json(*calibrated) : json(nullptr)},
              {"instances", instances},
              {"warnings", info.warnings}};
    if (!result.records.empty()) {
      info.stats = summarize(result.records);
      meta["summary"] = stats_json(info.stats);
      std::vector<runtime::PhaseLatencyRecord> host;
      for (const auto& r : result.records)
        if (!result.instances.at(r.instance_id).spec.offloaded) host.push_back(r);
      if (!host.empty()) {
        info.host_stats = summarize(host);
        meta["host_summary"] = stats_json(*info.host_stats);
      }
    } else {
      info.warnings.push_back("no records");
      meta["summary"] = nullptr;
    }
    write_file(info.path / "metadata.json", meta.dump(2) + "\n");
    if (options.log)
      for (const auto& w : info.warnings) *options.log << "warning: " << w << '\n';
    bundles.push_back(std::move(info));
  }
  return bundles;
}

}  // namespace dapp::bench

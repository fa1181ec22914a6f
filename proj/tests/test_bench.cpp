#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "dapp/bench.hpp"

using namespace dapp;
using namespace dapp::bench;
using runtime::PhaseLatencyRecord;
namespace fs = std::filesystem;

namespace {

std::vector<PhaseLatencyRecord> with_totals(const std::vector<std::int64_t>& totals,
                                            std::int64_t deadline = runtime::kDefaultDeadlineNs) {
  std::vector<PhaseLatencyRecord> out;
  for (std::size_t k = 0; k < totals.size(); ++k)
    out.push_back(PhaseLatencyRecord::make(0, static_cast<std::uint32_t>(k), totals[k], 0, 0, 0, 0, deadline));
  return out;
}

ParseError parse_failure(const std::string& text) {
  try {
    parse_scenario(text);
  } catch (const ParseError& e) {
    return e;
  }
  FAIL("scenario accepted: " << text);
  return ParseError("", 0, "");
}

std::string validation_failure(const std::string& text) {
  try {
    parse_scenario(text);
  } catch (const ValidationError& e) {
    return e.what();
  }
  FAIL("scenario accepted: " << text);
  return {};
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("dapp_bench_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("scenario defaults and round trip") {
  const Scenario s = parse_scenario(R"({"name": "t", "instances": [{"kind": "FFT"}]})");
  CHECK(s.seed == 1);
  CHECK(s.rounds == 1);
  CHECK(s.simulator.period_ms == 10.0);
  CHECK(s.simulator.interferer.channel == std::optional<std::uint8_t>(0));
  REQUIRE(s.runs.size() == 1);
  CHECK(s.runs[0].label == "default");
  REQUIRE(s.runs[0].instances.size() == 1);
  CHECK(s.runs[0].instances[0].kind == e3::DappKind::Fft);
  CHECK(s.runs[0].instances[0].slots == 300);
  CHECK(s.runs[0].instances[0].transport.kind == runtime::TransportKind::InProcess);

  Scenario rich = s;
  rich.name = "rich";
  rich.seed = 99;
  rich.rounds = 3;
  rich.simulator.interferer.channel.reset();
  rich.calibration = DeadlineCalibration{};
  rich.runs[0].x = 2.5;
  auto& g = rich.runs[0].instances[0];
  g.slots = 30;
  g.transport = {runtime::TransportKind::DirectCapture, 0.75};
  g.offloaded = true;
  g.pinned_cores = std::vector<int>{0, 1};
  g.deadline_ns = 5'000'000;
  g.count_per_core = 1.5;
  g.start_offset_ms = 2.0;
  g.seed_stream = 4;
  rich.runs.push_back({"second", 3.0, {InstanceGroup{}}});
  rich.runs[1].instances[0].slots = 30;
  validate(rich);
  const Scenario back = parse_scenario(serialize_scenario(rich));
  CHECK(back == rich);
  CHECK(serialize_scenario(back) == serialize_scenario(rich));
}

TEST_CASE("scenario parse errors name the field or line") {
  CHECK(parse_failure("{\n  \"name\": \"x\",\n  oops\n}").line() == 3);
  CHECK(parse_failure(R"({"instances": [{"kind": "EBS"}]})").field() == "name");
  CHECK(parse_failure(R"({"name": "x", "instances": [{"kind": "CNN"}]})").field() == "instances[0].kind");
  CHECK(parse_failure(R"({"name": "x", "instances": [{"kind": "EBS", "transport": "udp"}]})").field() ==
        "instances[0].transport");
  CHECK(parse_failure(R"({"name": "x", "instances": [{"kind": "EBS", "slots": -3}]})").field() ==
        "instances[0].slots");
  CHECK(parse_failure(R"({"name": "x", "instances": [{"kind": "EBS", "slots": "many"}]})").field() ==
        "instances[0].slots");
  CHECK(parse_failure(R"({"name": "x", "bogus": 1, "instances": [{"kind": "EBS"}]})").field() == "bogus");
  CHECK(parse_failure(R"({"name": "x", "simulator": {"nosie_sigma": 1}, "instances": [{"kind": "EBS"}]})")
            .field() == "simulator.nosie_sigma");
  CHECK(parse_failure(R"({"name": "x"})").field() == "instances");
  CHECK(parse_failure(R"({"name": "x", "runs": [{"instances": []}]})").field() == "runs[0].label");
  CHECK(parse_failure(R"({"name": "x", "runs": [], "instances": []})").field() == "instances");
  CHECK(parse_failure(R"({"name": "x", "simulator": {"num_channels": 300}, "instances": [{"kind": "EBS"}]})")
            .field() == "simulator.num_channels");
}

TEST_CASE("scenario validation") {
  auto with = [](const std::string& extra, const std::string& group = "") {
    return R"({"name": "x", )" + extra + R"("instances": [{"kind": "EBS")" + group + "}]}";
  };
  CHECK(validation_failure(with(R"("simulator": {"period_ms": 0}, )")).find("period_ms") != std::string::npos);
  CHECK(validation_failure(with(R"("simulator": {"num_channels": 2, "initial_channel": 2}, )"))
            .find("initial_channel") != std::string::npos);
  CHECK(validation_failure(with(R"("simulator": {"interferer": {"channel": 4}}, )")).find("interferer.channel") !=
        std::string::npos);
  CHECK(validation_failure(with(R"("simulator": {"interferer": {"bin": 1536}}, )")).find("bin") != std::string::npos);
  CHECK(validation_failure(with(R"("simulator": {"noise_sigma": -1}, )")).find("noise_sigma") != std::string::npos);
  CHECK(validation_failure(with(R"("rounds": 0, )")).find("rounds") != std::string::npos);
  CHECK(validation_failure(with(R"("rounds": 7, )")).find("multiple of rounds") != std::string::npos);
  CHECK(validation_failure(with("", R"(, "slots": 0)")).find("slots") != std::string::npos);
  CHECK(validation_failure(with("", R"(, "count": 0)")).find("count") != std::string::npos);
  CHECK(validation_failure(with("", R"(, "delay_ms": 1)")).find("delay_ms") != std::string::npos);
  CHECK(validation_failure(with("", R"(, "offloaded": true)")).find("offloaded") != std::string::npos);
  CHECK(validation_failure(with("", R"(, "pinned_cores": [])")).find("pinned_cores") != std::string::npos);
  CHECK(validation_failure(with("", R"(, "deadline_ns": 0)")).find("deadline_ns") != std::string::npos);
  CHECK(validation_failure(R"({"name": "../up", "instances": [{"kind": "EBS"}]})").find("name") != std::string::npos);
  CHECK(validation_failure(R"({"name": "x", "runs": [{"label": "a", "instances": [{"kind": "EBS"}]},
                                                     {"label": "a", "instances": [{"kind": "EBS"}]}]})")
            .find("not unique") != std::string::npos);
  CHECK(validation_failure(R"({"name": "x", "runs": [{"label": "a", "instances": []}]})").find("non-empty") !=
        std::string::npos);
  CHECK_NOTHROW(parse_scenario(with(R"("rounds": 5, )")));
}

TEST_CASE("instance expansion") {
  RunSpec run;
  InstanceGroup a;
  a.count = 2;
  a.seed_stream = 3;
  a.start_offset_ms = 1.5;
  InstanceGroup b;
  b.kind = e3::DappKind::Fcn;
  b.count_per_core = 0.5;
  b.deadline_ns = 4;
  run.instances = {a, b};
  for (unsigned cores : {1u, 2u, 7u, 16u}) {
    const auto specs = expand_instances(run, cores, 123);
    REQUIRE(specs.size() == 2 + std::max(1u, cores / 2));
    CHECK(specs[0].seed_stream == std::optional<std::uint32_t>(3));
    CHECK(specs[0].start_offset_ns == 1'500'000);
    CHECK(specs[0].deadline_ns == 123);
    CHECK(specs.back().dapp_kind == e3::DappKind::Fcn);
    CHECK(specs.back().deadline_ns == 4);
  }
}

TEST_CASE("nearest rank") {
  std::vector<std::int64_t> v(10);
  std::iota(v.begin(), v.end(), 1);
  CHECK(nearest_rank(v, 50) == 5);
  CHECK(nearest_rank(v, 95) == 10);
  CHECK(nearest_rank(v, 99) == 10);
  CHECK(nearest_rank(v, 10) == 1);
  CHECK(nearest_rank(v, 11) == 2);
  CHECK(nearest_rank(v, 100) == 10);
  const std::vector<std::int64_t> one{42};
  CHECK(nearest_rank(one, 1) == 42);
  CHECK(nearest_rank(one, 99) == 42);
  std::vector<std::int64_t> hundred(100);
  std::iota(hundred.begin(), hundred.end(), 1);
  for (unsigned p = 1; p <= 100; ++p) CHECK(nearest_rank(hundred, p) == p);
}

TEST_CASE("summary of 1..10 ms") {
  std::vector<std::int64_t> totals;
  for (int k = 10; k >= 1; --k) totals.push_back(k * 1'000'000LL);
  const auto recs = with_totals(totals, 9'500'000);
  const auto s = summarize(recs);
  CHECK(s.count == 10);
  CHECK(s.mean_ns == doctest::Approx(5.5e6));
  CHECK(s.min_ns == 1'000'000);
  CHECK(s.p50_ns == 5'000'000);
  CHECK(s.p95_ns == 10'000'000);
  CHECK(s.p99_ns == 10'000'000);
  CHECK(s.max_ns == 10'000'000);
  CHECK(s.violated == 1);
  CHECK(s.violation_rate == doctest::Approx(0.1));
  CHECK(s.mean_p1_ns == doctest::Approx(5.5e6));
  CHECK(s.mean_p2_ns == 0);
  CHECK_THROWS_AS(summarize({}), EmptyInput);
  CHECK_THROWS_AS(cdf_points({}), EmptyInput);
}

TEST_CASE("summary and cdf against brute force") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<std::int64_t> totals(n);
    for (auto& t : totals) t = static_cast<std::int64_t>(rng() % 50) * 500'000;  // plenty of ties
    const auto recs = with_totals(totals);
    const auto s = summarize(recs);
    auto sorted = totals;
    std::sort(sorted.begin(), sorted.end());
    for (unsigned pct : {50u, 95u, 99u}) {
      // smallest value with at least pct% of samples at or below it
      std::int64_t want = sorted.back();
      for (auto v : sorted) {
        const auto at_or_below = std::count_if(sorted.begin(), sorted.end(), [&](auto u) { return u <= v; });
        if (100 * at_or_below >= static_cast<long>(pct * n)) {
          want = v;
          break;
        }
      }
      CHECK(nearest_rank(sorted, pct) == want);
    }
    CHECK(s.p50_ns <= s.p95_ns);
    CHECK(s.p95_ns <= s.p99_ns);
    CHECK(s.p99_ns <= s.max_ns);
    CHECK(s.min_ns <= s.mean_ns);
    CHECK(s.mean_ns <= s.max_ns);
    CHECK(s.violation_rate ==
          doctest::Approx(static_cast<double>(std::count_if(totals.begin(), totals.end(),
                                                            [](auto t) { return t > runtime::kDefaultDeadlineNs; })) /
                          n));

    const auto cdf = cdf_points(recs);
    CHECK(cdf.back().fraction == doctest::Approx(1.0));
    for (std::size_t k = 0; k < cdf.size(); ++k) {
      if (k > 0) {
        CHECK(cdf[k].latency_ns > cdf[k - 1].latency_ns);
        CHECK(cdf[k].fraction > cdf[k - 1].fraction);
      }
      const auto at_or_below =
          std::count_if(totals.begin(), totals.end(), [&](auto t) { return t <= cdf[k].latency_ns; });
      CHECK(cdf[k].fraction == doctest::Approx(static_cast<double>(at_or_below) / n));
    }
  }
}

TEST_CASE("compare") {
  const auto a = with_totals({2'000'000, 4'000'000}, 3'500'000);
  const auto b = with_totals({3'000'000, 6'000'000}, 2'500'000);
  const auto d = compare(a, b);
  CHECK(d.mean_pct == doctest::Approx(50.0));
  CHECK(d.p95_pct == doctest::Approx(50.0));
  CHECK(d.max_pct == doctest::Approx(50.0));
  CHECK(d.violation_pp == doctest::Approx(50.0));  // 1 of 2 -> 2 of 2
  const auto same = compare(a, a);
  CHECK(same.mean_pct == 0.0);
  CHECK(same.violation_pp == 0.0);
}

TEST_CASE("records csv round trip and errors") {
  std::mt19937_64 rng(2);
  std::vector<PhaseLatencyRecord> recs;
  for (std::uint32_t k = 0; k < 500; ++k) {
    auto part = [&] { return static_cast<std::int64_t>(rng() % 8'000'000); };
    recs.push_back(PhaseLatencyRecord::make(static_cast<std::uint32_t>(rng() % 7), k, part(), part(), part(), part(),
                                            part(), runtime::kDefaultDeadlineNs));
  }
  std::stringstream ss;
  write_records_csv(ss, recs);
  const auto back = read_records_csv(ss);
  REQUIRE(back.size() == recs.size());
  for (std::size_t k = 0; k < recs.size(); ++k) {
    CHECK(back[k].instance_id == recs[k].instance_id);
    CHECK(back[k].seq == recs[k].seq);
    CHECK(back[k].p1_collection_ns == recs[k].p1_collection_ns);
    CHECK(back[k].p4_deliver_ns == recs[k].p4_deliver_ns);
    CHECK(back[k].rtt_ns == recs[k].rtt_ns);
    CHECK(back[k].total_ns == recs[k].total_ns);
    CHECK(back[k].violated == recs[k].violated);
  }

  auto bad = [](const std::string& text) {
    std::istringstream in(text);
    try {
      read_records_csv(in);
    } catch (const ParseError& e) {
      return e.line();
    }
    FAIL("accepted");
    return std::size_t{0};
  };
  const std::string header = "instance_id,seq,p1_ns,p2_ns,p3_ns,p4_ns,rtt_ns,total_ns,violated\n";
  CHECK(bad("") == 1);
  CHECK(bad("id,seq\n") == 1);
  CHECK(bad(header + "0,0,1,1,1,1,1,5,0\n0,1,1,1,x,1,1,5,0\n") == 3);
  CHECK(bad(header + "0,0,1,1,1,1,1\n") == 2);
}

TEST_CASE("verdicts csv is sorted") {
  std::vector<PhaseLatencyRecord> recs;
  for (std::uint32_t id : {2u, 0u, 1u})
    for (std::uint32_t seq : {1u, 0u}) {
      auto r = PhaseLatencyRecord::make(id, seq, 1, 1, 1, 1, 1, 10);
      r.decision = seq == 0 ? ControlDecision::change_to(1, 0.5) : ControlDecision::no_op(0.0);
      recs.push_back(r);
    }
  std::ostringstream out;
  write_verdicts_csv(out, recs);
  const auto lines = lines_of(out.str());
  REQUIRE(lines.size() == 7);
  CHECK(lines[0] == "instance_id,seq,verdict,action,target_channel");
  CHECK(lines[1].rfind("0,0,", 0) == 0);
  CHECK(lines[2].rfind("0,1,", 0) == 0);
  CHECK(lines[6].rfind("2,1,", 0) == 0);
}

TEST_CASE("plot kinds") {
  CHECK(parse_plot_kind("cdf") == PlotKind::Cdf);
  CHECK(parse_plot_kind("phase-bars") == PlotKind::PhaseBars);
  CHECK(parse_plot_kind("sweep") == PlotKind::Sweep);
  CHECK_THROWS_AS(parse_plot_kind("bars"), UnknownKind);
}

TEST_CASE("end to end: bundles, plot data, host records") {
  const auto dir = scratch_dir("e2e");
  Scenario s = parse_scenario(R"({
    "name": "e2e", "seed": 4, "rounds": 2,
    "simulator": {"period_ms": 2},
    "resource_interval_ms": 20,
    "runs": [
      {"label": "a", "x": 2, "instances": [{"kind": "EBS", "slots": 20}, {"kind": "FFT", "slots": 20}]},
      {"label": "b", "x": 1, "instances": [{"kind": "FFT", "slots": 20, "transport": "direct_capture",
                                            "offloaded": true}, {"kind": "EBS", "slots": 20}]}
    ]})");
  std::ostringstream log;
  RunOptions opts;
  opts.out_dir = dir;
  opts.log = &log;
  const auto bundles = run_experiment(s, opts);
  REQUIRE(bundles.size() == 2);
  for (const auto& b : bundles) {
    CHECK(b.stats.count == 40);
    for (const char* f : {"records.csv", "verdicts.csv", "resources.csv", "metadata.json", "ground_truth_0.csv",
                          "ground_truth_1.csv"})
      CHECK_MESSAGE(fs::exists(b.path / f), (b.path / f).string());
    CHECK(load_records(b.path).size() == 40);
    CHECK(load_records(b.path / "records.csv").size() == 40);
  }
  CHECK(bundles[0].path == dir / "e2e" / "a");
  REQUIRE(bundles[1].host_stats.has_value());
  CHECK(bundles[1].host_stats->count == 20);
  CHECK(load_host_records(bundles[1].path).size() == 20);
  CHECK(load_host_records(bundles[0].path).size() == 40);

  std::ostringstream cdf, bars, sweep;
  emit_plot_data(bundles[0].path, PlotKind::Cdf, cdf);
  emit_plot_data(bundles[0].path, PlotKind::PhaseBars, bars);
  emit_plot_data(dir / "e2e", PlotKind::Sweep, sweep);
  const auto cl = lines_of(cdf.str());
  CHECK(cl[0] == "latency_ms,fraction");
  CHECK(cl.back().substr(cl.back().rfind(',') + 1) == "1");
  const auto bl = lines_of(bars.str());
  CHECK(bl[0] == "group,p1_ns,p2_ns,p3_ns,p4_ns,rtt_ns,total_ns");
  CHECK(bl.size() == 4);  // EBS, FFT, all
  const auto sl = lines_of(sweep.str());
  REQUIRE(sl.size() == 3);
  CHECK(sl[0].rfind("x,label,count,mean_ms", 0) == 0);
  CHECK(sl[1].rfind("1,b,40,", 0) == 0);  // ordered by x
  CHECK(sl[2].rfind("2,a,40,", 0) == 0);
  fs::remove_all(dir);
}

TEST_CASE("shipped scenarios parse") {
  const char* env = std::getenv("DAPP_SCENARIO_DIR");
  if (!env) {
    MESSAGE("DAPP_SCENARIO_DIR not set");
    return;
  }
  std::size_t seen = 0;
  for (const auto& entry : fs::directory_iterator(env)) {
    if (entry.path().extension() != ".json") continue;
    CAPTURE(entry.path());
    const Scenario s = load_scenario(entry.path());
    CHECK(parse_scenario(serialize_scenario(s)) == s);
    ++seen;
  }
  CHECK(seen >= 2);
}

// dapp-bench: run scenarios and turn result bundles into statistics and plot data.

#include <cstdlib>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dapp/bench.hpp"

namespace {

using namespace dapp;
using nlohmann::json;

json stats_json(const bench::SummaryStats& s) {
  return {{"count", s.count},
          {"mean_ms", s.mean_ns / 1e6},
          {"p50_ms", s.p50_ns / 1e6},
          {"p95_ms", s.p95_ns / 1e6},
          {"p99_ms", s.p99_ns / 1e6},
          {"max_ms", s.max_ns / 1e6},
          {"violation_rate", s.violation_rate},
          {"mean_p1_ms", s.mean_p1_ns / 1e6},
          {"mean_p2_ms", s.mean_p2_ns / 1e6},
          {"mean_p3_ms", s.mean_p3_ns / 1e6},
          {"mean_p4_ms", s.mean_p4_ns / 1e6},
          {"mean_rtt_ms", s.mean_rtt_ns / 1e6}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dApp latency benchmark"};
  app.require_subcommand(1);

  std::string scenario_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  auto* run = app.add_subcommand("run", "run a scenario and write result bundles");
  run->add_option("scenario", scenario_path, "scenario file (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "override the scenario seed");
  run->add_option("--out-dir", out_dir, "output root (default: $DAPP_BENCH_OUT, then the scenario's output)");

  std::string records_path;
  auto* summarize = app.add_subcommand("summarize", "summary statistics of a records CSV or bundle");
  summarize->add_option("records", records_path, "records.csv or bundle directory")->required();

  std::string a_path, b_path;
  auto* compare = app.add_subcommand("compare", "relative change from bundle A to bundle B");
  compare->add_option("A", a_path, "baseline records.csv or bundle")->required();
  compare->add_option("B", b_path, "records.csv or bundle")->required();

  std::string bundle_path, kind_name;
  auto* plot = app.add_subcommand("plotdata", "emit plot-ready CSV");
  plot->add_option("bundle", bundle_path, "bundle directory (sweep: scenario output directory)")->required();
  plot->add_option("--kind", kind_name, "cdf | phase-bars | sweep")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto scenario = bench::load_scenario(scenario_path);
      bench::RunOptions opts;
      opts.seed = seed;
      if (out_dir) opts.out_dir = *out_dir;
      else if (const char* env = std::getenv("DAPP_BENCH_OUT"); env && *env) opts.out_dir = env;
      opts.log = &std::cerr;
      const auto bundles = bench::run_experiment(scenario, opts);
      for (const auto& b : bundles) {
        std::cout << b.label << ": " << b.path.string();
        if (b.stats.count > 0)
          std::cout << std::fixed << std::setprecision(3) << "  mean " << b.stats.mean_ns / 1e6 << " ms  p95 "
                    << b.stats.p95_ns / 1e6 << " ms  violations " << b.stats.violation_rate * 100 << "%";
        std::cout << '\n';
      }
    } else if (*summarize) {
      const auto records = bench::load_records(records_path);
      std::cout << stats_json(bench::summarize(records)).dump(2) << '\n';
    } else if (*compare) {
      const auto d = bench::compare(bench::load_records(a_path), bench::load_records(b_path));
      json j{{"mean_pct", d.mean_pct}, {"p95_pct", d.p95_pct}, {"max_pct", d.max_pct},
             {"violation_pp", d.violation_pp}};
      std::cout << j.dump(2) << '\n';
    } else if (*plot) {
      bench::emit_plot_data(bundle_path, bench::parse_plot_kind(kind_name), std::cout);
    }
  } catch (const bench::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const bench::ValidationError& e) {
    std::cerr << "invalid scenario: " << e.what() << '\n';
    return 2;
  } catch (const bench::UnknownKind& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

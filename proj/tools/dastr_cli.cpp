// Command-line front end: runs experiments from JSON configs, aggregates
// finished runs, and provides a quick density-model selftest.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dastr/common.hpp"
#include "dastr/config.hpp"
#include "dastr/experiment.hpp"
#include "dastr/metrics.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

fs::path output_root() {
  if (const char* root = std::getenv("DASTR_OUT_ROOT")) return fs::path(root);
  return fs::path("runs");
}

std::string timestamp_utc() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

int run_command(const std::string& config_path, const std::vector<std::string>& overrides,
                std::string out_dir, bool resume) {
  dastr::ExperimentConfig config;
  try {
    config = dastr::load_experiment_config(config_path, overrides);
  } catch (const dastr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    fs::path out = out_dir.empty()
                       ? output_root() / (config.experiment + "-seed" +
                                          std::to_string(config.seed) + "-" + timestamp_utc())
                       : fs::path(out_dir);
    const dastr::RunSummary summary = dastr::run_experiment(config, out, resume);
    std::cout << "experiment: " << summary.experiment << "\n";
    std::cout << "out_dir: " << summary.out_dir.string() << "\n";
    std::cout << "stages: " << summary.stages.size() << "\n";
    if (!summary.stages.empty()) {
      std::cout << "final_q_loss: " << dastr::format_double(summary.stages.back().q_loss)
                << "\n";
    }
    std::cout << "final_error: " << dastr::format_double(summary.final_error) << "\n";
    std::cout << "final_acceptance: " << dastr::format_double(summary.final_acceptance) << "\n";
    std::cout << "final_band_fraction: " << dastr::format_double(summary.final_band_fraction)
              << "\n";
    std::cout << "iso_mean: " << dastr::format_double(summary.iso_mean) << "\n";
    std::cout << "iso_sd: " << dastr::format_double(summary.iso_sd) << "\n";
    std::cout << "wall_seconds: " << dastr::format_double(summary.wall_seconds) << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int report_command(const std::vector<std::string>& dirs) {
  try {
    std::vector<fs::path> paths(dirs.begin(), dirs.end());
    std::cout << dastr::report_runs(paths);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int selftest_command(std::string out_dir, std::uint64_t seed) {
  nlohmann::json j = {
      {"experiment", "flow-selftest"},
      {"seed", seed},
      {"potential",
       {{"id", "brownian-annulus"}, {"dim", 2}, {"inner_radius", 1.0}, {"outer_radius", 2.0}}},
      {"flow", {{"blocks", 3}, {"layers_per_block", 4}, {"hidden", 24}}},
  };
  try {
    const dastr::ExperimentConfig config = dastr::parse_experiment_config(j);
    const fs::path out =
        out_dir.empty() ? output_root() / ("selftest-seed" + std::to_string(seed))
                        : fs::path(out_dir);
    const dastr::RunSummary summary = dastr::run_experiment(config, out);
    const bool invert_ok = summary.selftest_invert_error < 1e-8;
    const bool norm_ok = std::abs(summary.selftest_norm_estimate - 1.0) < 0.05;
    std::printf("invertibility (max round-trip error %.3e): %s\n",
                summary.selftest_invert_error, invert_ok ? "PASS" : "FAIL");
    std::printf("normalization (Monte Carlo integral %.4f): %s\n",
                summary.selftest_norm_estimate, norm_ok ? "PASS" : "FAIL");
    std::printf("target-scale invariance: %s\n",
                summary.selftest_scale_invariant ? "PASS" : "FAIL");
    std::printf("selftest: %s\n", summary.selftest_pass ? "PASS" : "FAIL");
    return summary.selftest_pass ? 0 : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive committor training on rare transition paths"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  bool resume = false;
  CLI::App* run = app.add_subcommand("run", "Run one experiment from a JSON config");
  run->add_option("-c,--config", config_path, "Path to the experiment config")
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("--set", overrides,
                  "Override a config field, e.g. --set dastr.n_adaptive=10 (repeatable)");
  run->add_option("-o,--out", out_dir,
                  "Output directory (default: $DASTR_OUT_ROOT or ./runs, plus a generated name)");
  run->add_flag("--resume", resume, "Continue from the latest checkpoint in the output directory");

  std::vector<std::string> report_dirs;
  CLI::App* report = app.add_subcommand("report", "Summarize one or more finished run directories");
  report->add_option("dirs", report_dirs, "Run directories containing manifest.json")
      ->required()
      ->expected(-1);

  std::string selftest_out;
  std::uint64_t selftest_seed = 7;
  CLI::App* selftest =
      app.add_subcommand("selftest", "Train a small density model and check its invariants");
  selftest->add_option("-o,--out", selftest_out, "Output directory");
  selftest->add_option("--seed", selftest_seed, "Selftest seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (run->parsed()) return run_command(config_path, overrides, out_dir, resume);
  if (report->parsed()) return report_command(report_dirs);
  if (selftest->parsed()) return selftest_command(selftest_out, selftest_seed);
  return kExitConfig;
}

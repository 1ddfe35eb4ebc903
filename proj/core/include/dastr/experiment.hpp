#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dastr/adaptive.hpp"
#include "dastr/config.hpp"
#include "dastr/potentials.hpp"

namespace dastr {

// Instantiates the configured landscape (beta 0 keeps the potential's
// default).
std::unique_ptr<Potential> make_potential(const PotentialConfig& config);

// Everything a caller needs to judge a finished run; the same numbers land in
// the manifest.  NaN marks metrics the experiment does not produce.
struct RunSummary {
  std::string experiment;
  std::filesystem::path out_dir;
  std::vector<StageRecord> stages;
  double final_error = 0.0;
  double final_acceptance = 0.0;
  double final_band_fraction = 0.0;  // training-sample norm fraction in [band_lo, band_hi]
  double iso_mean = 0.0;
  double iso_sd = 0.0;
  std::int64_t iso_points = 0;
  std::int64_t iso_timeouts = 0;
  // flow-selftest diagnostics
  double selftest_norm_estimate = 0.0;
  double selftest_invert_error = 0.0;
  bool selftest_scale_invariant = false;
  bool selftest_pass = false;
  double wall_seconds = 0.0;
};

// Runs one experiment end to end: builds the system, executes the staged
// loop (or the selftest), and writes metrics.csv, timings.csv, per-stage
// checkpoints, histogram JSON, and manifest.json under out_dir.  metrics.csv
// and the histogram files are deterministic functions of (config, seed);
// timing data is quarantined in timings.csv and the manifest.  With
// resume=true, a latest-stage checkpoint in out_dir restores the exact
// training state and the loop continues from the next stage, reproducing an
// uninterrupted run bit-for-bit.
RunSummary run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                          bool resume = false);

// Aggregates manifests of one or more run directories into a summary table
// (mean +/- sample SD across runs per metric; SD omitted for a single run).
std::string report_runs(const std::vector<std::filesystem::path>& run_dirs);

}  // namespace dastr

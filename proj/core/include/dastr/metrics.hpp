#pragma once

#include <span>
#include <string>
#include <vector>

#include "dastr/nets.hpp"
#include "dastr/potentials.hpp"
#include "dastr/rng.hpp"
#include "dastr/tensor.hpp"

namespace dastr {

// ||approx - reference||_2 / ||reference||_2.
double relative_l2(std::span<const double> approx, std::span<const double> reference);

// --- Monte-Carlo committor oracle -------------------------------------------------

struct McSettings {
  std::int64_t n_traj = 200;
  double dt = 1e-5;
  double beta = 0.0;  // 0: use the potential's beta
  std::int64_t max_steps = 10000000;
  std::uint64_t seed = 0;
};

struct McCommittorResult {
  std::vector<double> estimate;   // fraction of completed trajectories hitting B first
  std::vector<double> std_error;  // binomial SE over completed trajectories
  std::vector<std::int64_t> timeouts;  // per point
  std::vector<char> all_timeout;       // flagged points with no completed trajectory
  std::int64_t total_timeouts = 0;
};

// Estimates the committor at each point by direct simulation.  Every
// (point, trajectory) pair uses its own RNG substream of `settings.seed`, so
// results are independent of evaluation order.  Timed-out trajectories are
// excluded from the estimates and reported.
McCommittorResult mc_committor(const Potential& potential, const Tensor& points,
                               const McSettings& settings);

// --- histograms -------------------------------------------------------------------

struct HistogramData {
  std::vector<double> edges;        // bins+1 ascending
  std::vector<std::int64_t> counts;  // size bins; includes clamped outliers in end bins
};

// Histogram of per-sample Euclidean norms on [lo, hi]; out-of-range norms are
// counted in the nearest end bin so counts always sum to the sample count.
HistogramData norm_histogram(const Tensor& samples, std::int64_t bins, double lo, double hi);
// Fraction of samples with norm in [lo, hi].
double norm_band_fraction(const Tensor& samples, double lo, double hi);
// Histogram of scalar values (same clamping convention).
HistogramData value_histogram(std::span<const double> values, std::int64_t bins, double lo,
                              double hi);

// --- half-isosurface validation -----------------------------------------------------

struct IsosurfaceResult {
  Tensor gamma_points;                 // the points with |q - 1/2| <= tol
  std::vector<double> mc_estimates;    // per-point MC committor values
  double mean = 0.0;                   // over points with completed trajectories
  double sd = 0.0;
  std::int64_t timeouts = 0;
  HistogramData histogram;             // of mc_estimates on [0,1]
};

// Extracts up to max_points pool members with |q_theta - 1/2| <= tol and runs
// the MC oracle on them.  Throws (suggesting a larger tolerance) if no pool
// point qualifies.
IsosurfaceResult isosurface_histogram(const CommittorNet& net, const Potential& potential,
                                      const Tensor& pool, double tol, const McSettings& mc,
                                      std::int64_t bins, std::int64_t max_points);

// --- annulus validation curve --------------------------------------------------------

// The diagonal curve {(kappa, ..., kappa)} with kappa spanning [a/sqrt(d),
// b/sqrt(d)] inclusive; every point lies in the closed annulus.
Tensor validation_curve(const BrownianAnnulus& potential, std::int64_t count);
// Analytic committor along the curve.
std::vector<double> validation_reference(const BrownianAnnulus& potential, const Tensor& curve);
// Relative L2 error of the net against the closed form on the curve.
double curve_relative_l2(const CommittorNet& net, const BrownianAnnulus& potential,
                         std::int64_t count);

// Shortest-round-trip-style fixed formatting used by every metrics file;
// guarantees byte-identical output for identical doubles.
std::string format_double(double value);

}  // namespace dastr

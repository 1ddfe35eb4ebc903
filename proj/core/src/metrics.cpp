#include "dastr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "dastr/common.hpp"
#include "dastr/sde.hpp"

namespace dastr {

double relative_l2(std::span<const double> approx, std::span<const double> reference) {
  if (approx.size() != reference.size()) {
    throw make_error("relative_l2: size mismatch ", approx.size(), " vs ",
                           reference.size());
  }
  if (approx.empty()) throw make_error("relative_l2: empty input");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < approx.size(); ++i) {
    const double d = approx[i] - reference[i];
    num += d * d;
    den += reference[i] * reference[i];
  }
  if (den <= 0.0) throw make_error("relative_l2: reference has zero norm");
  return std::sqrt(num / den);
}

McCommittorResult mc_committor(const Potential& potential, const Tensor& points,
                               const McSettings& settings) {
  if (settings.n_traj <= 0) throw make_error("mc_committor: n_traj must be positive");
  if (points.cols != potential.dim()) {
    throw make_error("mc_committor: point dimension ", points.cols,
                           " does not match potential dimension ", potential.dim());
  }
  const double beta = settings.beta > 0.0 ? settings.beta : potential.beta();
  McCommittorResult result;
  const std::int64_t n = points.rows;
  result.estimate.assign(static_cast<std::size_t>(n), 0.0);
  result.std_error.assign(static_cast<std::size_t>(n), 0.0);
  result.timeouts.assign(static_cast<std::size_t>(n), 0);
  result.all_timeout.assign(static_cast<std::size_t>(n), 0);
  std::vector<double> x0(static_cast<std::size_t>(points.cols));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t c = 0; c < points.cols; ++c) x0[static_cast<std::size_t>(c)] = points.at(i, c);
    std::int64_t hits_b = 0;
    std::int64_t completed = 0;
    for (std::int64_t t = 0; t < settings.n_traj; ++t) {
      Rng rng = Rng::substream(settings.seed,
                               {0x6d63u, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(t)});
      const HitResult hit =
          first_hit(potential, x0, settings.dt, beta, settings.max_steps, rng);
      if (hit == HitResult::kTimeout) {
        ++result.timeouts[static_cast<std::size_t>(i)];
        ++result.total_timeouts;
        continue;
      }
      ++completed;
      if (hit == HitResult::kB) ++hits_b;
    }
    if (completed == 0) {
      result.all_timeout[static_cast<std::size_t>(i)] = 1;
      result.estimate[static_cast<std::size_t>(i)] = std::numeric_limits<double>::quiet_NaN();
      result.std_error[static_cast<std::size_t>(i)] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    const double p = static_cast<double>(hits_b) / static_cast<double>(completed);
    result.estimate[static_cast<std::size_t>(i)] = p;
    result.std_error[static_cast<std::size_t>(i)] =
        std::sqrt(std::max(p * (1.0 - p), 0.0) / static_cast<double>(completed));
  }
  return result;
}

HistogramData value_histogram(std::span<const double> values, std::int64_t bins, double lo,
                              double hi) {
  if (bins <= 0) throw make_error("value_histogram: bins must be positive");
  if (!(hi > lo)) throw make_error("value_histogram: hi must exceed lo");
  HistogramData h;
  h.edges.resize(static_cast<std::size_t>(bins) + 1);
  for (std::int64_t b = 0; b <= bins; ++b) {
    h.edges[static_cast<std::size_t>(b)] =
        lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins);
  }
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    if (!std::isfinite(v)) throw make_error("value_histogram: non-finite value");
    std::int64_t b = static_cast<std::int64_t>(std::floor((v - lo) / width));
    b = std::clamp<std::int64_t>(b, 0, bins - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

namespace {

std::vector<double> row_norms(const Tensor& samples) {
  std::vector<double> norms(static_cast<std::size_t>(samples.rows));
  for (std::int64_t i = 0; i < samples.rows; ++i) {
    double s = 0.0;
    for (std::int64_t c = 0; c < samples.cols; ++c) {
      const double v = samples.at(i, c);
      s += v * v;
    }
    norms[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  return norms;
}

}  // namespace

HistogramData norm_histogram(const Tensor& samples, std::int64_t bins, double lo, double hi) {
  const std::vector<double> norms = row_norms(samples);
  return value_histogram(norms, bins, lo, hi);
}

double norm_band_fraction(const Tensor& samples, double lo, double hi) {
  if (samples.rows == 0) throw make_error("norm_band_fraction: empty sample set");
  const std::vector<double> norms = row_norms(samples);
  std::int64_t inside = 0;
  for (double r : norms) {
    if (r >= lo && r <= hi) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(samples.rows);
}

IsosurfaceResult isosurface_histogram(const CommittorNet& net, const Potential& potential,
                                      const Tensor& pool, double tol, const McSettings& mc,
                                      std::int64_t bins, std::int64_t max_points) {
  if (max_points <= 0) throw make_error("isosurface_histogram: max_points must be positive");
  if (pool.rows == 0) throw make_error("isosurface_histogram: empty candidate pool");
  const Tensor q = net.values(pool);
  std::vector<std::int64_t> keep;
  for (std::int64_t i = 0; i < pool.rows && static_cast<std::int64_t>(keep.size()) < max_points;
       ++i) {
    if (std::abs(q.at(i, 0) - 0.5) <= tol) keep.push_back(i);
  }
  if (keep.empty()) {
    throw make_error("isosurface_histogram: no pool point satisfies |q - 1/2| <= ", tol,
                           "; widen the tolerance or enlarge the pool");
  }
  IsosurfaceResult result;
  result.gamma_points = take_rows(pool, keep);
  const McCommittorResult oracle = mc_committor(potential, result.gamma_points, mc);
  result.timeouts = oracle.total_timeouts;
  double sum = 0.0;
  double sum2 = 0.0;
  std::int64_t used = 0;
  for (std::size_t i = 0; i < oracle.estimate.size(); ++i) {
    if (oracle.all_timeout[i]) continue;
    result.mc_estimates.push_back(oracle.estimate[i]);
    sum += oracle.estimate[i];
    sum2 += oracle.estimate[i] * oracle.estimate[i];
    ++used;
  }
  if (used == 0) throw make_error("isosurface_histogram: every trajectory timed out");
  result.mean = sum / static_cast<double>(used);
  const double var = std::max(sum2 / static_cast<double>(used) - result.mean * result.mean, 0.0);
  result.sd = std::sqrt(var);
  result.histogram = value_histogram(result.mc_estimates, bins, 0.0, 1.0);
  return result;
}

Tensor validation_curve(const BrownianAnnulus& potential, std::int64_t count) {
  if (count < 2) throw make_error("validation_curve: need at least two points");
  const std::int64_t d = potential.dim();
  const double root_d = std::sqrt(static_cast<double>(d));
  const double lo = potential.inner_radius() / root_d;
  const double hi = potential.outer_radius() / root_d;
  Tensor curve = Tensor::zeros(count, d);
  for (std::int64_t i = 0; i < count; ++i) {
    const double kappa =
        lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
    for (std::int64_t c = 0; c < d; ++c) curve.at(i, c) = kappa;
  }
  return curve;
}

std::vector<double> validation_reference(const BrownianAnnulus& potential, const Tensor& curve) {
  std::vector<double> ref(static_cast<std::size_t>(curve.rows));
  for (std::int64_t i = 0; i < curve.rows; ++i) {
    double s = 0.0;
    for (std::int64_t c = 0; c < curve.cols; ++c) s += curve.at(i, c) * curve.at(i, c);
    ref[static_cast<std::size_t>(i)] = potential.reference_committor_radial(std::sqrt(s));
  }
  return ref;
}

double curve_relative_l2(const CommittorNet& net, const BrownianAnnulus& potential,
                         std::int64_t count) {
  const Tensor curve = validation_curve(potential, count);
  const std::vector<double> reference = validation_reference(potential, curve);
  const Tensor q = net.values(curve);
  std::vector<double> approx(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) approx[static_cast<std::size_t>(i)] = q.at(i, 0);
  return relative_l2(approx, reference);
}

std::string format_double(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return std::string(buf);
}

}  // namespace dastr

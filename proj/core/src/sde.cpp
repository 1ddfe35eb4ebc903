#include "dastr/sde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "dastr/common.hpp"

namespace dastr {

namespace {

bool all_finite(std::span<const double> x) {
  for (double v : x) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double resolve_beta(const Potential& potential, double beta) {
  if (beta == 0.0) return potential.beta();
  if (!(beta > 0.0)) throw make_error("sde: beta must be positive, got ", beta);
  return beta;
}

// One Euler-Maruyama step without reflection; returns via x.
void em_step(const Potential& potential, const Bias* bias, std::span<double> x,
             std::span<double> grad_scratch, double dt, double noise_scale, Rng& rng) {
  std::fill(grad_scratch.begin(), grad_scratch.end(), 0.0);
  potential.add_gradient(x, grad_scratch);
  if (bias != nullptr) bias->add_gradient(x, grad_scratch);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] += -grad_scratch[i] * dt + noise_scale * rng.normal();
  }
}

}  // namespace

std::vector<double> CvMap::eval(std::span<const double> x) const {
  std::vector<double> s(static_cast<std::size_t>(dim_cv), 0.0);
  value(x, s);
  return s;
}

CvMap coordinate_cvs(std::vector<std::int64_t> coords, std::int64_t dim_in) {
  for (std::int64_t c : coords) {
    if (c < 0 || c >= dim_in) throw make_error("coordinate_cvs: coordinate ", c, " out of range");
  }
  CvMap cv;
  cv.dim_in = dim_in;
  cv.dim_cv = static_cast<std::int64_t>(coords.size());
  auto shared = std::make_shared<std::vector<std::int64_t>>(std::move(coords));
  cv.value = [shared](std::span<const double> x, std::span<double> s) {
    for (std::size_t i = 0; i < shared->size(); ++i) s[i] = x[static_cast<std::size_t>((*shared)[i])];
  };
  cv.add_jacobian_transpose = [shared](std::span<const double>, std::span<const double> w,
                                       std::span<double> grad_x) {
    for (std::size_t i = 0; i < shared->size(); ++i) {
      grad_x[static_cast<std::size_t>((*shared)[i])] += w[i];
    }
  };
  return cv;
}

CvMap identity_cvs(std::int64_t dim) {
  std::vector<std::int64_t> coords(static_cast<std::size_t>(dim));
  for (std::int64_t i = 0; i < dim; ++i) coords[static_cast<std::size_t>(i)] = i;
  return coordinate_cvs(std::move(coords), dim);
}

// --- MetadynamicsBias ----------------------------------------------------------

MetadynamicsBias::MetadynamicsBias(CvMap cv, double height, double width)
    : cv_(std::move(cv)), height_(height), width_(width) {
  if (!(height > 0.0)) throw make_error("MetadynamicsBias: height must be positive");
  if (!(width > 0.0)) throw make_error("MetadynamicsBias: width must be positive");
  if (cv_.dim_cv <= 0) throw make_error("MetadynamicsBias: CV map has no outputs");
}

void MetadynamicsBias::deposit(std::span<const double> x) {
  std::vector<double> s = cv_.eval(x);
  centers_.insert(centers_.end(), s.begin(), s.end());
}

double MetadynamicsBias::energy_cv(std::span<const double> s) const {
  const std::size_t m = static_cast<std::size_t>(cv_.dim_cv);
  const double inv_two_sigma_sq = 1.0 / (2.0 * width_ * width_);
  double total = 0.0;
  for (std::size_t c = 0; c < centers_.size(); c += m) {
    double dist_sq = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = s[i] - centers_[c + i];
      dist_sq += d * d;
    }
    total += height_ * std::exp(-dist_sq * inv_two_sigma_sq);
  }
  return total;
}

double MetadynamicsBias::energy(std::span<const double> x) const {
  std::vector<double> s = cv_.eval(x);
  return energy_cv(s);
}

void MetadynamicsBias::add_gradient(std::span<const double> x, std::span<double> grad) const {
  const std::size_t m = static_cast<std::size_t>(cv_.dim_cv);
  std::vector<double> s = cv_.eval(x);
  std::vector<double> dv_ds(m, 0.0);
  const double inv_two_sigma_sq = 1.0 / (2.0 * width_ * width_);
  for (std::size_t c = 0; c < centers_.size(); c += m) {
    double dist_sq = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = s[i] - centers_[c + i];
      dist_sq += d * d;
    }
    const double e = height_ * std::exp(-dist_sq * inv_two_sigma_sq);
    for (std::size_t i = 0; i < m; ++i) {
      dv_ds[i] += e * -(s[i] - centers_[c + i]) / (width_ * width_);
    }
  }
  cv_.add_jacobian_transpose(x, dv_ds, grad);
}

// --- UmbrellaBias ---------------------------------------------------------------

UmbrellaBias::UmbrellaBias(CvMap cv, double k_us, std::vector<double> target)
    : cv_(std::move(cv)), k_us_(k_us), target_(std::move(target)) {
  if (!(k_us > 0.0)) throw make_error("UmbrellaBias: k_us must be positive");
  if (static_cast<std::int64_t>(target_.size()) != cv_.dim_cv) {
    throw make_error("UmbrellaBias: target has ", target_.size(), " entries, CV map has ",
                     cv_.dim_cv);
  }
}

void UmbrellaBias::set_target(std::vector<double> target) {
  if (target.size() != target_.size()) throw make_error("UmbrellaBias: target size change");
  target_ = std::move(target);
}

void UmbrellaBias::set_k_us(double k_us) {
  if (!(k_us > 0.0)) throw make_error("UmbrellaBias: k_us must be positive");
  k_us_ = k_us;
}

double UmbrellaBias::energy(std::span<const double> x) const {
  std::vector<double> s = cv_.eval(x);
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double d = s[i] - target_[i];
    total += d * d;
  }
  return 0.5 * k_us_ * total;
}

void UmbrellaBias::add_gradient(std::span<const double> x, std::span<double> grad) const {
  std::vector<double> s = cv_.eval(x);
  std::vector<double> dv_ds(s.size(), 0.0);
  for (std::size_t i = 0; i < s.size(); ++i) dv_ds[i] = k_us_ * (s[i] - target_[i]);
  cv_.add_jacobian_transpose(x, dv_ds, grad);
}

// --- integration -----------------------------------------------------------------

Trajectory simulate(const Potential& potential, const Bias* bias, std::span<const double> x0,
                    std::int64_t steps, const SdeConfig& config, Rng& rng) {
  if (!(config.dt > 0.0)) throw make_error("simulate: dt must be positive");
  if (config.stride < 1) throw make_error("simulate: stride must be >= 1");
  if (!potential.domain().contains(x0)) throw make_error("simulate: x0 outside the domain");
  const double beta = resolve_beta(potential, config.beta);
  const double noise_scale = std::sqrt(2.0 * config.dt / beta);

  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> grad(x.size(), 0.0);

  const std::int64_t n_recorded = steps / config.stride;
  Trajectory out;
  out.points = Tensor(n_recorded, potential.dim());
  out.energy.reserve(static_cast<std::size_t>(n_recorded));
  out.bias.reserve(static_cast<std::size_t>(n_recorded));

  std::int64_t recorded = 0;
  for (std::int64_t step = 1; step <= steps; ++step) {
    em_step(potential, bias, x, grad, config.dt, noise_scale, rng);
    if (!all_finite(x)) throw make_error("simulate: non-finite state at step ", step);
    potential.domain().reflect(x);
    if (step % config.stride == 0 && recorded < n_recorded) {
      std::copy(x.begin(), x.end(), out.points.row(recorded).begin());
      out.energy.push_back(potential.energy(x));
      out.bias.push_back(bias != nullptr ? bias->energy(x) : 0.0);
      ++recorded;
    }
  }
  return out;
}

HitResult first_hit(const Potential& potential, std::span<const double> x0, double dt,
                    double beta, std::int64_t max_steps, Rng& rng) {
  if (!(dt > 0.0)) throw make_error("first_hit: dt must be positive");
  if (potential.in_a_or_b(x0)) throw make_error("first_hit: x0 already inside A or B");
  const double beta_eff = resolve_beta(potential, beta);
  const double noise_scale = std::sqrt(2.0 * dt / beta_eff);

  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> grad(x.size(), 0.0);

  for (std::int64_t step = 1; step <= max_steps; ++step) {
    em_step(potential, nullptr, x, grad, dt, noise_scale, rng);
    if (!all_finite(x)) throw make_error("first_hit: non-finite state at step ", step);
    // Membership first, reflection second: sets touching the box boundary
    // (e.g. an outer shell) must be reachable.
    if (potential.in_a(x)) return HitResult::kA;
    if (potential.in_b(x)) return HitResult::kB;
    potential.domain().reflect(x);
  }
  return HitResult::kTimeout;
}

// --- enhanced sampling -------------------------------------------------------------

MetadynamicsRun metadynamics_run(const Potential& potential, CvMap cv,
                                 const MetadynamicsConfig& config, std::span<const double> x0,
                                 Rng& rng) {
  if (config.deposits < 1) throw make_error("metadynamics_run: need at least one deposit");
  if (config.deposit_interval < 1) throw make_error("metadynamics_run: deposit interval >= 1");
  if (config.sample_stride < 1) throw make_error("metadynamics_run: sample stride >= 1");
  if (!potential.domain().contains(x0)) throw make_error("metadynamics_run: x0 outside domain");
  const double beta = resolve_beta(potential, config.sde.beta);
  const double dt = config.sde.dt;
  if (!(dt > 0.0)) throw make_error("metadynamics_run: dt must be positive");
  const double noise_scale = std::sqrt(2.0 * dt / beta);

  MetadynamicsBias bias(std::move(cv), config.height, config.width);
  std::vector<double> x(x0.begin(), x0.end());
  std::vector<double> grad(x.size(), 0.0);

  const std::int64_t total_steps = config.deposits * config.deposit_interval;
  std::vector<double> collected;
  std::vector<double> bias_values;

  for (std::int64_t step = 0; step < total_steps; ++step) {
    if (step % config.deposit_interval == 0) bias.deposit(x);
    em_step(potential, &bias, x, grad, dt, noise_scale, rng);
    if (!all_finite(x)) throw make_error("metadynamics_run: non-finite state at step ", step + 1);
    potential.domain().reflect(x);
    if ((step + 1) % config.sample_stride == 0 && !potential.in_a_or_b(x)) {
      collected.insert(collected.end(), x.begin(), x.end());
      bias_values.push_back(bias.energy(x));
    }
  }

  MetadynamicsRun run{Tensor(), std::move(bias_values), std::move(bias)};
  const std::int64_t d = potential.dim();
  const std::int64_t n = static_cast<std::int64_t>(collected.size()) / d;
  run.samples = Tensor(n, d);
  std::copy(collected.begin(), collected.end(), run.samples.data.begin());
  return run;
}

UmbrellaRun umbrella_relax(const Potential& potential, CvMap cv, const UmbrellaConfig& config,
                           std::span<const double> target_cvs, std::span<const double> x_init,
                           std::int64_t n_keep, Rng& rng) {
  if (n_keep < 1) throw make_error("umbrella_relax: n_keep must be >= 1");
  if (config.windows < 1) throw make_error("umbrella_relax: windows must be >= 1");
  if (!potential.domain().contains(x_init)) throw make_error("umbrella_relax: x_init outside domain");
  const double beta = resolve_beta(potential, config.sde.beta);
  const double dt = config.sde.dt;
  if (!(dt > 0.0)) throw make_error("umbrella_relax: dt must be positive");
  const double noise_scale = std::sqrt(2.0 * dt / beta);
  const std::size_t m = static_cast<std::size_t>(cv.dim_cv);
  if (target_cvs.size() != m) {
    throw make_error("umbrella_relax: target has ", target_cvs.size(), " CVs, map has ", m);
  }

  std::vector<double> x(x_init.begin(), x_init.end());
  std::vector<double> grad(x.size(), 0.0);
  std::vector<double> s_start = cv.eval(x_init);

  UmbrellaBias bias(cv, config.k_us, s_start);

  // Drag the restraint center toward the target through the window schedule.
  for (std::int64_t w = 1; w <= config.windows; ++w) {
    const double t = static_cast<double>(w) / static_cast<double>(config.windows);
    std::vector<double> center(m);
    for (std::size_t i = 0; i < m; ++i) {
      center[i] = s_start[i] + t * (target_cvs[i] - s_start[i]);
    }
    bias.set_target(std::move(center));
    for (std::int64_t step = 0; step < config.steps_per_window; ++step) {
      em_step(potential, &bias, x, grad, dt, noise_scale, rng);
      if (!all_finite(x)) {
        throw make_error("umbrella_relax: non-finite state in window ", w, " step ", step + 1);
      }
      potential.domain().reflect(x);
    }
  }

  // Sample the final window, keeping configurations near the target.
  const double sigma = 1.0 / std::sqrt(beta * config.k_us);
  const double tol = config.tolerance_factor * sigma;
  const std::int64_t max_steps =
      config.max_steps > 0 ? config.max_steps : 50 * config.windows * config.steps_per_window;

  Tensor kept(n_keep, potential.dim());
  std::int64_t accepted = 0;
  double sum_dist_sq = 0.0;   // over accepted samples
  double recent_dist_sq = 0.0;  // diagnostic over all visited states
  std::int64_t visited = 0;
  std::vector<double> s(m);

  for (std::int64_t step = 1; step <= max_steps && accepted < n_keep; ++step) {
    em_step(potential, &bias, x, grad, dt, noise_scale, rng);
    if (!all_finite(x)) throw make_error("umbrella_relax: non-finite state while sampling");
    potential.domain().reflect(x);
    if (step % config.sample_interval != 0) continue;
    cv.value(x, s);
    double dist_sq = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double d = s[i] - target_cvs[i];
      dist_sq += d * d;
    }
    const double rms = std::sqrt(dist_sq / static_cast<double>(m));
    recent_dist_sq += dist_sq;
    ++visited;
    if (rms <= tol) {
      std::copy(x.begin(), x.end(), kept.row(accepted).begin());
      sum_dist_sq += dist_sq;
      ++accepted;
    }
  }

  if (accepted < n_keep) {
    const double achieved =
        visited > 0 ? std::sqrt(recent_dist_sq / (static_cast<double>(visited) *
                                                  static_cast<double>(m)))
                    : std::numeric_limits<double>::infinity();
    throw make_error("umbrella_relax: only ", accepted, " of ", n_keep,
                     " samples within tolerance ", tol, "; achieved CV RMS ", achieved);
  }

  UmbrellaRun run;
  run.samples = std::move(kept);
  run.achieved_rms = std::sqrt(sum_dist_sq / (static_cast<double>(n_keep) * static_cast<double>(m)));
  return run;
}

}  // namespace dastr

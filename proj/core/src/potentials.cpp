#include "dastr/potentials.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "dastr/common.hpp"

namespace dastr {

namespace {

double norm2(std::span<const double> x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc);
}

}  // namespace

Box::Box(std::vector<double> lo_in, std::vector<double> hi_in)
    : lo(std::move(lo_in)), hi(std::move(hi_in)) {
  if (lo.size() != hi.size()) throw make_error("Box: lo/hi size mismatch");
  for (std::size_t i = 0; i < lo.size(); ++i) {
    if (!(lo[i] < hi[i])) throw make_error("Box: empty extent in dimension ", i);
  }
}

Box Box::cube(std::int64_t dim, double lo_value, double hi_value) {
  return Box(std::vector<double>(static_cast<std::size_t>(dim), lo_value),
             std::vector<double>(static_cast<std::size_t>(dim), hi_value));
}

bool Box::contains(std::span<const double> x) const {
  if (static_cast<std::int64_t>(x.size()) != dim()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < lo[i] || x[i] > hi[i]) return false;
  }
  return true;
}

bool Box::strictly_inside(std::span<const double> x, double margin) const {
  if (static_cast<std::int64_t>(x.size()) != dim()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= lo[i] + margin || x[i] >= hi[i] - margin) return false;
  }
  return true;
}

double Box::log_volume() const {
  double acc = 0.0;
  for (std::size_t i = 0; i < lo.size(); ++i) acc += std::log(hi[i] - lo[i]);
  return acc;
}

void Box::reflect(std::span<double> x) const {
  for (std::size_t i = 0; i < x.size(); ++i) {
    double v = x[i];
    const double width = hi[i] - lo[i];
    // Fold into the fundamental cell of the reflection group.
    while (v < lo[i] || v > hi[i]) {
      if (v < lo[i]) v = 2.0 * lo[i] - v;
      if (v > hi[i]) v = 2.0 * hi[i] - v;
      // Guard against pathological steps many widths long.
      if (v < lo[i] - 16.0 * width || v > hi[i] + 16.0 * width) {
        throw make_error("Box::reflect: coordinate ", i, " diverged to ", x[i]);
      }
    }
    x[i] = v;
  }
}

std::pair<double, std::vector<double>> eval_potential(const Potential& p,
                                                      std::span<const double> x) {
  if (!p.domain().contains(x)) {
    throw make_error("eval_potential: point outside the domain of ", p.id());
  }
  std::vector<double> grad(x.size(), 0.0);
  p.add_gradient(x, grad);
  return {p.energy(x), std::move(grad)};
}

std::vector<double> energies(const Potential& p, const Tensor& points) {
  if (points.cols != p.dim()) {
    throw make_error("energies: points have ", points.cols, " columns, expected ", p.dim());
  }
  std::vector<double> out(static_cast<std::size_t>(points.rows));
  for (std::int64_t i = 0; i < points.rows; ++i) out[static_cast<std::size_t>(i)] = p.energy(points.row(i));
  return out;
}

Tensor sample_boundary(const Potential& p, MetastableSet which, std::int64_t n, Rng& rng) {
  if (n < 1) throw make_error("sample_boundary: n must be >= 1");
  Tensor out(n, p.dim());
  for (std::int64_t i = 0; i < n; ++i) {
    if (which == MetastableSet::kA) {
      p.sample_a(rng, out.row(i));
    } else {
      p.sample_b(rng, out.row(i));
    }
  }
  return out;
}

Tensor sample_uniform_outside_ab(const Potential& p, std::int64_t n, Rng& rng) {
  if (n < 1) throw make_error("sample_uniform_outside_ab: n must be >= 1");
  Tensor out(n, p.dim());
  for (std::int64_t i = 0; i < n; ++i) p.sample_uniform_outside_ab(rng, out.row(i));
  return out;
}

// --- RuggedMueller -----------------------------------------------------------

RuggedMueller::RuggedMueller(RuggedMuellerParams params) : params_(std::move(params)) {
  if (params_.dim < 2) throw make_error("RuggedMueller: dimension must be >= 2");
  if (!(params_.sigma > 0.0)) throw make_error("RuggedMueller: sigma must be positive");
  std::vector<double> lo{-1.5, -0.5};
  std::vector<double> hi{1.0, 2.0};
  for (std::int64_t i = 2; i < params_.dim; ++i) {
    lo.push_back(-1.0);
    hi.push_back(1.0);
  }
  box_ = Box(std::move(lo), std::move(hi));
}

double RuggedMueller::planar_energy(double x1, double x2) const {
  const auto& p = params_;
  double v = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double u = x1 - p.xi[static_cast<std::size_t>(i)];
    const double w = x2 - p.eta[static_cast<std::size_t>(i)];
    const double g = p.a[static_cast<std::size_t>(i)] * u * u +
                     p.b[static_cast<std::size_t>(i)] * u * w +
                     p.c[static_cast<std::size_t>(i)] * w * w;
    v += p.big_d[static_cast<std::size_t>(i)] * std::exp(g);
  }
  const double two_k_pi = 2.0 * p.k * std::numbers::pi;
  v += p.gamma * std::sin(two_k_pi * x1) * std::sin(two_k_pi * x2);
  return v;
}

void RuggedMueller::planar_gradient(double x1, double x2, double* g1, double* g2) const {
  const auto& p = params_;
  double d1 = 0.0;
  double d2 = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double u = x1 - p.xi[static_cast<std::size_t>(i)];
    const double w = x2 - p.eta[static_cast<std::size_t>(i)];
    const double ai = p.a[static_cast<std::size_t>(i)];
    const double bi = p.b[static_cast<std::size_t>(i)];
    const double ci = p.c[static_cast<std::size_t>(i)];
    const double e = p.big_d[static_cast<std::size_t>(i)] * std::exp(ai * u * u + bi * u * w + ci * w * w);
    d1 += e * (2.0 * ai * u + bi * w);
    d2 += e * (bi * u + 2.0 * ci * w);
  }
  const double two_k_pi = 2.0 * p.k * std::numbers::pi;
  d1 += p.gamma * two_k_pi * std::cos(two_k_pi * x1) * std::sin(two_k_pi * x2);
  d2 += p.gamma * two_k_pi * std::sin(two_k_pi * x1) * std::cos(two_k_pi * x2);
  *g1 = d1;
  *g2 = d2;
}

double RuggedMueller::energy(std::span<const double> x) const {
  double v = planar_energy(x[0], x[1]);
  const double inv_two_sigma_sq = 1.0 / (2.0 * params_.sigma * params_.sigma);
  for (std::size_t i = 2; i < x.size(); ++i) v += inv_two_sigma_sq * x[i] * x[i];
  return v;
}

void RuggedMueller::add_gradient(std::span<const double> x, std::span<double> grad) const {
  double g1 = 0.0;
  double g2 = 0.0;
  planar_gradient(x[0], x[1], &g1, &g2);
  grad[0] += g1;
  grad[1] += g2;
  const double inv_sigma_sq = 1.0 / (params_.sigma * params_.sigma);
  for (std::size_t i = 2; i < x.size(); ++i) grad[i] += inv_sigma_sq * x[i];
}

bool RuggedMueller::in_a(std::span<const double> x) const {
  const double dx = x[0] - params_.center_a[0];
  const double dy = x[1] - params_.center_a[1];
  return dx * dx + dy * dy <= params_.set_radius * params_.set_radius;
}

bool RuggedMueller::in_b(std::span<const double> x) const {
  const double dx = x[0] - params_.center_b[0];
  const double dy = x[1] - params_.center_b[1];
  return dx * dx + dy * dy <= params_.set_radius * params_.set_radius;
}

// Boundary draws sit a relative 1e-12 inside the circle: rounding in
// cos^2 + sin^2 could otherwise push a nominally-on-boundary point an ulp
// outside the closed set and break the membership guarantee.
constexpr double kBoundaryInset = 1.0 - 1e-12;

void RuggedMueller::sample_a(Rng& rng, std::span<double> out) const {
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double r = params_.set_radius * kBoundaryInset;
  out[0] = params_.center_a[0] + r * std::cos(theta);
  out[1] = params_.center_a[1] + r * std::sin(theta);
  // Extended coordinates follow the confinement's scale sigma.
  for (std::size_t i = 2; i < out.size(); ++i) out[i] = params_.sigma * rng.normal();
}

void RuggedMueller::sample_b(Rng& rng, std::span<double> out) const {
  const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double r = params_.set_radius * kBoundaryInset;
  out[0] = params_.center_b[0] + r * std::cos(theta);
  out[1] = params_.center_b[1] + r * std::sin(theta);
  for (std::size_t i = 2; i < out.size(); ++i) out[i] = params_.sigma * rng.normal();
}

void RuggedMueller::sample_uniform_outside_ab(Rng& rng, std::span<double> out) const {
  // The metastable cylinders cover ~1% of the planar box; plain rejection.
  for (int attempt = 0; attempt < 10000; ++attempt) {
    out[0] = rng.uniform(box_.lo[0], box_.hi[0]);
    out[1] = rng.uniform(box_.lo[1], box_.hi[1]);
    for (std::size_t i = 2; i < out.size(); ++i) out[i] = rng.uniform(-1.0, 1.0);
    if (!in_a(out) && !in_b(out)) return;
  }
  throw make_error("RuggedMueller::sample_uniform_outside_ab: rejection failed");
}

double RuggedMueller::log_uniform_outside_ab_density() const {
  // Both cylinders lie fully inside the planar box, so the excluded volume is
  // exactly two full disks times the extension volume.
  const double planar_area = (box_.hi[0] - box_.lo[0]) * (box_.hi[1] - box_.lo[1]);
  const double disk_area = std::numbers::pi * params_.set_radius * params_.set_radius;
  const double planar_free = planar_area - 2.0 * disk_area;
  const double log_ext = static_cast<double>(params_.dim - 2) * std::log(2.0);
  return -(std::log(planar_free) + log_ext);
}

double simpson_1d(const std::function<double(double)>& f, double lo, double hi,
                  std::int64_t grid) {
  if (grid < 3) grid = 3;
  if (grid % 2 == 0) ++grid;
  const std::int64_t n = grid - 1;  // even number of intervals
  const double h = (hi - lo) / static_cast<double>(n);
  double acc = f(lo) + f(hi);
  for (std::int64_t i = 1; i < n; ++i) {
    acc += f(lo + h * static_cast<double>(i)) * (i % 2 == 1 ? 4.0 : 2.0);
  }
  return acc * h / 3.0;
}

double RuggedMueller::log_gibbs_normalizer(double beta_eff,
                                           const std::function<double(double, double)>* bias2d,
                                           std::int64_t grid) const {
  // Planar factor.  The integrand spans many orders of magnitude; shift by
  // the minimum energy to stay in range, then restore the shift in log space.
  double min_energy = std::numeric_limits<double>::infinity();
  const double lo1 = box_.lo[0], hi1 = box_.hi[0];
  const double lo2 = box_.lo[1], hi2 = box_.hi[1];
  const std::int64_t scan = 301;
  for (std::int64_t i = 0; i < scan; ++i) {
    for (std::int64_t j = 0; j < scan; ++j) {
      const double x1 = lo1 + (hi1 - lo1) * static_cast<double>(i) / (scan - 1);
      const double x2 = lo2 + (hi2 - lo2) * static_cast<double>(j) / (scan - 1);
      double v = planar_energy(x1, x2);
      if (bias2d != nullptr) v += (*bias2d)(x1, x2);
      min_energy = std::min(min_energy, v);
    }
  }
  auto inner = [&](double x1) {
    return simpson_1d(
        [&](double x2) {
          double v = planar_energy(x1, x2);
          if (bias2d != nullptr) v += (*bias2d)(x1, x2);
          return std::exp(-beta_eff * (v - min_energy));
        },
        lo2, hi2, grid);
  };
  const double planar = simpson_1d(inner, lo1, hi1, grid);
  double log_z = std::log(planar) - beta_eff * min_energy;

  // Extension factor: each extra coordinate contributes
  // int_{-1}^{1} exp(-beta_eff * y^2 / (2 sigma^2)) dy, identical across
  // coordinates.
  if (params_.dim > 2) {
    const double one_d = simpson_1d(
        [&](double y) {
          return std::exp(-beta_eff * y * y / (2.0 * params_.sigma * params_.sigma));
        },
        -1.0, 1.0, grid);
    log_z += static_cast<double>(params_.dim - 2) * std::log(one_d);
  }
  return log_z;
}

// --- BrownianAnnulus ---------------------------------------------------------

BrownianAnnulus::BrownianAnnulus(std::int64_t dim, double inner_radius, double outer_radius,
                                 double beta)
    : dim_(dim), inner_radius_(inner_radius), outer_radius_(outer_radius), beta_(beta),
      box_(Box::cube(dim, -outer_radius, outer_radius)) {
  if (dim < 1) throw make_error("BrownianAnnulus: dimension must be >= 1");
  if (!(0.0 < inner_radius && inner_radius < outer_radius)) {
    throw make_error("BrownianAnnulus: need 0 < a < b, got a=", inner_radius,
                     " b=", outer_radius);
  }
  if (!(beta > 0.0)) throw make_error("BrownianAnnulus: beta must be positive");
}

bool BrownianAnnulus::in_a(std::span<const double> x) const { return norm2(x) <= inner_radius_; }
bool BrownianAnnulus::in_b(std::span<const double> x) const { return norm2(x) >= outer_radius_; }

void BrownianAnnulus::sample_sphere(Rng& rng, double radius, std::span<double> out) const {
  double r = 0.0;
  do {
    rng.fill_normal(out);
    r = norm2(out);
  } while (r == 0.0);
  for (double& v : out) v *= radius / r;
}

void BrownianAnnulus::sample_a(Rng& rng, std::span<double> out) const {
  // Nudged a relative 1e-12 inward so the renormalized point's computed norm
  // cannot round an ulp above the inner radius and fall out of the closed set.
  sample_sphere(rng, inner_radius_ * (1.0 - 1e-12), out);
}

void BrownianAnnulus::sample_b(Rng& rng, std::span<double> out) const {
  // Nudged outward for the same reason: B is the closed set |x| >= b.
  sample_sphere(rng, outer_radius_ * (1.0 + 1e-12), out);
}

void BrownianAnnulus::sample_uniform_outside_ab(Rng& rng, std::span<double> out) const {
  // Exact draw: uniform direction times a radius with density prop. to
  // r^(d-1) on [a, b].  Box rejection would be hopeless in high dimension.
  sample_sphere(rng, 1.0, out);
  const double d = static_cast<double>(dim_);
  const double a_pow = std::pow(inner_radius_, d);
  const double b_pow = std::pow(outer_radius_, d);
  const double r = std::pow(a_pow + (b_pow - a_pow) * rng.uniform(), 1.0 / d);
  for (double& v : out) v *= r;
}

double BrownianAnnulus::log_uniform_outside_ab_density() const {
  const double d = static_cast<double>(dim_);
  const double log_unit_ball =
      0.5 * d * std::log(std::numbers::pi) - std::lgamma(0.5 * d + 1.0);
  const double log_shell =
      log_unit_ball + std::log(std::pow(outer_radius_, d) - std::pow(inner_radius_, d));
  return -log_shell;
}

double BrownianAnnulus::reference_committor_radial(double r) const {
  if (dim_ < 3) {
    throw make_error("BrownianAnnulus::reference_committor: closed form requires d >= 3");
  }
  const double tol = 1e-9;
  if (r < inner_radius_ - tol || r > outer_radius_ + tol) {
    throw make_error("BrownianAnnulus::reference_committor: radius ", r, " outside [",
                     inner_radius_, ", ", outer_radius_, "]");
  }
  r = std::min(std::max(r, inner_radius_), outer_radius_);
  const double p = 2.0 - static_cast<double>(dim_);
  const double a_pow = std::pow(inner_radius_, p);
  const double b_pow = std::pow(outer_radius_, p);
  return (a_pow - std::pow(r, p)) / (a_pow - b_pow);
}

double BrownianAnnulus::reference_committor(std::span<const double> x) const {
  return reference_committor_radial(norm2(x));
}

// --- BrownianInterval --------------------------------------------------------

BrownianInterval::BrownianInterval(double beta) : beta_(beta), box_(Box::cube(1, 0.0, 1.0)) {
  if (!(beta > 0.0)) throw make_error("BrownianInterval: beta must be positive");
}

}  // namespace dastr

#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "dastr/potentials.hpp"
#include "dastr/rng.hpp"
#include "dastr/sde.hpp"
#include "dastr/tensor.hpp"
#include "test_util.hpp"

using namespace dastr;

namespace {

// Isotropic quadratic well V(x) = |x|^2 / 2 with no metastable sets; its
// Gibbs measure is the standard Gaussian scaled by 1/sqrt(beta).
class QuadraticWell final : public Potential {
 public:
  QuadraticWell(std::int64_t dim, double beta)
      : dim_(dim), beta_(beta), box_(Box::cube(dim, -8.0, 8.0)) {}

  std::string id() const override { return "quadratic-well"; }
  std::int64_t dim() const override { return dim_; }
  double beta() const override { return beta_; }
  const Box& domain() const override { return box_; }
  double energy(std::span<const double> x) const override {
    double s = 0.0;
    for (double v : x) s += v * v;
    return 0.5 * s;
  }
  void add_gradient(std::span<const double> x, std::span<double> grad) const override {
    for (std::size_t i = 0; i < x.size(); ++i) grad[i] += x[i];
  }
  bool in_a(std::span<const double>) const override { return false; }
  bool in_b(std::span<const double>) const override { return false; }
  void sample_a(Rng&, std::span<double> out) const override {
    for (double& v : out) v = 0.0;
  }
  void sample_b(Rng&, std::span<double> out) const override {
    for (double& v : out) v = 0.0;
  }
  void sample_uniform_outside_ab(Rng& rng, std::span<double> out) const override {
    for (double& v : out) v = rng.uniform(-1.0, 1.0);
  }
  double log_uniform_outside_ab_density() const override { return 0.0; }

 private:
  std::int64_t dim_;
  double beta_;
  Box box_;
};

// One-dimensional double well V(x) = h (x^2 - 1)^2 with minima at +-1.
class DoubleWell final : public Potential {
 public:
  explicit DoubleWell(double h, double beta)
      : h_(h), beta_(beta), box_(Box::cube(1, -3.0, 3.0)) {}

  std::string id() const override { return "double-well"; }
  std::int64_t dim() const override { return 1; }
  double beta() const override { return beta_; }
  const Box& domain() const override { return box_; }
  double energy(std::span<const double> x) const override {
    const double u = x[0] * x[0] - 1.0;
    return h_ * u * u;
  }
  void add_gradient(std::span<const double> x, std::span<double> grad) const override {
    grad[0] += 4.0 * h_ * x[0] * (x[0] * x[0] - 1.0);
  }
  bool in_a(std::span<const double>) const override { return false; }
  bool in_b(std::span<const double>) const override { return false; }
  void sample_a(Rng&, std::span<double> out) const override { out[0] = -1.0; }
  void sample_b(Rng&, std::span<double> out) const override { out[0] = 1.0; }
  void sample_uniform_outside_ab(Rng& rng, std::span<double> out) const override {
    out[0] = rng.uniform(-3.0, 3.0);
  }
  double log_uniform_outside_ab_density() const override { return -std::log(6.0); }

 private:
  double h_;
  double beta_;
  Box box_;
};

double planar_dist(std::span<const double> x, const std::array<double, 2>& c) {
  const double dx = x[0] - c[0];
  const double dy = x[1] - c[1];
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

TEST_SUITE_BEGIN("sde");

TEST_CASE("vanishing noise freezes a flat landscape") {
  const BrownianInterval interval;
  SdeConfig cfg;
  cfg.dt = 1e-5;
  cfg.beta = 1e30;  // noise amplitude sqrt(2 dt / beta) ~ 4.5e-18
  cfg.stride = 10;
  Rng rng = Rng::substream(103, {0});
  const std::vector<double> x0 = {0.5};
  const Trajectory traj = simulate(interval, nullptr, x0, 200, cfg, rng);
  CHECK(traj.points.rows == 20);
  for (std::int64_t i = 0; i < traj.points.rows; ++i) {
    CHECK(std::abs(traj.points.row(i)[0] - 0.5) < 1e-12);
  }
}

TEST_CASE("single-step increments have Euler-Maruyama moments") {
  const QuadraticWell well(2, 0.5);
  SdeConfig cfg;
  cfg.dt = 1e-3;
  cfg.beta = 0.0;  // resolve from the potential
  cfg.stride = 1;
  const std::vector<double> x0 = {0.7, -0.3};
  const double noise_var = 2.0 * cfg.dt / well.beta();

  const std::int64_t n = 20000;
  std::vector<double> dx0(n);
  std::vector<double> dx1(n);
  for (std::int64_t t = 0; t < n; ++t) {
    Rng rng = Rng::substream(107, {static_cast<std::uint64_t>(t)});
    const Trajectory traj = simulate(well, nullptr, x0, 1, cfg, rng);
    dx0[static_cast<std::size_t>(t)] = traj.points.row(0)[0] - x0[0];
    dx1[static_cast<std::size_t>(t)] = traj.points.row(0)[1] - x0[1];
  }
  const double se_mean = std::sqrt(noise_var / static_cast<double>(n));
  CHECK(std::abs(testutil::mean_of(dx0) - (-x0[0] * cfg.dt)) < 3.0 * se_mean);
  CHECK(std::abs(testutil::mean_of(dx1) - (-x0[1] * cfg.dt)) < 3.0 * se_mean);
  const double se_var = noise_var * std::sqrt(2.0 / static_cast<double>(n));
  CHECK(std::abs(testutil::variance_of(dx0) - noise_var) < 3.0 * se_var);
  CHECK(std::abs(testutil::variance_of(dx1) - noise_var) < 3.0 * se_var);
}

TEST_CASE("long quadratic-well run reproduces the Gibbs variance") {
  const double beta = 1.0;
  const QuadraticWell well(1, beta);
  SdeConfig cfg;
  cfg.dt = 5e-3;
  cfg.stride = 10;
  Rng rng = Rng::substream(109, {0});
  const std::vector<double> x0 = {0.0};
  const Trajectory traj = simulate(well, nullptr, x0, 4000000, cfg, rng);
  std::vector<double> xs(static_cast<std::size_t>(traj.points.rows));
  for (std::int64_t i = 0; i < traj.points.rows; ++i) {
    xs[static_cast<std::size_t>(i)] = traj.points.row(i)[0];
  }
  const double var = testutil::variance_of(xs);
  CHECK(std::abs(var - 1.0 / beta) < 0.05 / beta);
}

TEST_CASE("trajectories are deterministic and reflection keeps the box") {
  const BrownianInterval interval;
  SdeConfig cfg;
  cfg.dt = 1e-2;
  cfg.stride = 1;
  const std::vector<double> x0 = {0.99};
  Rng r1 = Rng::substream(113, {0});
  Rng r2 = Rng::substream(113, {0});
  const Trajectory t1 = simulate(interval, nullptr, x0, 500, cfg, r1);
  const Trajectory t2 = simulate(interval, nullptr, x0, 500, cfg, r2);
  CHECK(testutil::bitwise_equal(t1.points, t2.points));
  bool moved = false;
  for (std::int64_t i = 0; i < t1.points.rows; ++i) {
    const double x = t1.points.row(i)[0];
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
    moved = moved || std::abs(x - 0.99) > 0.05;
  }
  CHECK(moved);  // noise scale 0.1 certainly explores

  const std::vector<double> outside = {1.7};
  Rng r3 = Rng::substream(113, {1});
  CHECK_THROWS(simulate(interval, nullptr, outside, 10, cfg, r3));
}

TEST_CASE("trajectory records energy and bias rows consistently") {
  const QuadraticWell well(2, 1.0);
  SdeConfig cfg;
  cfg.dt = 1e-3;
  cfg.stride = 25;
  Rng rng = Rng::substream(127, {0});
  const std::vector<double> x0 = {0.5, 0.5};
  const Trajectory traj = simulate(well, nullptr, x0, 100, cfg, rng);
  CHECK(traj.points.rows == 4);
  REQUIRE(traj.energy.size() == 4);
  REQUIRE(traj.bias.size() == 4);
  for (std::int64_t i = 0; i < 4; ++i) {
    CHECK(traj.energy[static_cast<std::size_t>(i)] ==
          doctest::Approx(well.energy(traj.points.row(i))).epsilon(1e-14));
    CHECK(traj.bias[static_cast<std::size_t>(i)] == 0.0);
  }
}

TEST_CASE("first_hit splits one-dimensional Brownian paths by position") {
  const BrownianInterval interval;  // beta = 2: dx = dW

  auto hit_fraction = [&interval](double x0, std::int64_t n, double dt) {
    std::int64_t hit_b = 0;
    for (std::int64_t t = 0; t < n; ++t) {
      Rng rng = Rng::substream(131, {static_cast<std::uint64_t>(t), 7});
      const std::vector<double> start = {x0};
      const HitResult r = first_hit(interval, start, dt, interval.beta(), 10000000, rng);
      REQUIRE(r != HitResult::kTimeout);
      hit_b += r == HitResult::kB ? 1 : 0;
    }
    return static_cast<double>(hit_b) / static_cast<double>(n);
  };

  const std::int64_t n = 10000;
  const double f_mid = hit_fraction(0.5, n, 1e-4);
  const double se_mid = std::sqrt(0.25 / static_cast<double>(n));
  CHECK(std::abs(f_mid - 0.5) < 3.0 * se_mid);

  const double f_quarter = hit_fraction(0.25, n, 1e-4);
  const double se_quarter = std::sqrt(0.25 * 0.75 / static_cast<double>(n));
  CHECK(std::abs(f_quarter - 0.25) < 3.0 * se_quarter);

  // Near the B boundary with a fine step the hit is almost sure.
  const double f_near = hit_fraction(0.995, 2000, 1e-6);
  CHECK(f_near > 0.985);

  // Starting inside a metastable set is a caller error.
  Rng rng = Rng::substream(131, {0, 9});
  const std::vector<double> in_b = {1.0};
  CHECK_THROWS(first_hit(interval, in_b, 1e-4, interval.beta(), 10, rng));

  // A tiny cap times out from the middle.
  Rng rng2 = Rng::substream(131, {1, 9});
  const std::vector<double> mid = {0.5};
  CHECK(first_hit(interval, mid, 1e-6, interval.beta(), 5, rng2) == HitResult::kTimeout);
}

TEST_CASE("coordinate and identity collective variables") {
  CvMap planar = coordinate_cvs({0, 1}, 5);
  CHECK(planar.dim_in == 5);
  CHECK(planar.dim_cv == 2);
  const std::vector<double> x = {1.0, -2.0, 3.0, 4.0, 5.0};
  const std::vector<double> s = planar.eval(x);
  CHECK(s == std::vector<double>({1.0, -2.0}));
  std::vector<double> grad(5, 0.5);
  const std::vector<double> w = {10.0, 20.0};
  planar.add_jacobian_transpose(x, w, grad);
  CHECK(grad == std::vector<double>({10.5, 20.5, 0.5, 0.5, 0.5}));

  CvMap ident = identity_cvs(3);
  const std::vector<double> y = {0.1, 0.2, 0.3};
  CHECK(ident.eval(y) == y);
}

TEST_CASE("metadynamics bias matches its Gaussian formula") {
  MetadynamicsBias bias(coordinate_cvs({0, 1}, 2), 1.5, 0.2);
  CHECK(bias.deposit_count() == 0);
  const std::vector<double> probe = {0.3, -0.1};
  CHECK(bias.energy(probe) == 0.0);

  const std::vector<double> c1 = {0.0, 0.0};
  const std::vector<double> c2 = {0.5, 0.25};
  bias.deposit(c1);
  bias.deposit(c2);
  CHECK(bias.deposit_count() == 2);

  auto manual = [&](double sx, double sy) {
    double e = 0.0;
    const std::vector<std::vector<double>> centers = {{0.0, 0.0}, {0.5, 0.25}};
    for (const auto& c : centers) {
      const double d2 = (sx - c[0]) * (sx - c[0]) + (sy - c[1]) * (sy - c[1]);
      e += 1.5 * std::exp(-d2 / (2.0 * 0.2 * 0.2));
    }
    return e;
  };
  for (const auto& p : std::vector<std::vector<double>>{
           {0.0, 0.0}, {0.3, -0.1}, {0.5, 0.25}, {-1.0, 2.0}}) {
    CHECK(bias.energy(p) == doctest::Approx(manual(p[0], p[1])).epsilon(1e-13));
    CHECK(bias.energy_cv(p) == doctest::Approx(manual(p[0], p[1])).epsilon(1e-13));
    CHECK(bias.energy(p) >= 0.0);
  }

  // Gradient against finite differences.
  for (const auto& p : std::vector<std::vector<double>>{{0.2, 0.1}, {-0.4, 0.6}}) {
    std::vector<double> grad(2, 0.0);
    bias.add_gradient(p, grad);
    for (std::size_t i = 0; i < 2; ++i) {
      std::vector<double> pp = p;
      std::vector<double> pm = p;
      pp[i] += 1e-7;
      pm[i] -= 1e-7;
      const double fd = (bias.energy(pp) - bias.energy(pm)) / 2e-7;
      CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("metadynamics bias grows monotonically with deposits") {
  MetadynamicsBias bias(identity_cvs(1), 0.8, 0.3);
  const std::vector<std::vector<double>> probes = {{-1.0}, {-0.5}, {0.0}, {0.7}};
  std::vector<double> previous(probes.size(), 0.0);
  Rng rng = Rng::substream(137, {0});
  for (int k = 0; k < 30; ++k) {
    const std::vector<double> center = {rng.uniform(-1.2, 1.2)};
    bias.deposit(center);
    for (std::size_t i = 0; i < probes.size(); ++i) {
      const double e = bias.energy(probes[i]);
      CHECK(e >= previous[i]);  // each new Gaussian only adds energy
      CHECK(e >= 0.0);
      previous[i] = e;
    }
  }
  CHECK(bias.deposit_count() == 30);
}

TEST_CASE("metadynamics run escapes a double well that traps plain dynamics") {
  const DoubleWell well(3.0, 5.0);  // barrier 3, beta 5: unbiased escape ~ e^-15
  const std::vector<double> x0 = {-1.0};

  MetadynamicsConfig meta;
  meta.height = 0.5;
  meta.width = 0.2;
  meta.deposit_interval = 200;
  meta.deposits = 100;
  meta.sample_stride = 50;
  meta.sde.dt = 1e-3;
  Rng rng_meta = Rng::substream(139, {0});
  const MetadynamicsRun run = metadynamics_run(well, identity_cvs(1), meta, x0, rng_meta);

  CHECK(run.bias.deposit_count() == 100);
  REQUIRE(run.samples.rows > 0);
  CHECK(run.bias_at_sample.size() == static_cast<std::size_t>(run.samples.rows));
  // The first deposit lands at the start point, so the terminal bias is
  // strictly positive in the originating basin.
  CHECK(run.bias.energy(x0) > 0.0);

  const std::int64_t total_steps = meta.deposit_interval * meta.deposits;
  SdeConfig plain;
  plain.dt = meta.sde.dt;
  plain.stride = meta.sample_stride;
  Rng rng_plain = Rng::substream(139, {1});
  const Trajectory unbiased = simulate(well, nullptr, x0, total_steps, plain, rng_plain);

  auto right_fraction = [](const Tensor& pts) {
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < pts.rows; ++i) hits += pts.row(i)[0] > 0.0 ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pts.rows);
  };
  const double biased_right = right_fraction(run.samples);
  const double unbiased_right = right_fraction(unbiased.points);
  CHECK(unbiased_right < 0.01);
  CHECK(biased_right > 0.10);
  CHECK(biased_right > unbiased_right);
}

TEST_CASE("metadynamics explores the rugged Mueller landscape beyond plain dynamics") {
  RuggedMuellerParams params;
  params.dim = 2;
  const RuggedMueller rm(params);
  const std::vector<double> x0 = {params.center_a[0], params.center_a[1]};

  MetadynamicsConfig meta;
  meta.height = 2.5;
  meta.width = 0.15;
  meta.deposit_interval = 250;
  meta.deposits = 200;
  meta.sample_stride = 100;
  meta.sde.dt = 1e-5;
  Rng rng_meta = Rng::substream(149, {0});
  const MetadynamicsRun run = metadynamics_run(rm, coordinate_cvs({0, 1}, 2), meta, x0, rng_meta);

  SdeConfig plain;
  plain.dt = meta.sde.dt;
  plain.stride = meta.sample_stride;
  Rng rng_plain = Rng::substream(149, {1});
  const std::int64_t total_steps = meta.deposit_interval * meta.deposits;
  const Trajectory unbiased = simulate(rm, nullptr, x0, total_steps, plain, rng_plain);

  auto far_fraction = [&params](const Tensor& pts) {
    std::int64_t far = 0;
    for (std::int64_t i = 0; i < pts.rows; ++i) {
      const std::span<const double> x = pts.row(i);
      const bool near_a = planar_dist(x, params.center_a) < 0.3;
      const bool near_b = planar_dist(x, params.center_b) < 0.3;
      far += (!near_a && !near_b) ? 1 : 0;
    }
    return static_cast<double>(far) / static_cast<double>(pts.rows);
  };
  const double biased_far = far_fraction(run.samples);
  const double unbiased_far = far_fraction(unbiased.points);
  CHECK(biased_far > unbiased_far);
  CHECK(biased_far > 0.05);
}

TEST_CASE("umbrella restraint pins collective variables at the Gaussian scale") {
  RuggedMuellerParams params;
  params.dim = 2;
  const RuggedMueller rm(params);

  UmbrellaConfig cfg;
  cfg.k_us = 2000.0;
  cfg.windows = 8;
  cfg.steps_per_window = 2000;
  cfg.sample_interval = 10;
  cfg.sde.dt = 1e-5;
  const std::vector<double> x_init = {params.center_a[0], params.center_a[1]};
  const std::vector<double> target = {-0.05, 0.467};  // the middle basin
  Rng rng = Rng::substream(151, {0});
  const UmbrellaRun run =
      umbrella_relax(rm, coordinate_cvs({0, 1}, 2), cfg, target, x_init, 100, rng);

  CHECK(run.samples.rows == 100);
  const double sigma = 1.0 / std::sqrt(rm.beta() * cfg.k_us);
  CHECK(run.achieved_rms < 3.0 * sigma);
  // Every kept sample individually respects the tolerance used for keeping.
  for (std::int64_t i = 0; i < run.samples.rows; ++i) {
    const std::span<const double> x = run.samples.row(i);
    const double dx = x[0] - target[0];
    const double dy = x[1] - target[1];
    const double rms = std::sqrt((dx * dx + dy * dy) / 2.0);
    CHECK(rms <= cfg.tolerance_factor * sigma * (1.0 + 1e-12));
  }

  // Asking for the point we already occupy returns essentially immediately.
  Rng rng2 = Rng::substream(151, {1});
  const std::vector<double> self_target = {x_init[0], x_init[1]};
  const UmbrellaRun easy =
      umbrella_relax(rm, coordinate_cvs({0, 1}, 2), cfg, self_target, x_init, 50, rng2);
  CHECK(easy.samples.rows == 50);
  CHECK(easy.achieved_rms < 3.0 * sigma);
}

TEST_CASE("umbrella bias energy and gradient follow the harmonic formula") {
  UmbrellaBias bias(coordinate_cvs({0, 1}, 3), 150.0, {0.2, -0.4});
  const std::vector<double> at_target = {0.2, -0.4, 9.9};
  CHECK(bias.energy(at_target) == 0.0);
  const std::vector<double> x = {0.5, 0.1, -2.0};
  const double expected = 0.5 * 150.0 * ((0.5 - 0.2) * (0.5 - 0.2) + (0.1 + 0.4) * (0.1 + 0.4));
  CHECK(bias.energy(x) == doctest::Approx(expected).epsilon(1e-13));
  std::vector<double> grad(3, 0.0);
  bias.add_gradient(x, grad);
  CHECK(grad[0] == doctest::Approx(150.0 * 0.3).epsilon(1e-12));
  CHECK(grad[1] == doctest::Approx(150.0 * 0.5).epsilon(1e-12));
  CHECK(grad[2] == 0.0);

  bias.set_target({0.5, 0.1});
  CHECK(bias.energy(x) == 0.0);
  bias.set_k_us(10.0);
  CHECK(bias.k_us() == 10.0);
}

TEST_SUITE_END();

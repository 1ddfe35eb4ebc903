#pragma once

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dastr/rng.hpp"
#include "dastr/tensor.hpp"

namespace dastr {

// Axis-aligned rectangular domain.
struct Box {
  std::vector<double> lo;
  std::vector<double> hi;

  Box() = default;
  Box(std::vector<double> lo_in, std::vector<double> hi_in);
  static Box cube(std::int64_t dim, double lo, double hi);

  std::int64_t dim() const { return static_cast<std::int64_t>(lo.size()); }
  bool contains(std::span<const double> x) const;
  bool strictly_inside(std::span<const double> x, double margin = 0.0) const;
  double log_volume() const;
  // Reflects x into the box coordinate-wise (mirror at each face).
  void reflect(std::span<double> x) const;
};

// Energy landscape with metastable sets A and B.  All committor machinery is
// written against this interface; concrete landscapes ship below and tests
// add their own.
class Potential {
 public:
  virtual ~Potential() = default;

  virtual std::string id() const = 0;
  virtual std::int64_t dim() const = 0;
  virtual double beta() const = 0;
  virtual const Box& domain() const = 0;

  virtual double energy(std::span<const double> x) const = 0;
  // Adds the potential gradient into `grad` (accumulating, so bias terms can
  // share the buffer).
  virtual void add_gradient(std::span<const double> x, std::span<double> grad) const = 0;

  // Metastable-set membership.  Sets are closed (boundary points belong).
  virtual bool in_a(std::span<const double> x) const = 0;
  virtual bool in_b(std::span<const double> x) const = 0;

  // Draws one point from the boundary density p_A (resp. p_B) used by the
  // penalty terms.  Every drawn point satisfies the corresponding predicate.
  virtual void sample_a(Rng& rng, std::span<double> out) const = 0;
  virtual void sample_b(Rng& rng, std::span<double> out) const = 0;

  // Uniform sampling on Omega \ (A u B) with an exactly normalized density;
  // used for initial training sets and as a Gibbs reference where V == 0.
  virtual void sample_uniform_outside_ab(Rng& rng, std::span<double> out) const = 0;
  virtual double log_uniform_outside_ab_density() const = 0;

  bool in_a_or_b(std::span<const double> x) const { return in_a(x) || in_b(x); }
};

// Checks x is in the domain, then returns (V, gradient).
std::pair<double, std::vector<double>> eval_potential(const Potential& p,
                                                      std::span<const double> x);

// Batch helpers over (n,d) tensors.
std::vector<double> energies(const Potential& p, const Tensor& points);
enum class MetastableSet { kA, kB };
Tensor sample_boundary(const Potential& p, MetastableSet which, std::int64_t n, Rng& rng);
Tensor sample_uniform_outside_ab(const Potential& p, std::int64_t n, Rng& rng);

// Extended rugged Mueller landscape on R^d (d >= 2):
//   V(x) = V_rm(x1,x2) + 1/(2 sigma^2) * sum_{i>=3} x_i^2,
//   V_rm(x1,x2) = sum_{i=1..4} D_i exp(a_i u^2 + b_i u v + c_i v^2)
//                 + gamma sin(2 k pi x1) sin(2 k pi x2),
// with u = x1 - xi_i, v = x2 - eta_i.  The four-term exponential constants
// ship with the widely used Mueller-Brown values and the rugged term defaults
// to (gamma, k) = (9, 5); all of them are configuration, not code.
struct RuggedMuellerParams {
  std::array<double, 4> big_d{-200.0, -100.0, -170.0, 15.0};
  std::array<double, 4> a{-1.0, -1.0, -6.5, 0.7};
  std::array<double, 4> b{0.0, 0.0, 11.0, 0.6};
  std::array<double, 4> c{-10.0, -10.0, -6.5, 0.7};
  std::array<double, 4> xi{1.0, 0.0, -0.5, -1.0};
  std::array<double, 4> eta{0.0, 0.5, 1.5, 1.0};
  double gamma = 9.0;
  double k = 5.0;
  double sigma = 0.05;        // extension confinement width
  double beta = 0.1;          // inverse temperature
  std::int64_t dim = 10;      // embedding dimension (2 = no extension)
  double set_radius = 0.1;    // metastable cylinder radius in the (x1,x2) plane
  std::array<double, 2> center_a{-0.558, 1.441};
  std::array<double, 2> center_b{0.623, 0.028};
};

class RuggedMueller final : public Potential {
 public:
  explicit RuggedMueller(RuggedMuellerParams params);

  std::string id() const override { return "rugged-mueller"; }
  std::int64_t dim() const override { return params_.dim; }
  double beta() const override { return params_.beta; }
  const Box& domain() const override { return box_; }
  double energy(std::span<const double> x) const override;
  void add_gradient(std::span<const double> x, std::span<double> grad) const override;
  bool in_a(std::span<const double> x) const override;
  bool in_b(std::span<const double> x) const override;
  void sample_a(Rng& rng, std::span<double> out) const override;
  void sample_b(Rng& rng, std::span<double> out) const override;
  void sample_uniform_outside_ab(Rng& rng, std::span<double> out) const override;
  double log_uniform_outside_ab_density() const override;

  const RuggedMuellerParams& params() const { return params_; }
  // The planar part V_rm(x1,x2) alone.
  double planar_energy(double x1, double x2) const;

  // log of the partition function of exp(-beta_eff * (V + bias2d)) over the
  // domain, where the optional bias depends only on (x1, x2).  Composite
  // Simpson quadrature: the planar factor on the (x1,x2) box and the
  // Gaussian extension factor per extra coordinate.  Used to normalize
  // initial-stage proposal densities exactly.
  double log_gibbs_normalizer(double beta_eff,
                              const std::function<double(double, double)>* bias2d = nullptr,
                              std::int64_t grid = 801) const;

 private:
  void planar_gradient(double x1, double x2, double* g1, double* g2) const;

  RuggedMuellerParams params_;
  Box box_;
};

// Free Brownian particle between two spheres: V == 0 on the box [-b, b]^d,
// A = {|x| <= a}, B = {|x| >= b}.  The committor is the classical harmonic
// radial profile, available in closed form for d >= 3.
class BrownianAnnulus final : public Potential {
 public:
  BrownianAnnulus(std::int64_t dim, double inner_radius, double outer_radius, double beta = 0.5);

  std::string id() const override { return "brownian-annulus"; }
  std::int64_t dim() const override { return dim_; }
  double beta() const override { return beta_; }
  const Box& domain() const override { return box_; }
  double energy(std::span<const double>) const override { return 0.0; }
  void add_gradient(std::span<const double>, std::span<double>) const override {}
  bool in_a(std::span<const double> x) const override;
  bool in_b(std::span<const double> x) const override;
  void sample_a(Rng& rng, std::span<double> out) const override;
  void sample_b(Rng& rng, std::span<double> out) const override;
  void sample_uniform_outside_ab(Rng& rng, std::span<double> out) const override;
  double log_uniform_outside_ab_density() const override;

  double inner_radius() const { return inner_radius_; }
  double outer_radius() const { return outer_radius_; }

  // Analytic committor; requires d >= 3 and a <= |x| <= b (up to a 1e-9
  // rounding allowance on the radius).
  double reference_committor(std::span<const double> x) const;
  double reference_committor_radial(double r) const;

 private:
  void sample_sphere(Rng& rng, double radius, std::span<double> out) const;

  std::int64_t dim_;
  double inner_radius_;
  double outer_radius_;
  double beta_;
  Box box_;
};

// Free Brownian particle on [0,1]: A = {x <= 0}, B = {x >= 1}.  The committor
// is exactly q(x) = x; used by the Monte-Carlo oracles' own validation.
class BrownianInterval final : public Potential {
 public:
  explicit BrownianInterval(double beta = 2.0);

  std::string id() const override { return "brownian-interval"; }
  std::int64_t dim() const override { return 1; }
  double beta() const override { return beta_; }
  const Box& domain() const override { return box_; }
  double energy(std::span<const double>) const override { return 0.0; }
  void add_gradient(std::span<const double>, std::span<double>) const override {}
  bool in_a(std::span<const double> x) const override { return x[0] <= 0.0; }
  bool in_b(std::span<const double> x) const override { return x[0] >= 1.0; }
  void sample_a(Rng&, std::span<double> out) const override { out[0] = 0.0; }
  void sample_b(Rng&, std::span<double> out) const override { out[0] = 1.0; }
  void sample_uniform_outside_ab(Rng& rng, std::span<double> out) const override {
    out[0] = rng.uniform();
  }
  double log_uniform_outside_ab_density() const override { return 0.0; }

 private:
  double beta_;
  Box box_;
};

// Composite Simpson quadrature of f on [lo, hi] with `grid` nodes (made odd
// internally).  Shared by the Gibbs normalizers and tests.
double simpson_1d(const std::function<double(double)>& f, double lo, double hi,
                  std::int64_t grid);

}  // namespace dastr

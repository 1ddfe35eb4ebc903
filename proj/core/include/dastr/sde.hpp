#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dastr/potentials.hpp"
#include "dastr/rng.hpp"
#include "dastr/tensor.hpp"

namespace dastr {

// Collective-variable map s: R^d -> R^m together with the transposed-Jacobian
// action needed to push CV-space forces back to configuration space.
struct CvMap {
  std::int64_t dim_in = 0;
  std::int64_t dim_cv = 0;
  std::function<void(std::span<const double> x, std::span<double> s)> value;
  // grad_x += J_s(x)^T w for a CV-space covector w.
  std::function<void(std::span<const double> x, std::span<const double> w,
                     std::span<double> grad_x)>
      add_jacobian_transpose;

  std::vector<double> eval(std::span<const double> x) const;
};

// CVs that project onto a subset of coordinates (e.g. the planar part of the
// extended rugged Mueller landscape).
CvMap coordinate_cvs(std::vector<std::int64_t> coords, std::int64_t dim_in);
CvMap identity_cvs(std::int64_t dim);

// An additive bias potential V_bias(x) entering the dynamics and the biased
// sampling density.
class Bias {
 public:
  virtual ~Bias() = default;
  virtual double energy(std::span<const double> x) const = 0;
  virtual void add_gradient(std::span<const double> x, std::span<double> grad) const = 0;
};

// History-dependent Gaussian bias deposited along a trajectory's CV path:
//   V_G(x) = sum_deposits w * exp(-sum_i (s_i(x) - s_i(center))^2 / (2 sigma_i^2)).
// The value at any time covers exactly the deposits made so far.
class MetadynamicsBias final : public Bias {
 public:
  MetadynamicsBias(CvMap cv, double height, double width);

  void deposit(std::span<const double> x);
  std::int64_t deposit_count() const {
    return static_cast<std::int64_t>(centers_.size()) / cv_.dim_cv;
  }

  double height() const { return height_; }
  double width() const { return width_; }
  const CvMap& cv() const { return cv_; }
  // Flattened deposit centers in CV space, dim_cv entries per deposit.
  const std::vector<double>& centers() const { return centers_; }

  // Bias evaluated directly at a CV-space point.
  double energy_cv(std::span<const double> s) const;

  double energy(std::span<const double> x) const override;
  void add_gradient(std::span<const double> x, std::span<double> grad) const override;

 private:
  CvMap cv_;
  double height_;
  double width_;
  std::vector<double> centers_;
};

// Harmonic restraint pinning the CVs to a target:
//   V_US(x) = 1/2 * k_us * sum_i (s_i(x) - target_i)^2.
class UmbrellaBias final : public Bias {
 public:
  UmbrellaBias(CvMap cv, double k_us, std::vector<double> target);

  double k_us() const { return k_us_; }
  const std::vector<double>& target() const { return target_; }
  void set_target(std::vector<double> target);
  void set_k_us(double k_us);

  double energy(std::span<const double> x) const override;
  void add_gradient(std::span<const double> x, std::span<double> grad) const override;

 private:
  CvMap cv_;
  double k_us_;
  std::vector<double> target_;
};

// --- integration --------------------------------------------------------------

// Overdamped Langevin step:
//   x <- x - grad(V + V_bias)(x) dt + sqrt(2 dt / beta) xi,   xi ~ N(0, I),
// followed by mirror reflection at the domain box (zero-flux boundaries).
struct SdeConfig {
  double dt = 1e-5;
  double beta = 0.0;  // 0 means "use the potential's beta"; override for
                      // artificial-temperature runs
  std::int64_t stride = 1;
};

struct Trajectory {
  Tensor points;                 // (n_recorded, d)
  std::vector<double> energy;    // V at each recorded point
  std::vector<double> bias;      // V_bias at each recorded point (0 without bias)
};

Trajectory simulate(const Potential& potential, const Bias* bias, std::span<const double> x0,
                    std::int64_t steps, const SdeConfig& config, Rng& rng);

enum class HitResult { kA, kB, kTimeout };

// Runs the unbiased dynamics until the state enters A or B.  Membership is
// checked on the raw post-step state before any box reflection, so metastable
// sets touching the box boundary are reachable.
HitResult first_hit(const Potential& potential, std::span<const double> x0, double dt,
                    double beta, std::int64_t max_steps, Rng& rng);

// --- enhanced sampling ----------------------------------------------------------

struct MetadynamicsConfig {
  double height = 1.0;
  double width = 0.1;
  std::int64_t deposit_interval = 1000;  // steps between deposits
  std::int64_t deposits = 100;           // total Gaussian terms
  std::int64_t sample_stride = 100;      // configuration collection interval
  SdeConfig sde;
};

struct MetadynamicsRun {
  Tensor samples;                    // collected outside A u B
  std::vector<double> bias_at_sample;  // V_G at collection time, per sample
  MetadynamicsBias bias;             // terminal bias (all deposits)
};

// Biased exploration run: deposits a Gaussian every deposit_interval steps
// (the first at step 0) for deposits*deposit_interval total steps, collecting
// strided configurations outside A u B along with the instantaneous bias.
MetadynamicsRun metadynamics_run(const Potential& potential, CvMap cv,
                                 const MetadynamicsConfig& config, std::span<const double> x0,
                                 Rng& rng);

struct UmbrellaConfig {
  double k_us = 200.0;
  std::int64_t windows = 8;              // restraint-target interpolation stages
  std::int64_t steps_per_window = 2000;  // relaxation steps per stage
  std::int64_t sample_interval = 10;     // collection interval in the final window
  std::int64_t max_steps = 0;            // 0: 50x windows*steps_per_window
  double tolerance_factor = 2.0;         // acceptance tol in restraint sigmas
  SdeConfig sde;
};

struct UmbrellaRun {
  Tensor samples;       // n_keep configurations near the target CVs
  double achieved_rms;  // RMS CV distance of the kept samples from the target
};

// Drags the system to the target CVs by stepping the restraint center through
// `windows` interpolation stages, then samples the final window, keeping
// configurations whose per-CV RMS distance to the target is within
// tolerance_factor / sqrt(beta * k_us).  Throws (reporting the achieved
// distance) if n_keep acceptances are not reached within the step cap.
UmbrellaRun umbrella_relax(const Potential& potential, CvMap cv, const UmbrellaConfig& config,
                           std::span<const double> target_cvs, std::span<const double> x_init,
                           std::int64_t n_keep, Rng& rng);

}  // namespace dastr

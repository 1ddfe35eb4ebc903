#pragma once

#include <functional>
#include <vector>

#include "dastr/autodiff.hpp"
#include "dastr/nets.hpp"
#include "dastr/optimizer.hpp"
#include "dastr/potentials.hpp"
#include "dastr/rng.hpp"
#include "dastr/tensor.hpp"

namespace dastr {

// Invertible density model on a rectangular box: an affine map to the unit
// cube composed with a coordinate-wise logit bijection to R^d, followed by a
// stack of affine coupling layers, with a standard Gaussian prior on the
// latent side.  Layers are grouped into blocks; each block rotates which
// coordinates sit in the frozen half and layers within a block alternate the
// two halves, so every coordinate is transformed many times.
//
// The subnet of each coupling layer is a two-weight-layer ReLU MLP whose last
// layer starts at zero, making a freshly constructed flow exactly the
// identity coupling (log-det contribution zero).  Raw scales pass through
// s_max*tanh(s/s_max) to keep exp(s) bounded.
struct FlowConfig {
  std::int64_t dim = 0;
  std::int64_t blocks = 5;
  std::int64_t layers_per_block = 8;
  std::int64_t hidden = 120;
  double s_max = 5.0;
  Box box;
};

class FlowModel {
 public:
  FlowModel(FlowConfig config, Rng& rng);

  const FlowConfig& config() const { return config_; }
  std::int64_t dim() const { return config_.dim; }
  std::int64_t layer_count() const { return static_cast<std::int64_t>(layers_.size()); }

  std::vector<Parameter> all_params() const;
  void set_all_params(const std::vector<Parameter>& params);

  // Normalizing direction: box interior -> R^d.  Writes the latent codes and
  // the per-sample total log|det| (box transform + couplings).  Throws a
  // domain error unless every point is strictly inside the box.
  void forward(const Tensor& x, Tensor* z, Tensor* log_det) const;
  // Generating direction: R^d -> box interior (exact inverse of forward).
  Tensor inverse(const Tensor& z) const;

  // log p(x) per sample; same domain requirements as forward.
  std::vector<double> log_density(const Tensor& x) const;

  // n draws from the model, always strictly inside the box.
  Tensor sample(std::int64_t n, Rng& rng) const;

  // Draws until n samples lie outside A u B, rejecting the rest.  Gives up
  // after max_passes rounds of n draws.  If total_draws is given it receives
  // the number of raw draws consumed, so acceptance = n / *total_draws.
  Tensor sample_outside_ab(std::int64_t n, const Potential& potential, Rng& rng,
                           std::int64_t max_passes = 100,
                           std::int64_t* total_draws = nullptr) const;

  // Differentiable log-density for training: parameters become tape leaves.
  struct Bound {
    const FlowModel* model = nullptr;
    ad::Tape* tape = nullptr;
    std::vector<BoundMlp> subnets;

    ad::Value log_density(ad::Value x) const;
    // All parameter leaves, flattened in all_params() order.
    std::vector<ad::Value> leaves() const;
  };
  Bound bind(ad::Tape& tape) const;

 private:
  struct Layer {
    std::vector<std::int64_t> frozen;
    std::vector<std::int64_t> active;
    Mlp subnet;  // widths {|frozen|, hidden, 2*|active|}
  };

  FlowConfig config_;
  std::vector<Layer> layers_;

  friend struct Bound;
};

// Cross-entropy training of the flow against an unnormalized target density
// given in linear space: each step takes a batch from a proposal, importance-
// weights it by target/proposal, self-normalizes the weights, and descends
// -sum_i coeff_i * log p_model(x_i).
//
// Two proposals are supported.  The two-argument form draws each batch from
// the current model itself, which is fine once the model overlaps the target.
// The form taking (samples, proposal_log_density) instead minibatches a fixed
// set of points with known log-densities; this is the robust choice when the
// fresh model has essentially no mass on the target's support (for example a
// box-uniform initialization in high dimension whose volume lies almost
// entirely inside a metastable set), because the fixed points tell the model
// directly where density is wanted.
//
// Self-normalization makes the parameter updates exactly independent of the
// target's scale: weights are reduced to ratios before any logarithm, so a
// power-of-two rescaling of the target cancels bit-for-bit, and any other
// positive constant cancels to rounding (~1 ulp).
struct CeTrainConfig {
  std::int64_t epochs = 50;
  std::int64_t steps_per_epoch = 1;
  std::int64_t batch = 5000;
  // Graph-building chunk; affects memory and rounding order, not semantics.
  std::int64_t chunk = 512;
  double max_reject_fraction = 0.10;
};

struct CeTrainTrace {
  std::vector<double> ce_per_epoch;  // self-normalized CE estimates
  std::int64_t rejected = 0;         // samples dropped for non-finite weights
  std::int64_t total = 0;            // samples drawn
};

using TargetDensity = std::function<std::vector<double>(const Tensor&)>;

CeTrainTrace train_flow_ce(FlowModel& model, const TargetDensity& target_density_unnorm,
                           const CeTrainConfig& config, AdamOptimizer& optimizer, Rng& rng);

// Fixed-proposal form: `samples` (n, d) were drawn from a known density whose
// log value at each row is `proposal_log_density`.  Each step minibatches
// min(config.batch, n) distinct rows.
CeTrainTrace train_flow_ce(FlowModel& model, const Tensor& samples,
                           const std::vector<double>& proposal_log_density,
                           const TargetDensity& target_density_unnorm,
                           const CeTrainConfig& config, AdamOptimizer& optimizer, Rng& rng);

}  // namespace dastr

#pragma once

#include <cstdint>
#include <vector>

#include "dastr/adaptive.hpp"
#include "dastr/flow.hpp"
#include "dastr/nets.hpp"
#include "dastr/potentials.hpp"
#include "dastr/tensor.hpp"

namespace dastr {

// Order-sensitive FNV-1a hash over parameter names and raw tensor bytes.
// Used to assert that a frozen model (the autoencoder during adaptive
// sampling) really never changes.
std::uint64_t parameter_hash(const std::vector<Parameter>& params);

// Smallest axis-aligned cube containing every latent code, padded by
// margin_fraction of the widest span on each side.  The latent flow's box.
Box latent_box(const Tensor& codes, double margin_fraction);

// Latent sampling machinery: a frozen autoencoder providing the collective
// variables, a flow density on the latent box, and the energy filter applied
// to decoded configurations.
struct LatentPipeline {
  Autoencoder ae;
  FlowModel latent_flow;
  double energy_threshold = 0.0;
  std::int64_t accepted = 0;  // cumulative energy-filter outcomes
  std::int64_t rejected = 0;

  LatentPipeline(Autoencoder ae_in, FlowModel flow_in, double threshold)
      : ae(std::move(ae_in)), latent_flow(std::move(flow_in)), energy_threshold(threshold) {}
};

// Importance weights for x-space samples: the adaptive sampling density
// evaluated at the decoded round trip of each sample's latent code, divided
// by the latent-flow density at that code.  Non-finite weights are dropped
// and counted.
struct LatentWeights {
  std::vector<double> weights;  // finite, nonnegative
  std::int64_t dropped = 0;
};
LatentWeights latent_ce_weights(const Tensor& x, const CommittorNet& net,
                                const Potential& potential, const Bias* bias,
                                const Autoencoder& ae, const FlowModel& latent_flow);

// Decodes latent samples and keeps those with V(decode(s)) <= threshold.
// Returns the surviving configurations with their latent log-densities and
// the acceptance fraction; updates the pipeline counters.  Zero survivors is
// an error carrying an energy histogram for diagnosis.
struct FilterResult {
  Tensor samples;                   // decoded accepted rows
  std::vector<double> log_density;  // latent-flow log density of their codes
  double acceptance = 0.0;
};
FilterResult decode_and_filter(LatentPipeline& pipeline, const Potential& potential,
                               const Tensor& latents);

struct LatentRunConfig {
  DastrConfig dastr;
  double min_acceptance = 0.5;  // abort threshold on the energy filter
};

// Algorithm: dastr_run with the flow living on the autoencoder's latent
// space.  Each adaptive step fits the latent flow to s -> p_{V,q}(decode(s))
// by cross-entropy, draws latents, decodes and energy-filters them, discards
// decoded points outside the domain or inside A u B, and refines the
// training set with the survivors (stored density: the latent-flow density
// of their codes).  The autoencoder is never trained here.  The per-stage
// acceptance record is the energy-filter pass fraction; below
// min_acceptance the run aborts.
DastrResult dastr_latent_run(const LatentRunConfig& config, const Potential& potential,
                             CommittorNet& net, LatentPipeline& pipeline, DastrState& state,
                             const Tensor& boundary_a, const Tensor& boundary_b,
                             const StageCallback& callback = {});

}  // namespace dastr

#pragma once

#include <functional>
#include <vector>

#include "dastr/autodiff.hpp"
#include "dastr/flow.hpp"
#include "dastr/nets.hpp"
#include "dastr/optimizer.hpp"
#include "dastr/potentials.hpp"
#include "dastr/rng.hpp"
#include "dastr/sde.hpp"
#include "dastr/tensor.hpp"

namespace dastr {

// --- staged training set ------------------------------------------------------------

// Interior samples grouped by the density that generated them.  The stored
// value is the log of that density at each sample, kept alongside the points
// so importance ratios never need the generator again.
struct Stage {
  Tensor samples;                   // (n_j, d)
  std::vector<double> log_density;  // log p_j(x_{j,i}), finite
};

struct StagedTrainingSet {
  std::vector<Stage> stages;

  std::int64_t total() const;
  std::int64_t dim() const;
  // Mixture weights alpha_j = n_j / N.
  std::vector<double> alphas() const;
  // Checks shapes, stored-density finiteness, and that no sample lies in
  // A u B; throws with the offending stage and row on failure.
  void validate(const Potential& potential) const;
};

enum class RefinePolicy {
  kReplaceAll,    // drop every previous interior stage
  kKeepFraction,  // retain a fixed fraction of the provenance stage, drop the rest
};

// Concatenation of every stage's samples, in stage order.
Tensor pooled_samples(const StagedTrainingSet& tset);

// Concatenation of every stage's stored log-densities, matching pooled_samples.
std::vector<double> pooled_log_density(const StagedTrainingSet& tset);

// Installs the next stage of interior samples.  Replace-all keeps only
// new_stage.  Keep-fraction truncates stage 0 (the provenance samples) to
// ceil(keep_fraction * its original size) on first use, drops later stages,
// and appends new_stage, so the set is always {retained provenance, newest
// draws}.  Mixture weights are implied by the resulting counts.
void refine_training_set(StagedTrainingSet& tset, Stage new_stage, RefinePolicy policy,
                         double keep_fraction);

// --- adaptive sampling density --------------------------------------------------------

// Unnormalized sampling density |grad q(x)|^2 * exp(-beta*(V + V_bias)(x)) in
// linear space, evaluated row-wise.  The bias may be null.  Zero values are
// legitimate (constant network); callers that need a positive target must
// check.
std::vector<double> sampling_density_unnorm(const CommittorNet& net, const Potential& potential,
                                            const Bias* bias, const Tensor& x);

// --- variational loss -----------------------------------------------------------------

enum class MixtureMode {
  // Per-sample coefficient alpha_j / n_j, the staged form as written.  With
  // alpha_j = n_j/N this equals the pooled mean analytically; only the
  // floating-point association differs.
  kPerStage,
  kPooled,  // per-sample coefficient 1/N
};

// Index selection for one loss evaluation.  Empty interior means "all
// samples"; empty boundary lists mean "all boundary points".  Interior
// indices address the pooled concatenation of stages in order.
struct LossBatch {
  std::vector<std::int64_t> interior;
  std::vector<std::int64_t> boundary_a;
  std::vector<std::int64_t> boundary_b;
};

struct LossStats {
  std::int64_t skipped = 0;       // non-finite IS ratios dropped
  std::int64_t interior_used = 0; // samples entering the interior term
  double interior_value = 0.0;
  double penalty_value = 0.0;     // unscaled (before lambda)
};

// Builds the discretized variational loss on the tape:
//
//   sum_i c_i * |grad q(x_i)|^2 * exp(-beta V(x_i)) / p(x_i)
//     + lambda * (mean_A q^2 + mean_B (1-q)^2)
//
// where c_i carries the mixture coefficient and the minibatch scale N/m.
// Non-finite importance ratios are skipped and counted; more than
// max_skip_fraction of the batch skipped is an error.
ad::Value variational_loss(ad::Tape& tape, const CommittorNet& net,
                           const StagedTrainingSet& tset, const Potential& potential,
                           const Tensor& boundary_a, const Tensor& boundary_b, double lambda,
                           const LossBatch& batch, MixtureMode mode = MixtureMode::kPerStage,
                           double max_skip_fraction = 0.05, LossStats* stats = nullptr);

// --- committor training ----------------------------------------------------------------

struct LrSchedule {
  double base = 1e-3;
  double decay = 1.0;        // multiplicative factor
  std::int64_t every = 0;    // epochs between decays; 0 disables decay
};

// Learning rate after `epoch` completed epochs (cumulative across stages).
double schedule_lr(const LrSchedule& schedule, std::int64_t epoch);

struct QTrainConfig {
  std::int64_t epochs = 50;
  std::int64_t batch = 1000;          // interior minibatch m
  std::int64_t boundary_batch = 0;    // 0: same as batch
  std::int64_t chunk = 1000;          // graph-building chunk (memory only)
  double lambda = 10.0;
  MixtureMode mode = MixtureMode::kPerStage;
  double max_skip_fraction = 0.05;
  LrSchedule lr;
};

struct QTrainTrace {
  std::vector<double> loss_per_epoch;  // mean minibatch loss
  std::int64_t skipped = 0;
};

// Minibatch training of the committor net: each epoch shuffles the pooled
// interior indices, walks them in batches (dropping a trailing partial batch
// when a full one exists), pairs every step with fresh boundary draws, and
// applies one Adam update per step.  `epoch_offset` is the cumulative epoch
// count before this call; the learning-rate schedule is evaluated against it
// so decay continues seamlessly across stages.
QTrainTrace train_committor(CommittorNet& net, const StagedTrainingSet& tset,
                            const Potential& potential, const Tensor& boundary_a,
                            const Tensor& boundary_b, const QTrainConfig& config,
                            AdamOptimizer& optimizer, std::int64_t epoch_offset, Rng& rng);

// --- the staged adaptive loop ------------------------------------------------------------

struct DastrConfig {
  std::int64_t n_adaptive = 1;   // stages
  std::int64_t n_e = 50;         // committor epochs per stage
  std::int64_t n_e_flow = 50;    // flow epochs per stage
  QTrainConfig q;
  double flow_lr = 1e-4;
  CeTrainConfig flow_ce;         // batch m' and chunking
  std::int64_t n_new_per_stage = 0;  // interior samples per refinement; 0: initial interior count
  RefinePolicy policy = RefinePolicy::kReplaceAll;
  double keep_fraction = 0.5;
  std::int64_t sample_max_passes = 100;
  const Bias* sampling_bias = nullptr;  // optional V_bias in the sampling density
  std::uint64_t seed = 0;
  // Leave the loop after this stage completes (state stays resumable);
  // -1 disables.  Exists so interrupted-run recovery is testable without
  // killing the process.
  std::int64_t stop_after_stage = -1;
};

// Mutable loop state, grouped so a caller can checkpoint and resume exactly:
// optimizers carry their moments, next_stage the loop position, and
// epoch_counter the cumulative committor epochs for the lr schedule.
struct DastrState {
  StagedTrainingSet tset;
  std::int64_t next_stage = 0;
  std::int64_t epoch_counter = 0;
  AdamOptimizer q_opt;
  AdamOptimizer flow_opt;

  DastrState(StagedTrainingSet initial, const DastrConfig& config)
      : tset(std::move(initial)),
        q_opt(config.q.lr.base),
        flow_opt(config.flow_lr) {}
};

struct StageRecord {
  std::int64_t stage = 0;
  double q_loss = 0.0;      // final-epoch mean loss
  double flow_ce = 0.0;     // final-epoch CE (NaN when no flow step ran)
  double acceptance = 0.0;  // fraction of flow draws outside A u B (NaN without flow)
  std::int64_t tset_size = 0;
  std::int64_t skipped = 0;  // IS-ratio skips during committor training
  double error = 0.0;        // reference error, filled by the callback (NaN if none)
};

struct DastrResult {
  std::vector<StageRecord> stages;
};

// Called after each completed stage with the up-to-date state; may fill
// record.error and persist checkpoints.
using StageCallback =
    std::function<void(const DastrState& state, const CommittorNet& net, StageRecord& record)>;

// Algorithm: for each stage, train the committor on the staged set; then
// (unless this is the final stage or `flow` is null) fit the flow to the
// current sampling density by cross-entropy, draw the next interior stage
// from it, and refine the training set.  A null flow turns the loop into the
// fixed-sample baseline at the same epoch budget.  All randomness derives
// from config.seed and the stage index, so resuming from state.next_stage
// reproduces an uninterrupted run exactly.
DastrResult dastr_run(const DastrConfig& config, const Potential& potential, CommittorNet& net,
                      FlowModel* flow, DastrState& state, const Tensor& boundary_a,
                      const Tensor& boundary_b, const StageCallback& callback = {});

}  // namespace dastr

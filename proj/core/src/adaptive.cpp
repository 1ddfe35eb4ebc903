#include "dastr/adaptive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dastr/common.hpp"

namespace dastr {

// --- StagedTrainingSet ----------------------------------------------------------------

std::int64_t StagedTrainingSet::total() const {
  std::int64_t n = 0;
  for (const Stage& stage : stages) n += stage.samples.rows;
  return n;
}

std::int64_t StagedTrainingSet::dim() const {
  if (stages.empty()) throw make_error("StagedTrainingSet: no stages");
  return stages.front().samples.cols;
}

std::vector<double> StagedTrainingSet::alphas() const {
  const std::int64_t n = total();
  if (n == 0) throw make_error("StagedTrainingSet: empty");
  std::vector<double> a;
  a.reserve(stages.size());
  for (const Stage& stage : stages) {
    a.push_back(static_cast<double>(stage.samples.rows) / static_cast<double>(n));
  }
  return a;
}

void StagedTrainingSet::validate(const Potential& potential) const {
  if (stages.empty()) throw make_error("StagedTrainingSet: no stages");
  for (std::size_t j = 0; j < stages.size(); ++j) {
    const Stage& stage = stages[j];
    if (stage.samples.rows == 0) throw make_error("StagedTrainingSet: stage ", j, " is empty");
    if (stage.samples.cols != potential.dim()) {
      throw make_error("StagedTrainingSet: stage ", j, " has dimension ", stage.samples.cols,
                       ", potential expects ", potential.dim());
    }
    if (static_cast<std::int64_t>(stage.log_density.size()) != stage.samples.rows) {
      throw make_error("StagedTrainingSet: stage ", j, " has ", stage.log_density.size(),
                       " stored densities for ", stage.samples.rows, " samples");
    }
    for (std::int64_t i = 0; i < stage.samples.rows; ++i) {
      if (!std::isfinite(stage.log_density[static_cast<std::size_t>(i)])) {
        throw make_error("StagedTrainingSet: non-finite stored log-density at stage ", j,
                         " row ", i);
      }
      if (potential.in_a_or_b(stage.samples.row(i))) {
        throw make_error("StagedTrainingSet: sample at stage ", j, " row ", i,
                         " lies inside a metastable set");
      }
    }
  }
}

namespace {

Stage truncate_stage(const Stage& stage, std::int64_t rows) {
  Stage out;
  out.samples = Tensor(rows, stage.samples.cols);
  out.log_density.assign(stage.log_density.begin(), stage.log_density.begin() + rows);
  std::copy(stage.samples.data.begin(),
            stage.samples.data.begin() + rows * stage.samples.cols, out.samples.data.begin());
  return out;
}

}  // namespace

Tensor pooled_samples(const StagedTrainingSet& tset) {
  const std::int64_t d = tset.dim();
  Tensor pooled(tset.total(), d);
  std::int64_t row = 0;
  for (const Stage& stage : tset.stages) {
    std::copy(stage.samples.data.begin(), stage.samples.data.end(),
              pooled.data.begin() + row * d);
    row += stage.samples.rows;
  }
  return pooled;
}

std::vector<double> pooled_log_density(const StagedTrainingSet& tset) {
  std::vector<double> pooled;
  pooled.reserve(static_cast<std::size_t>(tset.total()));
  for (const Stage& stage : tset.stages) {
    pooled.insert(pooled.end(), stage.log_density.begin(), stage.log_density.end());
  }
  return pooled;
}

void refine_training_set(StagedTrainingSet& tset, Stage new_stage, RefinePolicy policy,
                         double keep_fraction) {
  if (new_stage.samples.rows == 0) throw make_error("refine_training_set: empty new stage");
  if (static_cast<std::int64_t>(new_stage.log_density.size()) != new_stage.samples.rows) {
    throw make_error("refine_training_set: new stage has ", new_stage.log_density.size(),
                     " stored densities for ", new_stage.samples.rows, " samples");
  }
  if (!tset.stages.empty() && tset.stages.front().samples.cols != new_stage.samples.cols) {
    throw make_error("refine_training_set: dimension mismatch ",
                     tset.stages.front().samples.cols, " vs ", new_stage.samples.cols);
  }
  switch (policy) {
    case RefinePolicy::kReplaceAll:
      tset.stages.clear();
      tset.stages.push_back(std::move(new_stage));
      return;
    case RefinePolicy::kKeepFraction: {
      if (tset.stages.empty()) throw make_error("refine_training_set: no provenance stage");
      if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
        throw make_error("refine_training_set: keep_fraction must be in (0,1], got ",
                         keep_fraction);
      }
      // The provenance stage shrinks exactly once, on the first refinement
      // (recognizable as the only stage present); afterwards the set is
      // {retained provenance, newest draws} and the retained half is stable.
      Stage& provenance = tset.stages.front();
      if (tset.stages.size() == 1) {
        const std::int64_t keep = std::max<std::int64_t>(
            1, static_cast<std::int64_t>(
                   std::ceil(keep_fraction * static_cast<double>(provenance.samples.rows))));
        if (keep < provenance.samples.rows) provenance = truncate_stage(provenance, keep);
      }
      tset.stages.resize(1);
      tset.stages.push_back(std::move(new_stage));
      return;
    }
  }
  throw make_error("refine_training_set: unknown policy");
}

// --- sampling density --------------------------------------------------------------------

std::vector<double> sampling_density_unnorm(const CommittorNet& net, const Potential& potential,
                                            const Bias* bias, const Tensor& x) {
  if (x.cols != potential.dim()) {
    throw make_error("sampling_density_unnorm: dimension mismatch ", x.cols, " vs ",
                     potential.dim());
  }
  const double beta = potential.beta();
  const Box& box = potential.domain();
  std::vector<double> density(static_cast<std::size_t>(x.rows), 0.0);
  const std::int64_t chunk = 2048;
  for (std::int64_t start = 0; start < x.rows; start += chunk) {
    const std::int64_t rows = std::min(chunk, x.rows - start);
    Tensor part(rows, x.cols);
    std::copy(x.data.begin() + start * x.cols, x.data.begin() + (start + rows) * x.cols,
              part.data.begin());
    const Tensor gradsq = net.gradient_squared(part);
    for (std::int64_t i = 0; i < rows; ++i) {
      const auto row = part.row(i);
      // The sampling density lives on the domain minus the metastable sets:
      // training points are drawn conditionally outside A and B, so the
      // density model should place no mass there, and anything outside the
      // domain box (possible for decoded latent points) has zero mass too.
      if (!box.contains(row)) continue;
      if (potential.in_a_or_b(row)) continue;
      double v = potential.energy(row);
      if (bias != nullptr) v += bias->energy(row);
      density[static_cast<std::size_t>(start + i)] = gradsq.at(i, 0) * std::exp(-beta * v);
    }
  }
  return density;
}

// --- variational loss ---------------------------------------------------------------------

namespace {

struct PooledIndex {
  std::int64_t stage;
  std::int64_t row;
};

PooledIndex locate(const StagedTrainingSet& tset, std::int64_t pooled) {
  std::int64_t offset = 0;
  for (std::size_t j = 0; j < tset.stages.size(); ++j) {
    const std::int64_t n = tset.stages[j].samples.rows;
    if (pooled < offset + n) return {static_cast<std::int64_t>(j), pooled - offset};
    offset += n;
  }
  throw make_error("variational_loss: pooled index ", pooled, " out of range ", offset);
}

struct InteriorGather {
  Tensor x;           // (used, d)
  Tensor weight;      // (used, 1): c_i * exp(-beta V_i - log p_i)
  std::int64_t skipped = 0;
  std::int64_t used = 0;
};

InteriorGather gather_interior(const StagedTrainingSet& tset, const Potential& potential,
                               std::span<const std::int64_t> interior, MixtureMode mode,
                               double max_skip_fraction) {
  const std::int64_t n_total = tset.total();
  const std::vector<double> alpha = tset.alphas();
  const double beta = potential.beta();
  const std::int64_t m = static_cast<std::int64_t>(interior.size());
  const double batch_scale = static_cast<double>(n_total) / static_cast<double>(m);

  std::vector<double> xs;
  std::vector<double> ws;
  const std::int64_t d = tset.dim();
  xs.reserve(static_cast<std::size_t>(m * d));
  ws.reserve(static_cast<std::size_t>(m));
  std::int64_t skipped = 0;
  for (const std::int64_t pooled : interior) {
    const PooledIndex loc = locate(tset, pooled);
    const Stage& stage = tset.stages[static_cast<std::size_t>(loc.stage)];
    const auto row = stage.samples.row(loc.row);
    const double coeff =
        mode == MixtureMode::kPerStage
            ? alpha[static_cast<std::size_t>(loc.stage)] / static_cast<double>(stage.samples.rows)
            : 1.0 / static_cast<double>(n_total);
    const double v = potential.energy(row);
    const double ratio =
        std::exp(-beta * v - stage.log_density[static_cast<std::size_t>(loc.row)]);
    const double w = coeff * batch_scale * ratio;
    if (!std::isfinite(w)) {
      ++skipped;
      continue;
    }
    xs.insert(xs.end(), row.begin(), row.end());
    ws.push_back(w);
  }
  if (static_cast<double>(skipped) > max_skip_fraction * static_cast<double>(m)) {
    throw make_error("variational_loss: ", skipped, " of ", m,
                     " importance ratios non-finite (limit ",
                     max_skip_fraction, "); stored densities or energies are inconsistent");
  }
  InteriorGather g;
  g.skipped = skipped;
  g.used = static_cast<std::int64_t>(ws.size());
  if (g.used == 0) throw make_error("variational_loss: every interior sample was skipped");
  g.x = Tensor(g.used, d);
  std::copy(xs.begin(), xs.end(), g.x.data.begin());
  g.weight = Tensor(g.used, 1);
  std::copy(ws.begin(), ws.end(), g.weight.data.begin());
  return g;
}

std::vector<std::int64_t> all_indices(std::int64_t n) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

// Weighted interior term on the tape: sum_i w_i |grad q(x_i)|^2.
ad::Value interior_term(ad::Tape& tape, const CommittorNet& net, const Tensor& x,
                        const Tensor& weight) {
  const CommittorNet::Bound q = net.bind(tape);
  const ad::Value xv = ad::constant(tape, x);
  const ad::Value qv = q(xv);
  const ad::Value g = ad::input_gradient(ad::sum_all(qv), xv);
  const ad::Value gradsq = ad::sum_cols(ad::square(g));
  return ad::sum_all(ad::mul(ad::constant(tape, weight), gradsq));
}

// Boundary penalty (unscaled): mean_A q^2 + mean_B (1 - q)^2.
ad::Value penalty_term(ad::Tape& tape, const CommittorNet& net, const Tensor& a_rows,
                       const Tensor& b_rows) {
  const CommittorNet::Bound q = net.bind(tape);
  const ad::Value qa = q(ad::constant(tape, a_rows));
  const ad::Value qb = q(ad::constant(tape, b_rows));
  const ad::Value pa = ad::mean_all(ad::square(qa));
  const ad::Value pb = ad::mean_all(ad::square(ad::shift(ad::neg(qb), 1.0)));
  return ad::add(pa, pb);
}

Tensor gather_rows(const Tensor& src, std::span<const std::int64_t> idx) {
  return idx.empty() ? src : take_rows(src, idx);
}

}  // namespace

ad::Value variational_loss(ad::Tape& tape, const CommittorNet& net,
                           const StagedTrainingSet& tset, const Potential& potential,
                           const Tensor& boundary_a, const Tensor& boundary_b, double lambda,
                           const LossBatch& batch, MixtureMode mode, double max_skip_fraction,
                           LossStats* stats) {
  if (!(lambda > 0.0)) throw make_error("variational_loss: lambda must be positive");
  if (boundary_a.rows == 0 || boundary_b.rows == 0) {
    throw make_error("variational_loss: boundary sets must be nonempty");
  }
  std::vector<std::int64_t> full;
  std::span<const std::int64_t> interior(batch.interior);
  if (interior.empty()) {
    full = all_indices(tset.total());
    interior = full;
  }
  const InteriorGather g =
      gather_interior(tset, potential, interior, mode, max_skip_fraction);
  const Tensor a_rows = gather_rows(boundary_a, batch.boundary_a);
  const Tensor b_rows = gather_rows(boundary_b, batch.boundary_b);

  const ad::Value interior_v = interior_term(tape, net, g.x, g.weight);
  const ad::Value penalty_v = penalty_term(tape, net, a_rows, b_rows);
  const ad::Value loss = ad::add(interior_v, ad::scale(penalty_v, lambda));
  if (stats != nullptr) {
    stats->skipped = g.skipped;
    stats->interior_used = g.used;
    stats->interior_value = interior_v.value().item();
    stats->penalty_value = penalty_v.value().item();
  }
  return loss;
}

// --- committor training ---------------------------------------------------------------------

double schedule_lr(const LrSchedule& schedule, std::int64_t epoch) {
  if (schedule.every <= 0 || schedule.decay == 1.0) return schedule.base;
  const std::int64_t drops = epoch / schedule.every;
  return schedule.base * std::pow(schedule.decay, static_cast<double>(drops));
}

namespace {

// One optimizer step from the summed gradients of independently built tape
// chunks.  Chunking bounds peak graph memory; the interior estimator's
// weights already carry the batch scale, so the chunk losses and gradients
// add exactly.
double committor_step(CommittorNet& net, const StagedTrainingSet& tset,
                      const Potential& potential, const Tensor& boundary_a,
                      const Tensor& boundary_b, const QTrainConfig& config,
                      std::span<const std::int64_t> interior, AdamOptimizer& optimizer,
                      std::int64_t* skipped_out) {
  std::vector<Parameter>& params = net.params();
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (const Parameter& p : params) grads.push_back(Tensor::zeros(p.value.rows, p.value.cols));
  double loss_value = 0.0;

  const std::int64_t m = static_cast<std::int64_t>(interior.size());
  const std::int64_t chunk = config.chunk > 0 ? config.chunk : m;
  // Gather once so skip accounting sees the whole batch.
  const InteriorGather g =
      gather_interior(tset, potential, interior, config.mode, config.max_skip_fraction);
  if (skipped_out != nullptr) *skipped_out += g.skipped;
  (void)m;

  for (std::int64_t start = 0; start < g.used; start += chunk) {
    const std::int64_t rows = std::min(chunk, g.used - start);
    Tensor xs(rows, g.x.cols);
    Tensor ws(rows, 1);
    std::copy(g.x.data.begin() + start * g.x.cols, g.x.data.begin() + (start + rows) * g.x.cols,
              xs.data.begin());
    std::copy(g.weight.data.begin() + start, g.weight.data.begin() + start + rows,
              ws.data.begin());
    ad::Tape tape;
    const CommittorNet::Bound q = net.bind(tape);
    const ad::Value xv = ad::constant(tape, xs);
    const ad::Value qv = q(xv);
    const ad::Value grad_x = ad::input_gradient(ad::sum_all(qv), xv);
    const ad::Value term = ad::sum_all(ad::mul(ad::constant(tape, ws),
                                               ad::sum_cols(ad::square(grad_x))));
    loss_value += term.value().item();
    const std::vector<ad::Value> leaf_grads = ad::grad(term, q.mlp.leaves);
    for (std::size_t p = 0; p < params.size(); ++p) {
      axpy(1.0, leaf_grads[p].value(), grads[p]);
    }
  }

  {
    ad::Tape tape;
    const CommittorNet::Bound q = net.bind(tape);
    const ad::Value qa = q(ad::constant(tape, boundary_a));
    const ad::Value qb = q(ad::constant(tape, boundary_b));
    const ad::Value penalty = ad::add(ad::mean_all(ad::square(qa)),
                                      ad::mean_all(ad::square(ad::shift(ad::neg(qb), 1.0))));
    const ad::Value scaled = ad::scale(penalty, config.lambda);
    loss_value += scaled.value().item();
    const std::vector<ad::Value> leaf_grads = ad::grad(scaled, q.mlp.leaves);
    for (std::size_t p = 0; p < params.size(); ++p) {
      axpy(1.0, leaf_grads[p].value(), grads[p]);
    }
  }

  if (!std::isfinite(loss_value)) {
    throw make_error("train_committor: non-finite loss ", loss_value);
  }
  optimizer.step(params, grads);
  return loss_value;
}

}  // namespace

QTrainTrace train_committor(CommittorNet& net, const StagedTrainingSet& tset,
                            const Potential& potential, const Tensor& boundary_a,
                            const Tensor& boundary_b, const QTrainConfig& config,
                            AdamOptimizer& optimizer, std::int64_t epoch_offset, Rng& rng) {
  if (config.epochs <= 0) throw make_error("train_committor: epochs must be positive");
  if (config.batch <= 0) throw make_error("train_committor: batch must be positive");
  tset.validate(potential);
  const std::int64_t n = tset.total();
  const std::int64_t m = std::min(config.batch, n);
  const std::int64_t steps = std::max<std::int64_t>(1, n / m);
  const std::int64_t mb =
      std::min(config.boundary_batch > 0 ? config.boundary_batch : config.batch,
               std::min(boundary_a.rows, boundary_b.rows));

  QTrainTrace trace;
  std::vector<std::int64_t> order = all_indices(n);
  for (std::int64_t e = 0; e < config.epochs; ++e) {
    optimizer.set_learning_rate(schedule_lr(config.lr, epoch_offset + e));
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::int64_t s = 0; s < steps; ++s) {
      std::span<const std::int64_t> interior(order.data() + s * m, static_cast<std::size_t>(m));
      std::vector<std::int64_t> ia(static_cast<std::size_t>(mb));
      std::vector<std::int64_t> ib(static_cast<std::size_t>(mb));
      for (std::int64_t i = 0; i < mb; ++i) {
        ia[static_cast<std::size_t>(i)] =
            static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(boundary_a.rows)));
        ib[static_cast<std::size_t>(i)] =
            static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(boundary_b.rows)));
      }
      const Tensor a_rows = take_rows(boundary_a, ia);
      const Tensor b_rows = take_rows(boundary_b, ib);
      epoch_loss += committor_step(net, tset, potential, a_rows, b_rows, config, interior,
                                   optimizer, &trace.skipped);
    }
    trace.loss_per_epoch.push_back(epoch_loss / static_cast<double>(steps));
  }
  return trace;
}

// --- staged adaptive loop ---------------------------------------------------------------------

DastrResult dastr_run(const DastrConfig& config, const Potential& potential, CommittorNet& net,
                      FlowModel* flow, DastrState& state, const Tensor& boundary_a,
                      const Tensor& boundary_b, const StageCallback& callback) {
  if (config.n_adaptive <= 0) throw make_error("dastr_run: n_adaptive must be positive");
  if (state.next_stage < 0 || state.next_stage > config.n_adaptive) {
    throw make_error("dastr_run: resume stage ", state.next_stage, " outside [0, ",
                     config.n_adaptive, "]");
  }
  state.tset.validate(potential);
  const std::int64_t n_new =
      config.n_new_per_stage > 0 ? config.n_new_per_stage : state.tset.total();

  DastrResult result;
  for (std::int64_t k = state.next_stage; k < config.n_adaptive; ++k) {
    StageRecord record;
    record.stage = k;
    record.flow_ce = std::numeric_limits<double>::quiet_NaN();
    record.acceptance = std::numeric_limits<double>::quiet_NaN();
    record.error = std::numeric_limits<double>::quiet_NaN();

    {
      QTrainConfig qcfg = config.q;
      qcfg.epochs = config.n_e;
      Rng rng_q = Rng::substream(config.seed, {0x7131u, static_cast<std::uint64_t>(k)});
      const QTrainTrace trace =
          train_committor(net, state.tset, potential, boundary_a, boundary_b, qcfg,
                          state.q_opt, state.epoch_counter, rng_q);
      state.epoch_counter += config.n_e;
      record.q_loss = trace.loss_per_epoch.back();
      record.skipped = trace.skipped;
    }

    const bool adapt = flow != nullptr && k + 1 < config.n_adaptive;
    if (adapt) {
      CeTrainConfig ce = config.flow_ce;
      ce.epochs = config.n_e_flow;
      Rng rng_f = Rng::substream(config.seed, {0x666Cu, static_cast<std::uint64_t>(k)});
      const TargetDensity target = [&](const Tensor& xs) {
        return sampling_density_unnorm(net, potential, config.sampling_bias, xs);
      };
      // CE proposal = the current training set with its stored log-densities.
      // Unlike drawing from the flow itself, this keeps working when the flow
      // has not yet discovered the transition region: the training points sit
      // exactly where mass is wanted, so their weights pull density there.
      const CeTrainTrace ce_trace =
          train_flow_ce(*flow, pooled_samples(state.tset), pooled_log_density(state.tset),
                        target, ce, state.flow_opt, rng_f);
      record.flow_ce = ce_trace.ce_per_epoch.back();

      Rng rng_s = Rng::substream(config.seed, {0x7361u, static_cast<std::uint64_t>(k)});
      std::int64_t draws = 0;
      Stage fresh;
      fresh.samples =
          flow->sample_outside_ab(n_new, potential, rng_s, config.sample_max_passes, &draws);
      fresh.log_density = flow->log_density(fresh.samples);
      record.acceptance = static_cast<double>(n_new) / static_cast<double>(draws);
      refine_training_set(state.tset, std::move(fresh), config.policy, config.keep_fraction);
      state.tset.validate(potential);
    }

    record.tset_size = state.tset.total();
    state.next_stage = k + 1;
    if (callback) callback(state, net, record);
    result.stages.push_back(record);
    if (k == config.stop_after_stage) break;
  }
  return result;
}

}  // namespace dastr

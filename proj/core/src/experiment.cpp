#include "dastr/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dastr/adaptive.hpp"
#include "dastr/checkpoint.hpp"
#include "dastr/common.hpp"
#include "dastr/config.hpp"
#include "dastr/flow.hpp"
#include "dastr/latent.hpp"
#include "dastr/metrics.hpp"
#include "dastr/nets.hpp"
#include "dastr/potentials.hpp"
#include "dastr/rng.hpp"
#include "dastr/sde.hpp"
#include "dastr/tensor.hpp"

namespace dastr {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Substream tags for runner-owned randomness.  The staged loop derives its
// own per-stage streams internally; these must stay disjoint from those tags.
constexpr std::uint64_t kTagNetInit = 0x6e65;
constexpr std::uint64_t kTagFlowInit = 0xf10e;
constexpr std::uint64_t kTagAeInit = 0xae00;
constexpr std::uint64_t kTagBoundaryA = 0xb0a0;
constexpr std::uint64_t kTagBoundaryB = 0xb0b0;
constexpr std::uint64_t kTagInitial = 0x5e00;
constexpr std::uint64_t kTagIsosurface = 0x1500;
constexpr std::uint64_t kTagSelftest = 0x5e1f;

double elapsed_seconds(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

// --- file helpers ---------------------------------------------------------------------

void atomic_write_text(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw make_error("cannot open '", tmp.string(), "' for writing");
    out << text;
    out.flush();
    if (!out) throw make_error("write to '", tmp.string(), "' failed");
  }
  fs::rename(tmp, path);
}

nlohmann::json histogram_to_json(const HistogramData& hist) {
  nlohmann::json j;
  j["edges"] = hist.edges;
  j["counts"] = hist.counts;
  return j;
}

// --- per-stage rows ----------------------------------------------------------------------

// One metrics row: the loop's record plus runner-computed columns.
struct RunRow {
  StageRecord rec;
  double band = kNan;  // training-sample norm fraction in [band_lo, band_hi]
};

std::string metrics_csv_text(const std::vector<RunRow>& rows) {
  std::string text = "stage,q_loss,flow_ce,error,acceptance,tset_size,skipped,band\n";
  for (const RunRow& row : rows) {
    text += std::to_string(row.rec.stage);
    text += ',';
    text += format_double(row.rec.q_loss);
    text += ',';
    text += format_double(row.rec.flow_ce);
    text += ',';
    text += format_double(row.rec.error);
    text += ',';
    text += format_double(row.rec.acceptance);
    text += ',';
    text += std::to_string(row.rec.tset_size);
    text += ',';
    text += std::to_string(row.rec.skipped);
    text += ',';
    text += format_double(row.band);
    text += '\n';
  }
  return text;
}

std::string timings_csv_text(const std::vector<double>& stage_seconds) {
  std::string text = "stage,seconds\n";
  for (std::size_t k = 0; k < stage_seconds.size(); ++k) {
    text += std::to_string(k);
    text += ',';
    text += format_double(stage_seconds[k]);
    text += '\n';
  }
  return text;
}

nlohmann::json row_to_json(const RunRow& row) {
  nlohmann::json j;
  j["stage"] = row.rec.stage;
  j["q_loss"] = json_number(row.rec.q_loss);
  j["flow_ce"] = json_number(row.rec.flow_ce);
  j["error"] = json_number(row.rec.error);
  j["acceptance"] = json_number(row.rec.acceptance);
  j["tset_size"] = row.rec.tset_size;
  j["skipped"] = row.rec.skipped;
  j["band"] = json_number(row.band);
  return j;
}

RunRow row_from_json(const nlohmann::json& j) {
  RunRow row;
  row.rec.stage = j.at("stage").get<std::int64_t>();
  row.rec.q_loss = number_from_json(j.at("q_loss"));
  row.rec.flow_ce = number_from_json(j.at("flow_ce"));
  row.rec.error = number_from_json(j.at("error"));
  row.rec.acceptance = number_from_json(j.at("acceptance"));
  row.rec.tset_size = j.at("tset_size").get<std::int64_t>();
  row.rec.skipped = j.at("skipped").get<std::int64_t>();
  row.band = number_from_json(j.at("band"));
  return row;
}

// --- checkpoint plumbing -----------------------------------------------------------------

void append_params(std::vector<Parameter>& out, std::vector<Parameter> params) {
  for (Parameter& p : params) out.push_back(std::move(p));
}

void append_tset_tensors(std::vector<Parameter>& out, const StagedTrainingSet& tset) {
  for (std::size_t j = 0; j < tset.stages.size(); ++j) {
    const Stage& stage = tset.stages[j];
    const std::string base = "tset." + std::to_string(j) + ".";
    out.push_back({base + "samples", stage.samples});
    Tensor logp(stage.samples.rows, 1);
    std::copy(stage.log_density.begin(), stage.log_density.end(), logp.data.begin());
    out.push_back({base + "logp", std::move(logp)});
  }
}

StagedTrainingSet tset_from_checkpoint(const Checkpoint& cp) {
  StagedTrainingSet tset;
  for (std::int64_t j = 0;; ++j) {
    const std::string base = "tset." + std::to_string(j) + ".";
    if (!checkpoint_has_tensor(cp, base + "samples")) break;
    Stage stage;
    stage.samples = checkpoint_tensor(cp, base + "samples");
    const Tensor& logp = checkpoint_tensor(cp, base + "logp");
    if (logp.rows != stage.samples.rows || logp.cols != 1) {
      throw make_error("checkpoint: '", base, "logp' shape (", logp.rows, ",", logp.cols,
                       ") does not match ", stage.samples.rows, " samples");
    }
    stage.log_density.assign(logp.data.begin(), logp.data.end());
    tset.stages.push_back(std::move(stage));
  }
  if (tset.stages.empty()) throw make_error("checkpoint: no training-set stages found");
  return tset;
}

// Replaces each parameter's tensor with the checkpointed one of the same name.
void fill_params_from_checkpoint(std::vector<Parameter>& params, const Checkpoint& cp) {
  for (Parameter& p : params) {
    const Tensor& stored = checkpoint_tensor(cp, p.name);
    if (!stored.same_shape(p.value)) {
      throw make_error("checkpoint: tensor '", p.name, "' has shape (", stored.rows, ",",
                       stored.cols, "), expected (", p.value.rows, ",", p.value.cols, ")");
    }
    p.value = stored;
  }
}

void load_adam_from_checkpoint(AdamOptimizer& opt, const std::vector<Parameter>& params,
                               const Checkpoint& cp, std::int64_t step_count) {
  if (step_count == 0) return;
  std::vector<Parameter> state;
  state.reserve(params.size() * 2);
  for (const Parameter& p : params) {
    state.push_back({"adam.m." + p.name, checkpoint_tensor(cp, "adam.m." + p.name)});
    state.push_back({"adam.v." + p.name, checkpoint_tensor(cp, "adam.v." + p.name)});
  }
  opt.load_state(params, state, step_count);
}

std::optional<fs::path> latest_stage_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir)) return std::nullopt;
  std::optional<fs::path> best;
  std::int64_t best_stage = -1;
  for (const fs::directory_entry& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("stage_", 0) != 0 || entry.path().extension() != ".json") continue;
    const std::string digits = name.substr(6, name.size() - 6 - 5);
    if (digits.empty() ||
        digits.find_first_not_of("0123456789") != std::string::npos) {
      continue;
    }
    const std::int64_t stage = std::stoll(digits);
    if (stage > best_stage) {
      best_stage = stage;
      best = entry.path();
    }
  }
  return best;
}

// --- initial training stage ----------------------------------------------------------------

struct InitialStage {
  Stage stage;
  // Terminal metadynamics bias when the provenance run used one; kept alive
  // for optional reuse inside the adaptive sampling density.
  std::shared_ptr<MetadynamicsBias> bias;
};

Stage sde_initial_stage(const Potential& potential, const InitialSection& init, std::int64_t n,
                        Rng& rng) {
  const std::int64_t d = potential.dim();
  const double beta_eff = init.beta > 0.0 ? init.beta : potential.beta();
  std::vector<double> x(d, 0.0);
  potential.sample_uniform_outside_ab(rng, x);

  SdeConfig sde;
  sde.dt = init.dt;
  sde.beta = beta_eff;
  if (init.burn_in > 0) {
    sde.stride = init.burn_in;
    Trajectory burn = simulate(potential, nullptr, x, init.burn_in, sde, rng);
    std::copy(burn.points.row(0).begin(), burn.points.row(0).end(), x.begin());
  }

  Stage stage;
  stage.samples = Tensor(n, d);
  stage.log_density.reserve(static_cast<std::size_t>(n));
  sde.stride = init.stride;

  const auto* rm = dynamic_cast<const RuggedMueller*>(&potential);
  const double log_z = rm != nullptr ? rm->log_gibbs_normalizer(beta_eff) : 0.0;

  std::int64_t collected = 0;
  std::int64_t strides = 0;
  const std::int64_t max_strides = 200 * n;
  while (collected < n) {
    if (++strides > max_strides) {
      throw make_error("initial sde stage: only ", collected, " of ", n,
                       " samples collected after ", max_strides,
                       " strides; A u B absorbs too much of the trajectory");
    }
    Trajectory leg = simulate(potential, nullptr, x, init.stride, sde, rng);
    std::copy(leg.points.row(0).begin(), leg.points.row(0).end(), x.begin());
    if (potential.in_a_or_b(x)) continue;
    std::copy(x.begin(), x.end(), stage.samples.row(collected).begin());
    // Equilibrium Gibbs density at the collection temperature.  Flat
    // potentials reduce to the uniform-outside-AB density exactly; the
    // rugged landscape uses the quadrature normalizer over the full domain
    // (the tiny A u B mass is not subtracted).
    if (rm != nullptr) {
      stage.log_density.push_back(-beta_eff * leg.energy[0] - log_z);
    } else {
      stage.log_density.push_back(potential.log_uniform_outside_ab_density());
    }
    ++collected;
  }
  return stage;
}

InitialStage metadynamics_initial_stage(const Potential& potential, const InitialSection& init,
                                        Rng& rng) {
  const auto* rm = dynamic_cast<const RuggedMueller*>(&potential);
  if (rm == nullptr) {
    throw make_error(
        "initial.kind 'metadynamics' needs the rugged-mueller potential (the deposit "
        "coordinates are the (x1, x2) plane)");
  }
  const std::int64_t d = potential.dim();
  const double beta_eff = init.beta > 0.0 ? init.beta : potential.beta();

  MetadynamicsConfig mc;
  mc.height = init.height;
  mc.width = init.width;
  mc.deposit_interval = init.deposit_interval;
  mc.deposits = init.deposits;
  mc.sample_stride = init.sample_stride;
  mc.sde.dt = init.dt;
  mc.sde.beta = beta_eff;

  // Start at the bottom of basin A, extended by zeros.
  std::vector<double> x0(d, 0.0);
  x0[0] = rm->params().center_a[0];
  x0[1] = rm->params().center_a[1];

  MetadynamicsRun run = metadynamics_run(*rm, coordinate_cvs({0, 1}, d), mc, x0, rng);
  if (run.samples.rows < 100) {
    throw make_error("initial metadynamics stage: only ", run.samples.rows,
                     " samples collected outside A u B; lower initial.sample_stride or raise "
                     "initial.deposits");
  }

  InitialStage out;
  out.bias = std::make_shared<MetadynamicsBias>(std::move(run.bias));

  // Stored density: the biased Gibbs measure under the terminal bias,
  // normalized by quadrature.  The run's early samples saw fewer deposits, so
  // this is the standard quasi-stationary approximation for metadynamics
  // output.
  const MetadynamicsBias& bias = *out.bias;
  std::function<double(double, double)> bias2d = [&bias](double x1, double x2) {
    const std::array<double, 2> s{x1, x2};
    return bias.energy_cv(s);
  };
  const double log_z = rm->log_gibbs_normalizer(beta_eff, &bias2d);

  out.stage.samples = std::move(run.samples);
  const std::int64_t n = out.stage.samples.rows;
  out.stage.log_density.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto row = out.stage.samples.row(i);
    const double v = rm->energy(row);
    const double vg = bias.energy(row);
    out.stage.log_density.push_back(-beta_eff * (v + vg) - log_z);
  }
  return out;
}

InitialStage build_initial_stage(const ExperimentConfig& config, const Potential& potential,
                                 Rng& rng) {
  const InitialSection& init = config.initial;
  const std::int64_t n = config.dastr.n_interior;
  InitialStage out;
  if (init.kind == "uniform") {
    out.stage.samples = sample_uniform_outside_ab(potential, n, rng);
    out.stage.log_density.assign(static_cast<std::size_t>(n),
                                 potential.log_uniform_outside_ab_density());
    return out;
  }
  if (init.kind == "sde") {
    out.stage = sde_initial_stage(potential, init, n, rng);
    return out;
  }
  if (init.kind == "metadynamics") {
    return metadynamics_initial_stage(potential, init, rng);
  }
  throw make_error("unknown initial.kind '", init.kind, "'");
}

// --- config -> loop mapping ---------------------------------------------------------------

DastrConfig map_dastr_config(const ExperimentConfig& config, const Bias* sampling_bias) {
  const DastrSection& d = config.dastr;
  DastrConfig dc;
  dc.n_adaptive = d.n_adaptive;
  dc.n_e = d.n_e;
  dc.n_e_flow = d.n_e_flow;
  dc.q.epochs = d.n_e;
  dc.q.batch = d.batch_q;
  dc.q.boundary_batch = d.boundary_batch;
  dc.q.chunk = d.chunk_q;
  dc.q.lambda = d.lambda;
  dc.q.mode = d.mixture_mode == "pooled" ? MixtureMode::kPooled : MixtureMode::kPerStage;
  dc.q.max_skip_fraction = d.max_skip_fraction;
  dc.q.lr.base = d.learning_rate_q;
  dc.q.lr.decay = d.lr_decay;
  dc.q.lr.every = d.lr_decay_every;
  dc.flow_lr = d.learning_rate_flow;
  dc.flow_ce.epochs = d.n_e_flow;
  dc.flow_ce.steps_per_epoch = 1;
  dc.flow_ce.batch = d.batch_flow;
  dc.flow_ce.chunk = d.chunk_flow;
  dc.n_new_per_stage = d.n_new_per_stage;
  dc.policy =
      d.policy == "keep-fraction" ? RefinePolicy::kKeepFraction : RefinePolicy::kReplaceAll;
  dc.keep_fraction = d.keep_fraction;
  dc.sample_max_passes = d.sample_max_passes;
  dc.sampling_bias = sampling_bias;
  dc.seed = config.seed;
  dc.stop_after_stage = config.output.stop_after_stage;
  return dc;
}

// --- the flow selftest ---------------------------------------------------------------------

RunSummary run_flow_selftest(const ExperimentConfig& config, const fs::path& out_dir,
                             Clock::time_point t0) {
  std::unique_ptr<Potential> potential = make_potential(config.potential);
  if (potential->dim() != 2) {
    throw make_error("flow-selftest needs a 2-D potential, got dim ", potential->dim());
  }
  const Box& box = potential->domain();

  // Fixed bimodal target, deliberately asymmetric so the fit is nontrivial.
  const double sigma = 0.35;
  const auto target_scaled = [&](double scale) {
    return TargetDensity([sigma, scale](const Tensor& x) {
      std::vector<double> out(static_cast<std::size_t>(x.rows), 0.0);
      for (std::int64_t i = 0; i < x.rows; ++i) {
        const double x1 = x.at(i, 0);
        const double x2 = x.at(i, 1);
        const double da = (x1 - 0.8) * (x1 - 0.8) + (x2 - 0.8) * (x2 - 0.8);
        const double db = (x1 + 0.8) * (x1 + 0.8) + (x2 + 0.8) * (x2 + 0.8);
        out[static_cast<std::size_t>(i)] =
            scale * (0.6 * std::exp(-da / (2.0 * sigma * sigma)) +
                     0.4 * std::exp(-db / (2.0 * sigma * sigma)));
      }
      return out;
    });
  };

  FlowConfig shape;
  shape.dim = 2;
  shape.blocks = config.flow.blocks;
  shape.layers_per_block = config.flow.layers_per_block;
  shape.hidden = config.flow.hidden;
  shape.s_max = config.flow.s_max;
  shape.box = box;

  CeTrainConfig ce;
  ce.epochs = 40;
  ce.steps_per_epoch = 1;
  ce.batch = 2000;
  ce.chunk = 512;

  const auto train_once = [&](double scale) {
    Rng init_rng = Rng::substream(config.seed, {kTagSelftest, 1});
    Rng train_rng = Rng::substream(config.seed, {kTagSelftest, 2});
    FlowModel flow(shape, init_rng);
    AdamOptimizer opt(1e-3);
    CeTrainTrace trace = train_flow_ce(flow, target_scaled(scale), ce, opt, train_rng);
    return std::make_pair(std::move(flow), std::move(trace));
  };

  auto [flow, trace] = train_once(1.0);

  // Invertibility on the trained model.
  Rng sample_rng = Rng::substream(config.seed, {kTagSelftest, 3});
  Tensor draws = flow.sample(500, sample_rng);
  Tensor z(draws.rows, draws.cols);
  Tensor log_det(draws.rows, 1);
  flow.forward(draws, &z, &log_det);
  Tensor back = flow.inverse(z);
  double invert_error = 0.0;
  for (std::size_t i = 0; i < draws.data.size(); ++i) {
    invert_error = std::max(invert_error, std::abs(draws.data[i] - back.data[i]));
  }

  // Monte Carlo check that the learned density integrates to one.
  Rng mc_rng = Rng::substream(config.seed, {kTagSelftest, 4});
  const std::int64_t n_mc = 20000;
  Tensor grid(n_mc, 2);
  for (std::int64_t i = 0; i < n_mc; ++i) {
    for (std::int64_t jcol = 0; jcol < 2; ++jcol) {
      grid.at(i, jcol) = mc_rng.uniform(box.lo[static_cast<std::size_t>(jcol)],
                                        box.hi[static_cast<std::size_t>(jcol)]);
    }
  }
  const std::vector<double> log_p = flow.log_density(grid);
  double mean_p = 0.0;
  for (double lp : log_p) mean_p += std::exp(lp);
  mean_p /= static_cast<double>(n_mc);
  const double norm_estimate = mean_p * std::exp(box.log_volume());

  // Scaling the unnormalized target by a power of two must leave training
  // bit-identical.
  auto [flow_scaled, trace_scaled] = train_once(1024.0);
  const bool scale_invariant =
      parameter_hash(flow.all_params()) == parameter_hash(flow_scaled.all_params());

  const bool ce_improved = trace.ce_per_epoch.back() < trace.ce_per_epoch.front();
  const bool pass = ce_improved && invert_error < 1e-8 &&
                    std::abs(norm_estimate - 1.0) < 0.05 && scale_invariant;

  std::string csv = "epoch,ce\n";
  for (std::size_t e = 0; e < trace.ce_per_epoch.size(); ++e) {
    csv += std::to_string(e);
    csv += ',';
    csv += format_double(trace.ce_per_epoch[e]);
    csv += '\n';
  }
  atomic_write_text(out_dir / "metrics.csv", csv);

  RunSummary summary;
  summary.experiment = config.experiment;
  summary.out_dir = out_dir;
  summary.selftest_norm_estimate = norm_estimate;
  summary.selftest_invert_error = invert_error;
  summary.selftest_scale_invariant = scale_invariant;
  summary.selftest_pass = pass;
  summary.wall_seconds = elapsed_seconds(t0);

  nlohmann::json manifest;
  manifest["config"] = experiment_config_to_json(config);
  nlohmann::json s;
  s["experiment"] = config.experiment;
  s["ce_first"] = json_number(trace.ce_per_epoch.front());
  s["ce_last"] = json_number(trace.ce_per_epoch.back());
  s["invert_error"] = json_number(invert_error);
  s["norm_estimate"] = json_number(norm_estimate);
  s["scale_invariant"] = scale_invariant;
  s["pass"] = pass;
  s["wall_seconds"] = json_number(summary.wall_seconds);
  manifest["summary"] = s;
  atomic_write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return summary;
}

}  // namespace

// --- public API -------------------------------------------------------------------------

std::unique_ptr<Potential> make_potential(const PotentialConfig& pc) {
  if (pc.id == "brownian-annulus") {
    const double beta = pc.beta > 0.0 ? pc.beta : 0.5;
    return std::make_unique<BrownianAnnulus>(pc.dim, pc.inner_radius, pc.outer_radius, beta);
  }
  if (pc.id == "rugged-mueller") {
    RuggedMuellerParams params;
    params.gamma = pc.gamma;
    params.k = pc.k;
    params.sigma = pc.sigma;
    params.dim = pc.dim;
    params.set_radius = pc.set_radius;
    if (pc.beta > 0.0) params.beta = pc.beta;
    return std::make_unique<RuggedMueller>(params);
  }
  if (pc.id == "brownian-interval") {
    if (pc.dim != 1) throw make_error("brownian-interval is one-dimensional, got dim ", pc.dim);
    return std::make_unique<BrownianInterval>(pc.beta > 0.0 ? pc.beta : 2.0);
  }
  throw make_error("unknown potential id '", pc.id, "'");
}

RunSummary run_experiment(const ExperimentConfig& config, const fs::path& out_dir, bool resume) {
  const Clock::time_point t0 = Clock::now();
  fs::create_directories(out_dir);
  if (config.experiment == "flow-selftest") return run_flow_selftest(config, out_dir, t0);
  const fs::path ckpt_dir = out_dir / "checkpoints";
  const fs::path hist_dir = out_dir / "histograms";
  fs::create_directories(ckpt_dir);
  fs::create_directories(hist_dir);

  std::unique_ptr<Potential> potential = make_potential(config.potential);
  const std::int64_t dim = potential->dim();

  // Deterministic ingredients, rebuilt identically on resume.
  Rng rng_ba = Rng::substream(config.seed, {kTagBoundaryA});
  Rng rng_bb = Rng::substream(config.seed, {kTagBoundaryB});
  const Tensor boundary_a =
      sample_boundary(*potential, MetastableSet::kA, config.dastr.n_boundary_a, rng_ba);
  const Tensor boundary_b =
      sample_boundary(*potential, MetastableSet::kB, config.dastr.n_boundary_b, rng_bb);

  Rng rng_init = Rng::substream(config.seed, {kTagInitial});
  InitialStage initial = build_initial_stage(config, *potential, rng_init);

  Rng rng_net = Rng::substream(config.seed, {kTagNetInit});
  std::vector<std::int64_t> hidden = config.net.hidden_widths;
  CommittorNet net(dim, hidden, activation_from_string(config.net.activation), rng_net);

  const bool adaptive = config.dastr.strategy == "dastr";
  const bool latent = config.latent.enabled;
  const Bias* sampling_bias =
      config.initial.bias_in_sampling ? static_cast<const Bias*>(initial.bias.get()) : nullptr;
  if (config.initial.bias_in_sampling && initial.bias == nullptr) {
    throw make_error("initial.bias_in_sampling needs initial.kind 'metadynamics'");
  }

  DastrConfig dc = map_dastr_config(config, sampling_bias);

  StagedTrainingSet tset;
  tset.stages.push_back(initial.stage);
  tset.validate(*potential);
  DastrState state(std::move(tset), dc);

  // Resume bookkeeping, loaded before the heavyweight models are finalized.
  std::optional<Checkpoint> loaded;
  fs::path loaded_path;
  if (resume) {
    const std::optional<fs::path> latest = latest_stage_checkpoint(ckpt_dir);
    if (latest.has_value()) {
      Checkpoint cp = load_checkpoint(*latest);
      if (cp.kind != "stage") {
        throw make_error("checkpoint '", latest->string(), "' has kind '", cp.kind,
                         "', expected 'stage'");
      }
      if (cp.meta.at("experiment").get<std::string>() != config.experiment ||
          cp.meta.at("seed").get<std::uint64_t>() != config.seed) {
        throw make_error("checkpoint '", latest->string(),
                         "' belongs to a different experiment or seed");
      }
      loaded = std::move(cp);
      loaded_path = *latest;
    }
  }

  std::unique_ptr<FlowModel> flow;
  std::unique_ptr<LatentPipeline> pipeline;
  if (adaptive && latent) {
    Rng rng_ae = Rng::substream(config.seed, {kTagAeInit});
    Autoencoder ae(dim, config.latent.ae_hidden_widths, config.latent.d_latent, rng_ae);
    if (loaded.has_value()) {
      std::vector<Parameter> ae_params = ae.all_params();
      fill_params_from_checkpoint(ae_params, *loaded);
      ae.set_all_params(ae_params);
    } else {
      AeTrainConfig ae_cfg;
      ae_cfg.epochs = config.latent.ae_epochs;
      ae_cfg.batch = config.latent.ae_batch;
      ae_cfg.learning_rate = config.latent.ae_learning_rate;
      ae_cfg.seed = config.seed;
      train_autoencoder(ae, initial.stage.samples, ae_cfg);
    }
    // The latent box always comes from the provenance stage's codes, so a
    // resumed run rebuilds the identical flow geometry.
    const Tensor codes = ae.encode(initial.stage.samples);
    FlowConfig shape;
    shape.dim = config.latent.d_latent;
    shape.blocks = config.flow.blocks;
    shape.layers_per_block = config.flow.layers_per_block;
    shape.hidden = config.flow.hidden;
    shape.s_max = config.flow.s_max;
    shape.box = latent_box(codes, config.latent.box_margin);
    Rng rng_flow = Rng::substream(config.seed, {kTagFlowInit});
    FlowModel latent_flow(shape, rng_flow);
    pipeline = std::make_unique<LatentPipeline>(std::move(ae), std::move(latent_flow),
                                                config.latent.energy_threshold);
  } else if (adaptive) {
    FlowConfig shape;
    shape.dim = dim;
    shape.blocks = config.flow.blocks;
    shape.layers_per_block = config.flow.layers_per_block;
    shape.hidden = config.flow.hidden;
    shape.s_max = config.flow.s_max;
    shape.box = potential->domain();
    Rng rng_flow = Rng::substream(config.seed, {kTagFlowInit});
    flow = std::make_unique<FlowModel>(shape, rng_flow);
  }

  std::vector<RunRow> rows;
  std::vector<double> stage_seconds;

  if (loaded.has_value()) {
    const Checkpoint& cp = *loaded;
    state.tset = tset_from_checkpoint(cp);
    state.tset.validate(*potential);
    state.next_stage = cp.meta.at("next_stage").get<std::int64_t>();
    state.epoch_counter = cp.meta.at("epoch_counter").get<std::int64_t>();

    fill_params_from_checkpoint(net.params(), cp);
    const std::int64_t q_step = cp.meta.at("q_step").get<std::int64_t>();
    load_adam_from_checkpoint(state.q_opt, net.params(), cp, q_step);

    const std::int64_t flow_step = cp.meta.at("flow_step").get<std::int64_t>();
    if (flow != nullptr) {
      std::vector<Parameter> fp = flow->all_params();
      fill_params_from_checkpoint(fp, cp);
      flow->set_all_params(fp);
      load_adam_from_checkpoint(state.flow_opt, flow->all_params(), cp, flow_step);
    }
    if (pipeline != nullptr) {
      std::vector<Parameter> fp = pipeline->latent_flow.all_params();
      fill_params_from_checkpoint(fp, cp);
      pipeline->latent_flow.set_all_params(fp);
      load_adam_from_checkpoint(state.flow_opt, pipeline->latent_flow.all_params(), cp,
                                flow_step);
      pipeline->accepted = cp.meta.at("latent_accepted").get<std::int64_t>();
      pipeline->rejected = cp.meta.at("latent_rejected").get<std::int64_t>();
    }
    for (const nlohmann::json& jrow : cp.meta.at("records")) rows.push_back(row_from_json(jrow));
    for (const nlohmann::json& js : cp.meta.at("stage_seconds")) {
      stage_seconds.push_back(number_from_json(js));
    }
  }

  const auto* annulus = dynamic_cast<const BrownianAnnulus*>(potential.get());
  const EvalSection& eval = config.eval;
  const bool band_enabled = eval.band_hi > eval.band_lo;

  fs::path previous_ckpt = loaded_path;
  Clock::time_point stage_start = Clock::now();

  const StageCallback callback = [&](const DastrState& st, const CommittorNet& qnet,
                                     StageRecord& rec) {
    if (eval.metric == "annulus-curve") {
      rec.error = curve_relative_l2(qnet, *annulus, eval.curve_points);
    }
    RunRow row;
    row.rec = rec;
    const Tensor& newest = st.tset.stages.back().samples;
    if (band_enabled) row.band = norm_band_fraction(newest, eval.band_lo, eval.band_hi);
    if (eval.norm_histogram) {
      const HistogramData hist =
          norm_histogram(newest, eval.norm_bins, eval.norm_lo, eval.norm_hi);
      atomic_write_text(hist_dir / ("stage_" + std::to_string(rec.stage) + ".json"),
                        histogram_to_json(hist).dump(2) + "\n");
    }
    rows.push_back(row);
    stage_seconds.push_back(elapsed_seconds(stage_start));
    stage_start = Clock::now();

    atomic_write_text(out_dir / "metrics.csv", metrics_csv_text(rows));
    atomic_write_text(out_dir / "timings.csv", timings_csv_text(stage_seconds));

    const bool last = rec.stage + 1 == dc.n_adaptive;
    const std::int64_t every = std::max<std::int64_t>(1, config.output.checkpoint_every);
    if ((rec.stage + 1) % every == 0 || last) {
      Checkpoint cp;
      cp.kind = "stage";
      cp.meta["experiment"] = config.experiment;
      cp.meta["seed"] = config.seed;
      cp.meta["next_stage"] = st.next_stage;
      cp.meta["epoch_counter"] = st.epoch_counter;
      cp.meta["q_step"] = st.q_opt.step_count();
      cp.meta["flow_step"] = st.flow_opt.step_count();
      nlohmann::json jrows = nlohmann::json::array();
      for (const RunRow& r : rows) jrows.push_back(row_to_json(r));
      cp.meta["records"] = std::move(jrows);
      nlohmann::json jsec = nlohmann::json::array();
      for (double s : stage_seconds) jsec.push_back(json_number(s));
      cp.meta["stage_seconds"] = std::move(jsec);
      if (pipeline != nullptr) {
        cp.meta["latent_accepted"] = pipeline->accepted;
        cp.meta["latent_rejected"] = pipeline->rejected;
      }
      append_params(cp.tensors, qnet.params());
      append_params(cp.tensors, st.q_opt.state_tensors(qnet.params()));
      if (flow != nullptr) {
        append_params(cp.tensors, flow->all_params());
        append_params(cp.tensors, st.flow_opt.state_tensors(flow->all_params()));
      }
      if (pipeline != nullptr) {
        append_params(cp.tensors, pipeline->ae.all_params());
        append_params(cp.tensors, pipeline->latent_flow.all_params());
        append_params(cp.tensors,
                      st.flow_opt.state_tensors(pipeline->latent_flow.all_params()));
      }
      append_tset_tensors(cp.tensors, st.tset);
      const fs::path file = ckpt_dir / ("stage_" + std::to_string(rec.stage) + ".json");
      save_checkpoint(file, cp);
      if (!previous_ckpt.empty() && previous_ckpt != file) fs::remove(previous_ckpt);
      previous_ckpt = file;
    }

    std::clog << "[" << config.experiment << "] stage " << rec.stage
              << " loss=" << format_double(rec.q_loss);
    if (std::isfinite(rec.error)) std::clog << " error=" << format_double(rec.error);
    if (std::isfinite(rec.acceptance)) {
      std::clog << " acceptance=" << format_double(rec.acceptance);
    }
    std::clog << " tset=" << rec.tset_size << " (" << format_double(stage_seconds.back())
              << "s)" << std::endl;
  };

  if (pipeline != nullptr) {
    LatentRunConfig lrc;
    lrc.dastr = dc;
    lrc.min_acceptance = config.latent.min_acceptance;
    dastr_latent_run(lrc, *potential, net, *pipeline, state, boundary_a, boundary_b, callback);
  } else {
    dastr_run(dc, *potential, net, flow.get(), state, boundary_a, boundary_b, callback);
  }

  RunSummary summary;
  summary.experiment = config.experiment;
  summary.out_dir = out_dir;
  summary.final_error = kNan;
  summary.final_acceptance = kNan;
  summary.final_band_fraction = kNan;
  summary.iso_mean = kNan;
  summary.iso_sd = kNan;
  for (const RunRow& row : rows) {
    summary.stages.push_back(row.rec);
    if (std::isfinite(row.rec.acceptance)) summary.final_acceptance = row.rec.acceptance;
    if (std::isfinite(row.band)) summary.final_band_fraction = row.band;
  }
  if (!rows.empty()) summary.final_error = rows.back().rec.error;

  if (eval.isosurface.enabled) {
    const IsosurfaceSection& is = eval.isosurface;
    Rng rng_iso = Rng::substream(config.seed, {kTagIsosurface});
    const Tensor pool = sample_uniform_outside_ab(*potential, is.pool, rng_iso);
    McSettings mc;
    mc.n_traj = is.n_traj;
    mc.dt = is.dt;
    mc.max_steps = is.max_steps;
    mc.seed = config.seed;
    const IsosurfaceResult iso =
        isosurface_histogram(net, *potential, pool, is.tol, mc, is.bins, is.max_points);
    summary.iso_mean = iso.mean;
    summary.iso_sd = iso.sd;
    summary.iso_points = iso.gamma_points.rows;
    summary.iso_timeouts = iso.timeouts;

    nlohmann::json jiso = histogram_to_json(iso.histogram);
    jiso["mean"] = json_number(iso.mean);
    jiso["sd"] = json_number(iso.sd);
    jiso["points"] = iso.gamma_points.rows;
    jiso["timeouts"] = iso.timeouts;
    nlohmann::json jest = nlohmann::json::array();
    for (double e : iso.mc_estimates) jest.push_back(json_number(e));
    jiso["estimates"] = std::move(jest);
    atomic_write_text(hist_dir / "isosurface.json", jiso.dump(2) + "\n");
  }

  summary.wall_seconds = elapsed_seconds(t0);

  nlohmann::json manifest;
  manifest["config"] = experiment_config_to_json(config);
  nlohmann::json jrows = nlohmann::json::array();
  for (const RunRow& row : rows) jrows.push_back(row_to_json(row));
  manifest["records"] = std::move(jrows);
  nlohmann::json s;
  s["experiment"] = config.experiment;
  s["stages"] = rows.size();
  s["final_error"] = json_number(summary.final_error);
  s["final_acceptance"] = json_number(summary.final_acceptance);
  s["final_band_fraction"] = json_number(summary.final_band_fraction);
  s["iso_mean"] = json_number(summary.iso_mean);
  s["iso_sd"] = json_number(summary.iso_sd);
  s["iso_points"] = summary.iso_points;
  s["iso_timeouts"] = summary.iso_timeouts;
  s["wall_seconds"] = json_number(summary.wall_seconds);
  manifest["summary"] = s;
  atomic_write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return summary;
}

std::string report_runs(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw make_error("report: no run directories given");

  struct Entry {
    std::string dir;
    std::string experiment;
    std::int64_t stages = 0;
    double error = kNan;
    double acceptance = kNan;
    double band = kNan;
    double iso_mean = kNan;
    double iso_sd = kNan;
    double wall = kNan;
  };
  std::vector<Entry> entries;
  for (const fs::path& dir : run_dirs) {
    const fs::path file = dir / "manifest.json";
    std::ifstream in(file);
    if (!in) throw make_error("report: cannot open '", file.string(), "'");
    nlohmann::json manifest;
    try {
      in >> manifest;
    } catch (const nlohmann::json::exception& e) {
      throw make_error("report: '", file.string(), "' is not valid JSON: ", e.what());
    }
    const nlohmann::json& s = manifest.at("summary");
    Entry entry;
    entry.dir = dir.string();
    entry.experiment = s.at("experiment").get<std::string>();
    if (s.contains("stages")) entry.stages = s.at("stages").get<std::int64_t>();
    const auto field = [&](const char* name) {
      return s.contains(name) ? number_from_json(s.at(name)) : kNan;
    };
    entry.error = field("final_error");
    entry.acceptance = field("final_acceptance");
    entry.band = field("final_band_fraction");
    entry.iso_mean = field("iso_mean");
    entry.iso_sd = field("iso_sd");
    entry.wall = field("wall_seconds");
    entries.push_back(std::move(entry));
  }

  const auto fmt = [](double v) {
    if (!std::isfinite(v)) return std::string("-");
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
  };

  std::ostringstream out;
  out << "run_dir\texperiment\tstages\terror\tacceptance\tband\tiso_mean\tiso_sd\twall_s\n";
  for (const Entry& e : entries) {
    out << e.dir << '\t' << e.experiment << '\t' << e.stages << '\t' << fmt(e.error) << '\t'
        << fmt(e.acceptance) << '\t' << fmt(e.band) << '\t' << fmt(e.iso_mean) << '\t'
        << fmt(e.iso_sd) << '\t' << fmt(e.wall) << '\n';
  }

  const auto column = [&](auto getter) {
    std::vector<double> values;
    for (const Entry& e : entries) {
      const double v = getter(e);
      if (std::isfinite(v)) values.push_back(v);
    }
    return values;
  };
  const auto stats = [&](const std::vector<double>& values) -> std::string {
    if (values.empty()) return "-";
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    if (values.size() < 2) return fmt(mean);
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return fmt(mean) + " +/- " + fmt(sd);
  };
  out << "aggregate\t-\t-\t" << stats(column([](const Entry& e) { return e.error; })) << '\t'
      << stats(column([](const Entry& e) { return e.acceptance; })) << '\t'
      << stats(column([](const Entry& e) { return e.band; })) << '\t'
      << stats(column([](const Entry& e) { return e.iso_mean; })) << '\t'
      << stats(column([](const Entry& e) { return e.iso_sd; })) << '\t'
      << stats(column([](const Entry& e) { return e.wall; })) << '\n';
  return out.str();
}

}  // namespace dastr

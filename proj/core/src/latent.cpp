#include "dastr/latent.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "dastr/common.hpp"
#include "dastr/metrics.hpp"

namespace dastr {

std::uint64_t parameter_hash(const std::vector<Parameter>& params) {
  std::uint64_t h = 1469598103934665603ull;  // FNV offset basis
  const auto mix_bytes = [&h](const void* data, std::size_t bytes) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;  // FNV prime
    }
  };
  for (const Parameter& param : params) {
    mix_bytes(param.name.data(), param.name.size());
    const std::int64_t dims[2] = {param.value.rows, param.value.cols};
    mix_bytes(dims, sizeof(dims));
    mix_bytes(param.value.data.data(), param.value.data.size() * sizeof(double));
  }
  return h;
}

Box latent_box(const Tensor& codes, double margin_fraction) {
  if (codes.rows == 0) throw make_error("latent_box: no codes");
  if (!(margin_fraction >= 0.0)) throw make_error("latent_box: negative margin");
  std::vector<double> lo(static_cast<std::size_t>(codes.cols),
                         std::numeric_limits<double>::infinity());
  std::vector<double> hi(static_cast<std::size_t>(codes.cols),
                         -std::numeric_limits<double>::infinity());
  for (std::int64_t i = 0; i < codes.rows; ++i) {
    for (std::int64_t c = 0; c < codes.cols; ++c) {
      const double v = codes.at(i, c);
      if (!std::isfinite(v)) throw make_error("latent_box: non-finite code");
      lo[static_cast<std::size_t>(c)] = std::min(lo[static_cast<std::size_t>(c)], v);
      hi[static_cast<std::size_t>(c)] = std::max(hi[static_cast<std::size_t>(c)], v);
    }
  }
  for (std::int64_t c = 0; c < codes.cols; ++c) {
    const double span = hi[static_cast<std::size_t>(c)] - lo[static_cast<std::size_t>(c)];
    const double pad = span > 0.0 ? margin_fraction * span : 1.0;
    lo[static_cast<std::size_t>(c)] -= pad;
    hi[static_cast<std::size_t>(c)] += pad;
  }
  return Box(std::move(lo), std::move(hi));
}

LatentWeights latent_ce_weights(const Tensor& x, const CommittorNet& net,
                                const Potential& potential, const Bias* bias,
                                const Autoencoder& ae, const FlowModel& latent_flow) {
  if (x.cols != ae.dim()) {
    throw make_error("latent_ce_weights: sample dimension ", x.cols, " vs autoencoder input ",
                     ae.dim());
  }
  const Tensor codes = ae.encode(x);
  const Tensor decoded = ae.decode(codes);
  const std::vector<double> target = sampling_density_unnorm(net, potential, bias, decoded);
  const std::vector<double> proposal_log = latent_flow.log_density(codes);
  LatentWeights out;
  out.weights.reserve(static_cast<std::size_t>(x.rows));
  for (std::int64_t i = 0; i < x.rows; ++i) {
    const double w = target[static_cast<std::size_t>(i)] *
                     std::exp(-proposal_log[static_cast<std::size_t>(i)]);
    if (!std::isfinite(w) || w < 0.0) {
      ++out.dropped;
      continue;
    }
    out.weights.push_back(w);
  }
  return out;
}

FilterResult decode_and_filter(LatentPipeline& pipeline, const Potential& potential,
                               const Tensor& latents) {
  if (latents.rows == 0) throw make_error("decode_and_filter: no latent samples");
  if (!latents.all_finite()) throw make_error("decode_and_filter: non-finite latent sample");
  const Tensor decoded = pipeline.ae.decode(latents);
  const std::vector<double> log_density = pipeline.latent_flow.log_density(latents);
  std::vector<std::int64_t> keep;
  std::vector<double> observed;
  observed.reserve(static_cast<std::size_t>(decoded.rows));
  for (std::int64_t i = 0; i < decoded.rows; ++i) {
    const double v = potential.energy(decoded.row(i));
    observed.push_back(v);
    if (v <= pipeline.energy_threshold) {
      keep.push_back(i);
      ++pipeline.accepted;
    } else {
      ++pipeline.rejected;
    }
  }
  if (keep.empty()) {
    const double lo = *std::min_element(observed.begin(), observed.end());
    const double hi = *std::max_element(observed.begin(), observed.end());
    const HistogramData hist =
        value_histogram(observed, 10, lo, hi > lo ? hi : lo + 1.0);
    std::ostringstream bins;
    bins.precision(6);
    for (std::size_t b = 0; b < hist.counts.size(); ++b) {
      bins << " [" << hist.edges[b] << "," << hist.edges[b + 1] << "):" << hist.counts[b];
    }
    throw make_error("decode_and_filter: no decoded sample has energy <= ",
                     pipeline.energy_threshold, "; observed energy histogram:", bins.str());
  }
  FilterResult result;
  result.samples = take_rows(decoded, keep);
  result.log_density.reserve(keep.size());
  for (const std::int64_t i : keep) {
    result.log_density.push_back(log_density[static_cast<std::size_t>(i)]);
  }
  result.acceptance =
      static_cast<double>(keep.size()) / static_cast<double>(latents.rows);
  return result;
}

namespace {

// Draws decoded, filtered configurations until n are collected: energy filter
// first (tracked for the acceptance record), then domain containment and
// metastable-set exclusion so the samples qualify for the training set.
struct LatentDraw {
  Stage stage;
  double energy_acceptance = 0.0;
};

LatentDraw draw_latent_stage(LatentPipeline& pipeline, const Potential& potential,
                             std::int64_t n, std::int64_t batch, std::int64_t max_passes,
                             Rng& rng) {
  const std::int64_t d = potential.dim();
  LatentDraw out;
  out.stage.samples = Tensor(n, d);
  out.stage.log_density.resize(static_cast<std::size_t>(n));
  std::int64_t got = 0;
  std::int64_t energy_pass = 0;
  std::int64_t energy_total = 0;
  const Box& box = potential.domain();
  for (std::int64_t pass = 0; pass < max_passes && got < n; ++pass) {
    const Tensor latents = pipeline.latent_flow.sample(batch, rng);
    const FilterResult filtered = decode_and_filter(pipeline, potential, latents);
    energy_total += latents.rows;
    energy_pass += filtered.samples.rows;
    for (std::int64_t i = 0; i < filtered.samples.rows && got < n; ++i) {
      const auto row = filtered.samples.row(i);
      if (!box.contains(row)) continue;
      if (potential.in_a_or_b(row)) continue;
      std::copy(row.begin(), row.end(), out.stage.samples.row(got).begin());
      out.stage.log_density[static_cast<std::size_t>(got)] =
          filtered.log_density[static_cast<std::size_t>(i)];
      ++got;
    }
  }
  if (got < n) {
    throw make_error("dastr_latent_run: only ", got, " of ", n,
                     " decoded samples usable after ", max_passes,
                     " passes (energy acceptance ",
                     static_cast<double>(energy_pass) / static_cast<double>(energy_total), ")");
  }
  out.energy_acceptance =
      static_cast<double>(energy_pass) / static_cast<double>(energy_total);
  return out;
}

}  // namespace

DastrResult dastr_latent_run(const LatentRunConfig& config, const Potential& potential,
                             CommittorNet& net, LatentPipeline& pipeline, DastrState& state,
                             const Tensor& boundary_a, const Tensor& boundary_b,
                             const StageCallback& callback) {
  const DastrConfig& dc = config.dastr;
  if (dc.n_adaptive <= 0) throw make_error("dastr_latent_run: n_adaptive must be positive");
  if (pipeline.ae.dim() != potential.dim()) {
    throw make_error("dastr_latent_run: autoencoder input ", pipeline.ae.dim(),
                     " vs potential dimension ", potential.dim());
  }
  if (pipeline.latent_flow.dim() != pipeline.ae.d_latent()) {
    throw make_error("dastr_latent_run: latent flow dimension ", pipeline.latent_flow.dim(),
                     " vs autoencoder latent dimension ", pipeline.ae.d_latent());
  }
  state.tset.validate(potential);
  const std::int64_t n_new = dc.n_new_per_stage > 0 ? dc.n_new_per_stage : state.tset.total();

  DastrResult result;
  for (std::int64_t k = state.next_stage; k < dc.n_adaptive; ++k) {
    StageRecord record;
    record.stage = k;
    record.flow_ce = std::numeric_limits<double>::quiet_NaN();
    record.acceptance = std::numeric_limits<double>::quiet_NaN();
    record.error = std::numeric_limits<double>::quiet_NaN();

    {
      QTrainConfig qcfg = dc.q;
      qcfg.epochs = dc.n_e;
      Rng rng_q = Rng::substream(dc.seed, {0x7131u, static_cast<std::uint64_t>(k)});
      const QTrainTrace trace =
          train_committor(net, state.tset, potential, boundary_a, boundary_b, qcfg,
                          state.q_opt, state.epoch_counter, rng_q);
      state.epoch_counter += dc.n_e;
      record.q_loss = trace.loss_per_epoch.back();
      record.skipped = trace.skipped;
    }

    const bool adapt = k + 1 < dc.n_adaptive;
    if (adapt) {
      CeTrainConfig ce = dc.flow_ce;
      ce.epochs = dc.n_e_flow;
      Rng rng_f = Rng::substream(dc.seed, {0x666Cu, static_cast<std::uint64_t>(k)});
      const Autoencoder& ae = pipeline.ae;
      const TargetDensity target = [&](const Tensor& latents) {
        return sampling_density_unnorm(net, potential, dc.sampling_bias, ae.decode(latents));
      };
      // Proposal = the latent flow itself.  The latent box is low-dimensional,
      // so the fresh uniform-on-box model already overlaps the target and the
      // self-sampling form is the consistent choice (the training set stores
      // decoded configurations, not codes).
      const CeTrainTrace ce_trace =
          train_flow_ce(pipeline.latent_flow, target, ce, state.flow_opt, rng_f);
      record.flow_ce = ce_trace.ce_per_epoch.back();

      Rng rng_s = Rng::substream(dc.seed, {0x7361u, static_cast<std::uint64_t>(k)});
      LatentDraw draw = draw_latent_stage(pipeline, potential, n_new,
                                          std::max<std::int64_t>(n_new, 1),
                                          dc.sample_max_passes, rng_s);
      record.acceptance = draw.energy_acceptance;
      if (draw.energy_acceptance < config.min_acceptance) {
        throw make_error("dastr_latent_run: stage ", k, " energy-filter acceptance ",
                         draw.energy_acceptance, " below the configured minimum ",
                         config.min_acceptance,
                         "; the decoder is producing high-energy configurations");
      }
      refine_training_set(state.tset, std::move(draw.stage), dc.policy, dc.keep_fraction);
      state.tset.validate(potential);
    }

    record.tset_size = state.tset.total();
    state.next_stage = k + 1;
    if (callback) callback(state, net, record);
    result.stages.push_back(record);
    if (k == dc.stop_after_stage) break;
  }
  return result;
}

}  // namespace dastr

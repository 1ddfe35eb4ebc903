#include "dastr/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "dastr/common.hpp"

namespace dastr {

namespace {

constexpr double kUnitClamp = 1e-12;  // keeps sampled cube coordinates off the faces

double log_gaussian_norm(std::int64_t dim) {
  return -0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi);
}

}  // namespace

FlowModel::FlowModel(FlowConfig config, Rng& rng) : config_(std::move(config)) {
  const std::int64_t d = config_.dim;
  if (d < 2) throw make_error("FlowModel: dimension must be >= 2");
  if (config_.blocks < 1 || config_.layers_per_block < 1) {
    throw make_error("FlowModel: blocks and layers_per_block must be >= 1");
  }
  if (config_.hidden < 1) throw make_error("FlowModel: hidden width must be >= 1");
  if (!(config_.s_max > 0.0)) throw make_error("FlowModel: s_max must be positive");
  if (config_.box.dim() != d) {
    throw make_error("FlowModel: box dimension ", config_.box.dim(), " != ", d);
  }

  const std::int64_t half = (d + 1) / 2;
  layers_.reserve(static_cast<std::size_t>(config_.blocks * config_.layers_per_block));
  for (std::int64_t block = 0; block < config_.blocks; ++block) {
    for (std::int64_t j = 0; j < config_.layers_per_block; ++j) {
      // Block `block` rotates coordinate labels by `block`; layers alternate
      // which rotated half is frozen.
      std::vector<std::int64_t> frozen;
      std::vector<std::int64_t> active;
      const bool low_half_frozen = j % 2 == 0;
      for (std::int64_t i = 0; i < d; ++i) {
        const bool in_low_half = (i + block) % d < half;
        if (in_low_half == low_half_frozen) {
          frozen.push_back(i);
        } else {
          active.push_back(i);
        }
      }
      MlpConfig subnet_config;
      subnet_config.widths = {static_cast<std::int64_t>(frozen.size()), config_.hidden,
                              2 * static_cast<std::int64_t>(active.size())};
      subnet_config.hidden = Activation::kRelu;
      subnet_config.output = Activation::kIdentity;
      subnet_config.zero_init_last = true;
      const std::int64_t index = block * config_.layers_per_block + j;
      layers_.push_back(Layer{std::move(frozen), std::move(active),
                              Mlp(subnet_config, rng, "flow.L" + std::to_string(index) + ".")});
    }
  }
}

std::vector<Parameter> FlowModel::all_params() const {
  std::vector<Parameter> all;
  for (const Layer& layer : layers_) {
    all.insert(all.end(), layer.subnet.params().begin(), layer.subnet.params().end());
  }
  return all;
}

void FlowModel::set_all_params(const std::vector<Parameter>& params) {
  std::size_t cursor = 0;
  for (Layer& layer : layers_) {
    for (Parameter& p : layer.subnet.params()) {
      if (cursor >= params.size()) throw make_error("FlowModel::set_all_params: too few tensors");
      if (params[cursor].name != p.name || !params[cursor].value.same_shape(p.value)) {
        throw make_error("FlowModel::set_all_params: mismatch at '", p.name, "'");
      }
      p.value = params[cursor].value;
      ++cursor;
    }
  }
  if (cursor != params.size()) throw make_error("FlowModel::set_all_params: too many tensors");
}

void FlowModel::forward(const Tensor& x, Tensor* z, Tensor* log_det) const {
  const std::int64_t d = config_.dim;
  const std::int64_t n = x.rows;
  if (x.cols != d) throw make_error("FlowModel::forward: points have ", x.cols, " columns");
  for (std::int64_t i = 0; i < n; ++i) {
    if (!config_.box.strictly_inside(x.row(i))) {
      throw make_error("FlowModel::forward: point ", i, " not strictly inside the box");
    }
  }

  Tensor y(n, d);
  Tensor ld(n, 1);
  double log_width_sum = 0.0;
  for (std::int64_t j = 0; j < d; ++j) log_width_sum += std::log(config_.box.hi[j] - config_.box.lo[j]);

  // Box affine + logit.
  for (std::int64_t i = 0; i < n; ++i) {
    const double* xr = x.data.data() + i * d;
    double* yr = y.data.data() + i * d;
    double acc = -log_width_sum;
    for (std::int64_t j = 0; j < d; ++j) {
      const double w = config_.box.hi[j] - config_.box.lo[j];
      const double u = (xr[j] - config_.box.lo[j]) / w;
      yr[j] = std::log(u) - std::log1p(-u);
      acc += -std::log(u) - std::log1p(-u);
    }
    ld.data[static_cast<std::size_t>(i)] = acc;
  }

  // Coupling stack.
  for (const Layer& layer : layers_) {
    const auto& frozen = layer.frozen;
    const auto& active = layer.active;
    Tensor yf(n, static_cast<std::int64_t>(frozen.size()));
    for (std::int64_t i = 0; i < n; ++i) {
      const double* yr = y.data.data() + i * d;
      double* fr = yf.data.data() + i * yf.cols;
      for (std::size_t k = 0; k < frozen.size(); ++k) fr[k] = yr[frozen[k]];
    }
    Tensor h = layer.subnet.forward(yf);
    const std::int64_t na = static_cast<std::int64_t>(active.size());
    for (std::int64_t i = 0; i < n; ++i) {
      double* yr = y.data.data() + i * d;
      const double* hr = h.data.data() + i * h.cols;
      double acc = 0.0;
      for (std::int64_t k = 0; k < na; ++k) {
        const double s = config_.s_max * std::tanh(hr[k] / config_.s_max);
        const double t = hr[na + k];
        yr[active[static_cast<std::size_t>(k)]] =
            yr[active[static_cast<std::size_t>(k)]] * std::exp(s) + t;
        acc += s;
      }
      ld.data[static_cast<std::size_t>(i)] += acc;
    }
  }
  if (z != nullptr) *z = std::move(y);
  if (log_det != nullptr) *log_det = std::move(ld);
}

Tensor FlowModel::inverse(const Tensor& z) const {
  const std::int64_t d = config_.dim;
  const std::int64_t n = z.rows;
  if (z.cols != d) throw make_error("FlowModel::inverse: points have ", z.cols, " columns");

  Tensor y = z;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    const Layer& layer = *it;
    const auto& frozen = layer.frozen;
    const auto& active = layer.active;
    Tensor yf(n, static_cast<std::int64_t>(frozen.size()));
    for (std::int64_t i = 0; i < n; ++i) {
      const double* yr = y.data.data() + i * d;
      double* fr = yf.data.data() + i * yf.cols;
      for (std::size_t k = 0; k < frozen.size(); ++k) fr[k] = yr[frozen[k]];
    }
    Tensor h = layer.subnet.forward(yf);
    const std::int64_t na = static_cast<std::int64_t>(active.size());
    for (std::int64_t i = 0; i < n; ++i) {
      double* yr = y.data.data() + i * d;
      const double* hr = h.data.data() + i * h.cols;
      for (std::int64_t k = 0; k < na; ++k) {
        const double s = config_.s_max * std::tanh(hr[k] / config_.s_max);
        const double t = hr[na + k];
        yr[active[static_cast<std::size_t>(k)]] =
            (yr[active[static_cast<std::size_t>(k)]] - t) * std::exp(-s);
      }
    }
  }

  // Logit inverse + affine back into the box, kept strictly interior.
  Tensor x(n, d);
  for (std::int64_t i = 0; i < n; ++i) {
    const double* yr = y.data.data() + i * d;
    double* xr = x.data.data() + i * d;
    for (std::int64_t j = 0; j < d; ++j) {
      double u = 1.0 / (1.0 + std::exp(-yr[j]));
      u = std::min(std::max(u, kUnitClamp), 1.0 - kUnitClamp);
      xr[j] = config_.box.lo[j] + (config_.box.hi[j] - config_.box.lo[j]) * u;
    }
  }
  return x;
}

std::vector<double> FlowModel::log_density(const Tensor& x) const {
  Tensor z;
  Tensor ld;
  forward(x, &z, &ld);
  const std::int64_t d = config_.dim;
  const double norm = log_gaussian_norm(d);
  std::vector<double> out(static_cast<std::size_t>(x.rows));
  for (std::int64_t i = 0; i < x.rows; ++i) {
    const double* zr = z.data.data() + i * d;
    double sq = 0.0;
    for (std::int64_t j = 0; j < d; ++j) sq += zr[j] * zr[j];
    out[static_cast<std::size_t>(i)] = norm - 0.5 * sq + ld.data[static_cast<std::size_t>(i)];
  }
  return out;
}

Tensor FlowModel::sample(std::int64_t n, Rng& rng) const {
  if (n < 1) throw make_error("FlowModel::sample: n must be >= 1");
  Tensor z(n, config_.dim);
  rng.fill_normal(z.data);
  return inverse(z);
}

Tensor FlowModel::sample_outside_ab(std::int64_t n, const Potential& potential, Rng& rng,
                                    std::int64_t max_passes, std::int64_t* total_draws) const {
  if (potential.dim() != config_.dim) {
    throw make_error("FlowModel::sample_outside_ab: potential dimension mismatch");
  }
  Tensor out(n, config_.dim);
  std::int64_t got = 0;
  std::int64_t drawn = 0;
  for (std::int64_t pass = 0; pass < max_passes && got < n; ++pass) {
    Tensor draw = sample(n, rng);
    for (std::int64_t i = 0; i < draw.rows && got < n; ++i) {
      ++drawn;
      auto row = draw.row(i);
      if (potential.in_a_or_b(row)) continue;
      std::copy(row.begin(), row.end(), out.row(got).begin());
      ++got;
    }
  }
  if (total_draws != nullptr) *total_draws = drawn;
  if (got < n) {
    throw make_error("FlowModel::sample_outside_ab: only ", got, " of ", n,
                     " samples outside A and B after ", max_passes,
                     " passes; the model mass sits almost entirely on the metastable sets");
  }
  return out;
}

FlowModel::Bound FlowModel::bind(ad::Tape& tape) const {
  Bound bound;
  bound.model = this;
  bound.tape = &tape;
  bound.subnets.reserve(layers_.size());
  for (const Layer& layer : layers_) bound.subnets.push_back(layer.subnet.bind(tape));
  return bound;
}

std::vector<ad::Value> FlowModel::Bound::leaves() const {
  std::vector<ad::Value> all;
  for (const BoundMlp& subnet : subnets) {
    all.insert(all.end(), subnet.leaves.begin(), subnet.leaves.end());
  }
  return all;
}

ad::Value FlowModel::Bound::log_density(ad::Value x) const {
  if (model == nullptr || tape == nullptr) throw make_error("FlowModel::Bound: unbound");
  const FlowConfig& config = model->config_;
  const std::int64_t d = config.dim;
  if (x.cols() != d) throw make_error("FlowModel::Bound: points have ", x.cols(), " columns");

  Tensor lo_row(1, d);
  Tensor inv_width_row(1, d);
  double log_width_sum = 0.0;
  for (std::int64_t j = 0; j < d; ++j) {
    const double w = config.box.hi[j] - config.box.lo[j];
    lo_row.data[static_cast<std::size_t>(j)] = config.box.lo[j];
    inv_width_row.data[static_cast<std::size_t>(j)] = 1.0 / w;
    log_width_sum += std::log(w);
  }

  ad::Tape& t = *tape;
  ad::Value u = ad::mul(ad::sub(x, ad::constant(t, std::move(lo_row))),
                        ad::constant(t, std::move(inv_width_row)));
  ad::Value one_minus_u = ad::shift(ad::neg(u), 1.0);
  ad::Value log_u = ad::log(u);
  ad::Value log_1mu = ad::log(one_minus_u);
  ad::Value y = ad::sub(log_u, log_1mu);
  // Per-sample log|det| of the affine+logit stage.
  ad::Value ld = ad::shift(ad::neg(ad::sum_cols(ad::add(log_u, log_1mu))), -log_width_sum);

  for (std::size_t l = 0; l < model->layers_.size(); ++l) {
    const Layer& layer = model->layers_[l];
    const std::int64_t na = static_cast<std::int64_t>(layer.active.size());
    ad::Value yf = ad::select_cols(y, layer.frozen);
    ad::Value ya = ad::select_cols(y, layer.active);
    ad::Value h = subnets[l](yf);
    std::vector<std::int64_t> first(static_cast<std::size_t>(na));
    std::vector<std::int64_t> second(static_cast<std::size_t>(na));
    for (std::int64_t k = 0; k < na; ++k) {
      first[static_cast<std::size_t>(k)] = k;
      second[static_cast<std::size_t>(k)] = na + k;
    }
    ad::Value s_raw = ad::select_cols(h, first);
    ad::Value t_shift = ad::select_cols(h, second);
    ad::Value s = ad::scale(ad::tanh(ad::scale(s_raw, 1.0 / config.s_max)), config.s_max);
    ad::Value za = ad::add(ad::mul(ya, ad::exp(s)), t_shift);
    y = ad::add(ad::scatter_cols(za, layer.active, d), ad::scatter_cols(yf, layer.frozen, d));
    ld = ad::add(ld, ad::sum_cols(s));
  }

  ad::Value prior =
      ad::shift(ad::scale(ad::sum_cols(ad::square(y)), -0.5), log_gaussian_norm(d));
  return ad::add(prior, ld);
}

namespace {

// One importance-weighted CE descent step on batch x drawn from a proposal
// with the given per-row log-densities.  Returns the batch CE estimate.
double ce_weighted_step(FlowModel& model, std::vector<Parameter>& params, const Tensor& x,
                        const std::vector<double>& proposal_log,
                        const TargetDensity& target_density_unnorm, const CeTrainConfig& config,
                        AdamOptimizer& optimizer, CeTrainTrace& trace, std::int64_t epoch) {
  const std::int64_t n = x.rows;
  const std::int64_t chunk = std::max<std::int64_t>(1, config.chunk);
  std::vector<double> target = target_density_unnorm(x);
  if (static_cast<std::int64_t>(target.size()) != n) {
    throw make_error("train_flow_ce: target returned ", target.size(), " values for ", n,
                     " samples");
  }

  // Importance coefficients, self-normalized.  Dividing the target values
  // by their maximum first makes every later quantity scale-free, so the
  // target's unknown normalization cannot reach the update.
  trace.total += n;
  std::int64_t rejected = 0;
  double target_max = 0.0;
  for (double p : target) {
    if (std::isfinite(p) && p > target_max) target_max = p;
  }
  if (target_max <= 0.0) {
    throw make_error("train_flow_ce: target density vanished on all ", n,
                     " proposal samples at epoch ", epoch);
  }
  std::vector<double> log_weight(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double p = target[i];
    if (!std::isfinite(p) || p < 0.0) {
      log_weight[i] = -std::numeric_limits<double>::infinity();
      ++rejected;
      continue;
    }
    log_weight[i] = std::log(p / target_max) - proposal_log[i];
  }
  if (static_cast<double>(rejected) > config.max_reject_fraction * static_cast<double>(n)) {
    throw make_error("train_flow_ce: ", rejected, " of ", n,
                     " importance weights non-finite at epoch ", epoch,
                     " (limit ", config.max_reject_fraction, "); target and proposal have "
                     "diverged");
  }
  trace.rejected += rejected;

  double lw_max = -std::numeric_limits<double>::infinity();
  for (double lw : log_weight) lw_max = std::max(lw_max, lw);
  if (!std::isfinite(lw_max)) {
    throw make_error("train_flow_ce: all importance weights vanished at epoch ", epoch);
  }
  double weight_sum = 0.0;
  std::vector<double> coeff(log_weight.size());
  for (std::size_t i = 0; i < log_weight.size(); ++i) {
    coeff[i] = std::exp(log_weight[i] - lw_max);
    weight_sum += coeff[i];
  }
  for (double& c : coeff) c /= weight_sum;

  // Chunked differentiable pass: loss = -sum_i coeff_i log p_model(x_i).
  std::vector<Tensor> grad_acc;
  grad_acc.reserve(params.size());
  for (const Parameter& p : params) grad_acc.push_back(Tensor::zeros(p.value.rows, p.value.cols));
  double loss_value = 0.0;

  for (std::int64_t start = 0; start < n; start += chunk) {
    const std::int64_t len = std::min(chunk, n - start);
    Tensor xc(len, x.cols);
    Tensor cc(len, 1);
    for (std::int64_t i = 0; i < len; ++i) {
      auto row = x.row(start + i);
      std::copy(row.begin(), row.end(), xc.row(i).begin());
      cc.data[static_cast<std::size_t>(i)] = coeff[static_cast<std::size_t>(start + i)];
    }
    ad::Tape tape;
    FlowModel::Bound bound = model.bind(tape);
    ad::Value logp = bound.log_density(ad::constant(tape, std::move(xc)));
    ad::Value loss = ad::neg(ad::sum_all(ad::mul(ad::constant(tape, std::move(cc)), logp)));
    loss_value += loss.value().item();

    std::vector<ad::Value> leaves = bound.leaves();
    std::vector<ad::Value> grads = ad::grad(loss, leaves);
    for (std::size_t k = 0; k < grads.size(); ++k) {
      axpy(1.0, grads[k].value(), grad_acc[k]);
    }
  }

  if (!std::isfinite(loss_value)) {
    throw make_error("train_flow_ce: non-finite cross-entropy at epoch ", epoch);
  }
  optimizer.step(params, grad_acc);
  model.set_all_params(params);
  return loss_value;
}

void check_ce_config(const CeTrainConfig& config) {
  if (config.epochs < 1 || config.steps_per_epoch < 1) {
    throw make_error("train_flow_ce: epochs and steps_per_epoch must be >= 1");
  }
  if (config.batch < 2) throw make_error("train_flow_ce: batch must be >= 2");
}

}  // namespace

CeTrainTrace train_flow_ce(FlowModel& model, const TargetDensity& target_density_unnorm,
                           const CeTrainConfig& config, AdamOptimizer& optimizer, Rng& rng) {
  check_ce_config(config);
  std::vector<Parameter> params = model.all_params();
  CeTrainTrace trace;
  trace.ce_per_epoch.reserve(static_cast<std::size_t>(config.epochs));

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_ce = 0.0;
    for (std::int64_t step = 0; step < config.steps_per_epoch; ++step) {
      // Proposal = current model, detached.
      Tensor x = model.sample(config.batch, rng);
      std::vector<double> proposal_log = model.log_density(x);
      epoch_ce += ce_weighted_step(model, params, x, proposal_log, target_density_unnorm,
                                   config, optimizer, trace, epoch);
    }
    trace.ce_per_epoch.push_back(epoch_ce / static_cast<double>(config.steps_per_epoch));
  }
  return trace;
}

CeTrainTrace train_flow_ce(FlowModel& model, const Tensor& samples,
                           const std::vector<double>& proposal_log_density,
                           const TargetDensity& target_density_unnorm,
                           const CeTrainConfig& config, AdamOptimizer& optimizer, Rng& rng) {
  check_ce_config(config);
  const std::int64_t n = samples.rows;
  if (n < 2) throw make_error("train_flow_ce: need at least 2 proposal samples, got ", n);
  if (samples.cols != model.dim()) {
    throw make_error("train_flow_ce: proposal samples have dimension ", samples.cols,
                     ", model expects ", model.dim());
  }
  if (static_cast<std::int64_t>(proposal_log_density.size()) != n) {
    throw make_error("train_flow_ce: ", proposal_log_density.size(),
                     " proposal log-densities for ", n, " samples");
  }
  const std::int64_t batch = std::min(config.batch, n);

  std::vector<Parameter> params = model.all_params();
  CeTrainTrace trace;
  trace.ce_per_epoch.reserve(static_cast<std::size_t>(config.epochs));
  std::vector<std::int64_t> indices(static_cast<std::size_t>(n));

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_ce = 0.0;
    for (std::int64_t step = 0; step < config.steps_per_epoch; ++step) {
      Tensor x(batch, samples.cols);
      std::vector<double> proposal_log(static_cast<std::size_t>(batch));
      if (batch == n) {
        x = samples;
        proposal_log = proposal_log_density;
      } else {
        // Distinct rows per step via a partial Fisher-Yates pass.
        std::iota(indices.begin(), indices.end(), std::int64_t{0});
        for (std::int64_t i = 0; i < batch; ++i) {
          const std::int64_t j =
              i + static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(n - i)));
          std::swap(indices[static_cast<std::size_t>(i)], indices[static_cast<std::size_t>(j)]);
          const std::int64_t src = indices[static_cast<std::size_t>(i)];
          auto row = samples.row(src);
          std::copy(row.begin(), row.end(), x.row(i).begin());
          proposal_log[static_cast<std::size_t>(i)] =
              proposal_log_density[static_cast<std::size_t>(src)];
        }
      }
      epoch_ce += ce_weighted_step(model, params, x, proposal_log, target_density_unnorm,
                                   config, optimizer, trace, epoch);
    }
    trace.ce_per_epoch.push_back(epoch_ce / static_cast<double>(config.steps_per_epoch));
  }
  return trace;
}

}  // namespace dastr

#include "dastr/nets.hpp"

#include <cmath>

#include "dastr/common.hpp"

namespace dastr {

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "tanh2") return Activation::kSquaredTanh;
  if (name == "relu") return Activation::kRelu;
  if (name == "swish") return Activation::kSwish;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "identity") return Activation::kIdentity;
  throw make_error("unknown activation '", name,
                   "' (expected tanh, tanh2, relu, swish, sigmoid, identity)");
}

std::string activation_to_string(Activation activation) {
  switch (activation) {
    case Activation::kTanh: return "tanh";
    case Activation::kSquaredTanh: return "tanh2";
    case Activation::kRelu: return "relu";
    case Activation::kSwish: return "swish";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kIdentity: return "identity";
  }
  throw make_error("unknown activation enum value");
}

ad::Value apply_activation(ad::Value x, Activation activation) {
  switch (activation) {
    case Activation::kTanh: return ad::tanh(x);
    case Activation::kSquaredTanh: return ad::square(ad::tanh(x));
    case Activation::kRelu: return ad::relu(x);
    case Activation::kSwish: return ad::swish(x);
    case Activation::kSigmoid: return ad::sigmoid(x);
    case Activation::kIdentity: return x;
  }
  throw make_error("unknown activation enum value");
}

Tensor apply_activation_plain(const Tensor& x, Activation activation) {
  switch (activation) {
    case Activation::kTanh: return tanh(x);
    case Activation::kSquaredTanh: return square(tanh(x));
    case Activation::kRelu: return relu(x);
    case Activation::kSwish: return mul(x, sigmoid(x));
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kIdentity: return x;
  }
  throw make_error("unknown activation enum value");
}

Mlp::Mlp(MlpConfig config, Rng& rng, std::string prefix) : config_(std::move(config)) {
  const auto& widths = config_.widths;
  if (widths.size() < 2) throw make_error("Mlp: need at least input and output widths");
  for (std::int64_t w : widths) {
    if (w <= 0) throw make_error("Mlp: widths must be positive, got ", w);
  }
  const std::size_t n_layers = widths.size() - 1;
  params_.reserve(2 * n_layers);
  for (std::size_t layer = 0; layer < n_layers; ++layer) {
    const std::int64_t fan_in = widths[layer];
    const std::int64_t fan_out = widths[layer + 1];
    Tensor w(fan_in, fan_out);
    const bool zero_layer = config_.zero_init_last && layer == n_layers - 1;
    if (!zero_layer) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (double& value : w.data) value = rng.uniform(-limit, limit);
    }
    params_.push_back({prefix + "W" + std::to_string(layer), std::move(w)});
    params_.push_back({prefix + "b" + std::to_string(layer), Tensor::zeros(1, fan_out)});
  }
}

Tensor Mlp::forward(const Tensor& x) const {
  if (x.cols != input_dim()) {
    throw make_error("Mlp::forward: input has ", x.cols, " columns, expected ", input_dim());
  }
  const std::size_t n_layers = config_.widths.size() - 1;
  Tensor h = x;
  for (std::size_t layer = 0; layer < n_layers; ++layer) {
    const Tensor& w = params_[2 * layer].value;
    const Tensor& b = params_[2 * layer + 1].value;
    h = add(matmul(h, w), b);
    const Activation act = layer + 1 == n_layers ? config_.output : config_.hidden;
    h = apply_activation_plain(h, act);
  }
  return h;
}

BoundMlp Mlp::bind(ad::Tape& tape) const {
  BoundMlp bound;
  bound.net = this;
  bound.tape = &tape;
  bound.leaves.reserve(params_.size());
  for (const Parameter& p : params_) bound.leaves.push_back(ad::leaf(tape, p.value));
  return bound;
}

ad::Value BoundMlp::operator()(ad::Value x) const {
  if (net == nullptr || tape == nullptr) throw make_error("BoundMlp: unbound network");
  if (x.cols() != net->input_dim()) {
    throw make_error("BoundMlp: input has ", x.cols(), " columns, expected ", net->input_dim());
  }
  const auto& config = net->config();
  const std::size_t n_layers = config.widths.size() - 1;
  ad::Value h = x;
  for (std::size_t layer = 0; layer < n_layers; ++layer) {
    h = ad::add(ad::matmul(h, leaves[2 * layer]), leaves[2 * layer + 1]);
    const Activation act = layer + 1 == n_layers ? config.output : config.hidden;
    h = apply_activation(h, act);
  }
  return h;
}

CommittorNet::CommittorNet(std::int64_t dim, std::vector<std::int64_t> hidden_widths,
                           Activation hidden, Rng& rng)
    : mlp_(
          [&] {
            MlpConfig config;
            config.widths.push_back(dim);
            for (std::int64_t w : hidden_widths) config.widths.push_back(w);
            config.widths.push_back(1);
            config.hidden = hidden;
            config.output = Activation::kSigmoid;
            return config;
          }(),
          rng, "q.") {}

Tensor CommittorNet::values(const Tensor& x) const { return mlp_.forward(x); }

Tensor CommittorNet::gradient_squared(const Tensor& x, Tensor* values_out) const {
  ad::Tape tape;
  ad::Value xv = ad::constant(tape, x);
  Bound bound = bind(tape);
  ad::Value q = bound(xv);
  ad::Value g = ad::input_gradient(q, xv);
  Tensor gradsq = sum_cols(square(g.value()));
  if (values_out != nullptr) *values_out = q.value();
  return gradsq;
}

Autoencoder::Autoencoder(std::int64_t dim, std::vector<std::int64_t> hidden_widths,
                         std::int64_t d_latent, Rng& rng)
    : encoder_(
          [&] {
            MlpConfig config;
            config.widths.push_back(dim);
            for (std::int64_t w : hidden_widths) config.widths.push_back(w);
            config.widths.push_back(d_latent);
            config.hidden = Activation::kSwish;
            config.output = Activation::kIdentity;
            return config;
          }(),
          rng, "enc."),
      decoder_(
          [&] {
            MlpConfig config;
            config.widths.push_back(d_latent);
            for (auto it = hidden_widths.rbegin(); it != hidden_widths.rend(); ++it) {
              config.widths.push_back(*it);
            }
            config.widths.push_back(dim);
            config.hidden = Activation::kSwish;
            config.output = Activation::kIdentity;
            return config;
          }(),
          rng, "dec.") {}

std::vector<Parameter> Autoencoder::all_params() const {
  std::vector<Parameter> all = encoder_.params();
  all.insert(all.end(), decoder_.params().begin(), decoder_.params().end());
  return all;
}

void Autoencoder::set_all_params(const std::vector<Parameter>& params) {
  const std::size_t n_enc = encoder_.params().size();
  if (params.size() != n_enc + decoder_.params().size()) {
    throw make_error("Autoencoder::set_all_params: expected ",
                     n_enc + decoder_.params().size(), " parameters, got ", params.size());
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& dst = k < n_enc ? encoder_.params()[k] : decoder_.params()[k - n_enc];
    if (params[k].name != dst.name || !params[k].value.same_shape(dst.value)) {
      throw make_error("Autoencoder::set_all_params: mismatch at '", dst.name, "'");
    }
    dst.value = params[k].value;
  }
}

AeTrainTrace train_autoencoder(Autoencoder& ae, const Tensor& data, const AeTrainConfig& config) {
  if (data.rows == 0) throw make_error("train_autoencoder: empty data");
  if (data.cols != ae.dim()) {
    throw make_error("train_autoencoder: data has ", data.cols, " columns, expected ", ae.dim());
  }
  const std::int64_t batch = std::min<std::int64_t>(config.batch, data.rows);

  AdamOptimizer optimizer(config.learning_rate);
  Rng shuffle_rng = Rng::substream(config.seed, {0x0ae0});
  std::vector<std::int64_t> order(static_cast<std::size_t>(data.rows));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);

  // Train on the combined parameter list; split gradients by position.
  std::vector<Parameter> params = ae.all_params();
  AeTrainTrace trace;
  trace.mse_per_epoch.reserve(static_cast<std::size_t>(config.epochs));

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::int64_t steps = 0;
    for (std::int64_t start = 0; start + batch <= data.rows; start += batch) {
      std::span<const std::int64_t> idx(order.data() + start, static_cast<std::size_t>(batch));
      Tensor x = take_rows(data, idx);

      ae.set_all_params(params);
      ad::Tape tape;
      BoundMlp enc = ae.encoder().bind(tape);
      BoundMlp dec = ae.decoder().bind(tape);
      ad::Value xv = ad::constant(tape, x);
      ad::Value recon = dec(enc(xv));
      ad::Value loss = ad::mean_all(ad::square(ad::sub(recon, xv)));

      const double loss_value = loss.value().item();
      if (!std::isfinite(loss_value)) {
        throw make_error("train_autoencoder: non-finite loss at epoch ", epoch);
      }
      epoch_loss += loss_value;
      ++steps;

      std::vector<ad::Value> wrt = enc.leaves;
      wrt.insert(wrt.end(), dec.leaves.begin(), dec.leaves.end());
      std::vector<ad::Value> grads = ad::grad(loss, wrt);
      std::vector<Tensor> grad_tensors;
      grad_tensors.reserve(grads.size());
      for (const ad::Value& g : grads) grad_tensors.push_back(g.value());
      optimizer.step(params, grad_tensors);
    }
    if (steps == 0) throw make_error("train_autoencoder: batch larger than data");
    trace.mse_per_epoch.push_back(epoch_loss / static_cast<double>(steps));
  }
  ae.set_all_params(params);
  return trace;
}

}  // namespace dastr

#pragma once

#include <string>
#include <vector>

#include "dastr/autodiff.hpp"
#include "dastr/optimizer.hpp"
#include "dastr/rng.hpp"
#include "dastr/tensor.hpp"

namespace dastr {

enum class Activation {
  kTanh,
  kSquaredTanh,  // tanh(x)^2: smooth, non-negative, used by the high-d committor nets
  kRelu,
  kSwish,  // x * sigmoid(x)
  kSigmoid,
  kIdentity,
};

Activation activation_from_string(const std::string& name);
std::string activation_to_string(Activation activation);

struct MlpConfig {
  // Layer widths including input and output, e.g. {10, 100, 100, 1}.
  std::vector<std::int64_t> widths;
  Activation hidden = Activation::kTanh;
  Activation output = Activation::kIdentity;
  // When set, the final layer's weights and biases start at zero instead of
  // Glorot values.  Coupling-layer subnets use this so a freshly built flow
  // is exactly the identity map.
  bool zero_init_last = false;
};

class Mlp;

// A network bound to a tape for one differentiable evaluation: the parameter
// leaves live on the tape and can be differentiation targets.
struct BoundMlp {
  const Mlp* net = nullptr;
  ad::Tape* tape = nullptr;
  std::vector<ad::Value> leaves;  // same order as Mlp::params()

  ad::Value operator()(ad::Value x) const;
};

class Mlp {
 public:
  // Initializes weights Glorot-uniform (limit sqrt(6/(fan_in+fan_out))) and
  // biases to zero, drawing from `rng` in fixed parameter order.  `prefix`
  // namespaces the parameter names (e.g. "enc.").
  Mlp(MlpConfig config, Rng& rng, std::string prefix = "");

  const MlpConfig& config() const { return config_; }
  std::int64_t input_dim() const { return config_.widths.front(); }
  std::int64_t output_dim() const { return config_.widths.back(); }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  // Fast inference path without a tape.  Bit-identical to the bound path's
  // forward values (same kernels, same order); tests enforce that.
  Tensor forward(const Tensor& x) const;

  BoundMlp bind(ad::Tape& tape) const;

 private:
  MlpConfig config_;
  std::vector<Parameter> params_;  // W0, b0, W1, b1, ...
};

// Committor approximation q_theta: R^d -> (0,1).  An MLP with a sigmoid
// output head; the hidden activation is experiment-specific.
class CommittorNet {
 public:
  CommittorNet(std::int64_t dim, std::vector<std::int64_t> hidden_widths, Activation hidden,
               Rng& rng);

  std::int64_t dim() const { return mlp_.input_dim(); }
  Mlp& mlp() { return mlp_; }
  const Mlp& mlp() const { return mlp_; }
  std::vector<Parameter>& params() { return mlp_.params(); }
  const std::vector<Parameter>& params() const { return mlp_.params(); }

  // Plain committor values for a batch (n,d) -> (n,1).
  Tensor values(const Tensor& x) const;

  struct Bound {
    BoundMlp mlp;
    ad::Value operator()(ad::Value x) const { return mlp(x); }
  };
  Bound bind(ad::Tape& tape) const { return Bound{mlp_.bind(tape)}; }

  // Per-sample squared gradient norms |grad_x q(x_i)|^2, shape (n,1), and
  // optionally the committor values themselves.  Builds a scratch tape
  // internally; the result is plain data.
  Tensor gradient_squared(const Tensor& x, Tensor* values_out = nullptr) const;

 private:
  Mlp mlp_;
};

// Autoencoder used to learn low-dimensional latent representations of
// transition-region samples.  Encoder widths run input -> ... -> d_latent,
// the decoder mirrors them back.  Hidden activations are swish; both heads
// are linear.
class Autoencoder {
 public:
  Autoencoder(std::int64_t dim, std::vector<std::int64_t> hidden_widths, std::int64_t d_latent,
              Rng& rng);

  std::int64_t dim() const { return encoder_.input_dim(); }
  std::int64_t d_latent() const { return encoder_.output_dim(); }

  Mlp& encoder() { return encoder_; }
  const Mlp& encoder() const { return encoder_; }
  Mlp& decoder() { return decoder_; }
  const Mlp& decoder() const { return decoder_; }

  Tensor encode(const Tensor& x) const { return encoder_.forward(x); }
  Tensor decode(const Tensor& z) const { return decoder_.forward(z); }

  // All parameters (encoder then decoder) as one list for training and
  // checkpointing.
  std::vector<Parameter> all_params() const;
  void set_all_params(const std::vector<Parameter>& params);

 private:
  Mlp encoder_;
  Mlp decoder_;
};

// Applies an activation inside a tape graph.
ad::Value apply_activation(ad::Value x, Activation activation);
// Plain counterpart, guaranteed to match apply_activation numerically.
Tensor apply_activation_plain(const Tensor& x, Activation activation);

struct AeTrainConfig {
  std::int64_t epochs = 200;
  std::int64_t batch = 500;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

struct AeTrainTrace {
  std::vector<double> mse_per_epoch;
};

// Trains the autoencoder on reconstruction MSE with Adam; throws if the loss
// goes non-finite.  Returns the per-epoch trace; the final entry is the
// converged training MSE.
AeTrainTrace train_autoencoder(Autoencoder& ae, const Tensor& data, const AeTrainConfig& config);

}  // namespace dastr

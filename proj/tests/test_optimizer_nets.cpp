#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "dastr/nets.hpp"
#include "dastr/optimizer.hpp"
#include "dastr/rng.hpp"
#include "dastr/tensor.hpp"
#include "test_util.hpp"

using namespace dastr;

namespace {

std::vector<Parameter> single_param(double value) {
  Parameter p;
  p.name = "w";
  p.value = Tensor::scalar(value);
  return {p};
}

Tensor random_points(std::int64_t n, std::int64_t d, Rng& rng, double lo, double hi) {
  Tensor x(n, d);
  rng.fill_uniform(x.data, lo, hi);
  return x;
}

// Zeroing the last weight layer and bias makes the pre-sigmoid output
// identically zero regardless of the hidden layers.
void zero_final_layer(CommittorNet& net) {
  std::vector<Parameter>& params = net.params();
  for (std::size_t i = params.size() - 2; i < params.size(); ++i) {
    for (double& v : params[i].value.data) v = 0.0;
  }
}

}  // namespace

TEST_SUITE_BEGIN("optimizer-nets");

TEST_CASE("adam with a constant gradient walks at the analytic rate") {
  // With g = 1 every step, bias-corrected m-hat and v-hat are exactly 1, so
  // every update is lr / (1 + eps).
  const double lr = 0.1;
  AdamOptimizer opt(lr);
  std::vector<Parameter> params = single_param(0.0);
  const std::vector<Tensor> grads = {Tensor::scalar(1.0)};
  for (int k = 0; k < 3; ++k) opt.step(params, grads);
  const double expected = -3.0 * lr / (1.0 + 1e-8);
  CHECK(params[0].value.item() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(opt.step_count() == 3);
}

TEST_CASE("adam moments survive a learning-rate change") {
  AdamOptimizer a(0.1);
  AdamOptimizer b(0.1);
  std::vector<Parameter> pa = single_param(0.5);
  std::vector<Parameter> pb = single_param(0.5);
  const std::vector<Tensor> g1 = {Tensor::scalar(0.3)};
  const std::vector<Tensor> g2 = {Tensor::scalar(-0.7)};
  a.step(pa, g1);
  b.step(pb, g1);
  // Changing the rate between steps must not reset the moment estimates:
  // setting it back to the same value leaves the trajectory untouched.
  b.set_learning_rate(0.02);
  b.set_learning_rate(0.1);
  a.step(pa, g2);
  b.step(pb, g2);
  CHECK(testutil::bitwise_equal(pa[0].value, pb[0].value));
}

TEST_CASE("optimizer state round-trips through checkpoint tensors") {
  Rng rng = Rng::substream(31, {0});
  AdamOptimizer live(3e-3);
  std::vector<Parameter> params;
  for (int i = 0; i < 3; ++i) {
    Parameter p;
    p.name = "p" + std::to_string(i);
    p.value = random_points(2, 2, rng, -1.0, 1.0);
    params.push_back(p);
  }
  auto make_grads = [&rng, &params]() {
    std::vector<Tensor> grads;
    for (const Parameter& p : params) {
      Tensor g(p.value.rows, p.value.cols);
      rng.fill_normal(g.data);
      grads.push_back(g);
    }
    return grads;
  };

  std::vector<std::vector<Tensor>> history;
  for (int k = 0; k < 4; ++k) history.push_back(make_grads());

  std::vector<Parameter> continuous = params;
  for (const auto& g : history) live.step(continuous, g);

  // Replay: run two steps, capture state, rebuild a fresh optimizer from the
  // captured tensors, run the remaining two steps.
  AdamOptimizer first_half(3e-3);
  std::vector<Parameter> staged = params;
  first_half.step(staged, history[0]);
  first_half.step(staged, history[1]);
  const std::vector<Parameter> state = first_half.state_tensors(staged);

  AdamOptimizer second_half(3e-3);
  second_half.load_state(staged, state, first_half.step_count());
  second_half.step(staged, history[2]);
  second_half.step(staged, history[3]);

  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(testutil::bitwise_equal(continuous[i].value, staged[i].value));
  }
}

TEST_CASE("mismatched gradient list throws") {
  AdamOptimizer opt(1e-3);
  std::vector<Parameter> params = single_param(0.0);
  CHECK_THROWS(opt.step(params, std::vector<Tensor>{}));
}

TEST_CASE("committor net outputs stay in the open unit interval") {
  Rng rng = Rng::substream(37, {0});
  CommittorNet net(3, {16, 16}, Activation::kTanh, rng);
  Rng xrng = Rng::substream(37, {1});
  Tensor x = random_points(64, 3, xrng, -50.0, 50.0);
  const Tensor q = net.values(x);
  CHECK(q.rows == 64);
  CHECK(q.cols == 1);
  for (double v : q.data) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("zero final layer pins the committor at one half") {
  Rng rng = Rng::substream(41, {0});
  CommittorNet net(4, {32, 32}, Activation::kSquaredTanh, rng);
  zero_final_layer(net);
  Rng xrng = Rng::substream(41, {1});
  const Tensor x = random_points(32, 4, xrng, -3.0, 3.0);
  const Tensor q = net.values(x);
  for (double v : q.data) CHECK(v == 0.5);
  // And its input gradient vanishes identically.
  const Tensor g2 = net.gradient_squared(x);
  for (double v : g2.data) CHECK(v == 0.0);
}

TEST_CASE("hundred-neuron architecture has the expected parameter list") {
  Rng rng = Rng::substream(43, {0});
  CommittorNet net(10, {100, 100, 100}, Activation::kSquaredTanh, rng);
  CHECK(net.dim() == 10);
  const std::vector<Parameter>& params = net.params();
  // Four weight layers and four biases: 10->100->100->100->1.
  REQUIRE(params.size() == 8);
  CHECK(params[0].value.rows == 10);
  CHECK(params[0].value.cols == 100);
  CHECK(params[6].value.rows == 100);
  CHECK(params[6].value.cols == 1);
  Rng xrng = Rng::substream(43, {1});
  const Tensor x = random_points(5, 10, xrng, -2.0, 2.0);
  CHECK(net.values(x).rows == 5);
}

TEST_CASE("plain forward matches the bound tape forward bitwise") {
  Rng rng = Rng::substream(47, {0});
  CommittorNet net(2, {24}, Activation::kTanh, rng);
  Rng xrng = Rng::substream(47, {1});
  const Tensor x = random_points(17, 2, xrng, -2.0, 2.0);
  const Tensor plain = net.values(x);
  ad::Tape tape;
  const CommittorNet::Bound bound = net.bind(tape);
  const Tensor taped = bound(ad::constant(tape, x)).value();
  CHECK(testutil::bitwise_equal(plain, taped));
}

TEST_CASE("one-dimensional sigmoid committor has the closed-form gradient") {
  Rng rng = Rng::substream(53, {0});
  // No hidden layers: q(x) = sigmoid(w x + b).
  CommittorNet net(1, {}, Activation::kTanh, rng);
  REQUIRE(net.params().size() == 2);
  const double w = net.params()[0].value.item();
  const double b = net.params()[1].value.item();
  Tensor x(5, 1);
  x.data = {-1.0, -0.25, 0.0, 0.6, 2.0};
  Tensor q;
  const Tensor g2 = net.gradient_squared(x, &q);
  for (std::int64_t i = 0; i < 5; ++i) {
    const std::size_t k = static_cast<std::size_t>(i);
    const double qi = 1.0 / (1.0 + std::exp(-(w * x.data[k] + b)));
    CHECK(q.data[k] == doctest::Approx(qi).epsilon(1e-12));
    const double dq = qi * (1.0 - qi) * w;
    CHECK(g2.data[k] == doctest::Approx(dq * dq).epsilon(1e-10));
  }
}

TEST_CASE("gradient_squared matches finite differences on a generic net") {
  Rng rng = Rng::substream(59, {0});
  CommittorNet net(3, {12, 12}, Activation::kTanh, rng);
  Rng xrng = Rng::substream(59, {1});
  const Tensor x = random_points(6, 3, xrng, -1.5, 1.5);
  const Tensor g2 = net.gradient_squared(x);
  for (std::int64_t i = 0; i < x.rows; ++i) {
    double sum = 0.0;
    for (std::int64_t j = 0; j < x.cols; ++j) {
      Tensor xp = x;
      Tensor xm = x;
      const std::size_t k = static_cast<std::size_t>(i * x.cols + j);
      xp.data[k] += 1e-6;
      xm.data[k] -= 1e-6;
      const double up = net.values(xp).data[static_cast<std::size_t>(i)];
      const double down = net.values(xm).data[static_cast<std::size_t>(i)];
      const double d = (up - down) / 2e-6;
      sum += d * d;
    }
    CHECK(g2.data[static_cast<std::size_t>(i)] == doctest::Approx(sum).epsilon(1e-5));
  }
}

TEST_CASE("swish activation equals x times sigmoid of x") {
  Tensor x(1, 7);
  x.data = {-3.0, -1.0, -0.1, 0.0, 0.1, 1.0, 3.0};
  const Tensor y = apply_activation_plain(x, Activation::kSwish);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double expected = x.data[i] / (1.0 + std::exp(-x.data[i]));
    CHECK(y.data[i] == doctest::Approx(expected).epsilon(1e-14));
  }
  // Tape and plain activation paths agree bitwise.
  ad::Tape tape;
  const Tensor taped = ad::swish(ad::constant(tape, x)).value();
  CHECK(testutil::bitwise_equal(y, taped));
}

TEST_CASE("activation names round trip and unknown names throw") {
  for (const char* name : {"tanh", "tanh2", "relu", "swish", "sigmoid", "identity"}) {
    CHECK(activation_to_string(activation_from_string(name)) == name);
  }
  CHECK_THROWS(activation_from_string("gelu"));
}

TEST_CASE("autoencoder shapes and parameter round trip") {
  Rng rng = Rng::substream(61, {0});
  Autoencoder ae(10, {32, 16}, 3, rng);
  CHECK(ae.dim() == 10);
  CHECK(ae.d_latent() == 3);
  Rng xrng = Rng::substream(61, {1});
  const Tensor x = random_points(8, 10, xrng, -1.0, 1.0);
  const Tensor z = ae.encode(x);
  CHECK(z.rows == 8);
  CHECK(z.cols == 3);
  const Tensor back = ae.decode(z);
  CHECK(back.rows == 8);
  CHECK(back.cols == 10);

  const std::vector<Parameter> saved = ae.all_params();
  Rng rng2 = Rng::substream(62, {0});
  Autoencoder other(10, {32, 16}, 3, rng2);
  other.set_all_params(saved);
  CHECK(testutil::bitwise_equal(other.encode(x), z));
}

TEST_CASE("linear autoencoder learns the identity when latent dim matches") {
  Rng rng = Rng::substream(67, {0});
  // No hidden layers and d_latent == dim: encoder and decoder are single
  // linear maps, so exact reconstruction is achievable.
  Autoencoder ae(3, {}, 3, rng);
  Rng xrng = Rng::substream(67, {1});
  const Tensor data = random_points(256, 3, xrng, -1.0, 1.0);
  AeTrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch = 256;
  cfg.learning_rate = 3e-2;
  cfg.seed = 5;
  const AeTrainTrace trace = train_autoencoder(ae, data, cfg);
  CHECK(trace.mse_per_epoch.back() < 1e-3);
}

TEST_CASE("autoencoder recovers a planted two-dimensional subspace in R^10") {
  Rng rng = Rng::substream(71, {0});
  Rng basis_rng = Rng::substream(71, {1});
  // Data x = U z with a fixed random 10x2 basis and latent z uniform.
  Tensor basis(2, 10);
  basis_rng.fill_normal(basis.data);
  Rng zrng = Rng::substream(71, {2});
  Tensor z = random_points(512, 2, zrng, -1.0, 1.0);
  const Tensor data = matmul(z, basis);

  Autoencoder ae(10, {32}, 2, rng);
  AeTrainConfig cfg;
  cfg.epochs = 600;
  cfg.batch = 256;
  cfg.learning_rate = 1e-2;
  cfg.seed = 9;
  const AeTrainTrace trace = train_autoencoder(ae, data, cfg);
  CHECK(trace.mse_per_epoch.back() < 1e-3);

  // Window-10 smoothed MSE decreases overall and never regresses by more
  // than a small factor step to step.
  const std::vector<double>& mse = trace.mse_per_epoch;
  std::vector<double> smoothed;
  for (std::size_t i = 0; i + 10 <= mse.size(); i += 10) {
    double s = 0.0;
    for (std::size_t j = i; j < i + 10; ++j) s += mse[j];
    smoothed.push_back(s / 10.0);
  }
  REQUIRE(smoothed.size() >= 5);
  CHECK(smoothed.back() < 0.5 * smoothed.front());
  for (std::size_t i = 1; i < smoothed.size(); ++i) {
    CHECK(smoothed[i] < smoothed[i - 1] * 1.10);
  }
}

TEST_SUITE_END();

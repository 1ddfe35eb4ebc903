#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "doctest.h"
#include "dastr/autodiff.hpp"
#include "dastr/rng.hpp"
#include "dastr/tensor.hpp"
#include "test_util.hpp"

using namespace dastr;

namespace {

Tensor random_tensor(std::int64_t r, std::int64_t c, Rng& rng, double lo, double hi) {
  Tensor t(r, c);
  rng.fill_uniform(t.data, lo, hi);
  return t;
}

// Analytic gradient of L(x) = sum(op(x) * W) with respect to x, where the
// builder constructs op(x) on a fresh tape.
Tensor analytic_gradient(const std::function<ad::Value(ad::Tape&, ad::Value)>& build,
                         const Tensor& x, const Tensor& weight) {
  ad::Tape tape;
  const ad::Value xv = ad::leaf(tape, x);
  const ad::Value y = build(tape, xv);
  const ad::Value loss = ad::sum_all(ad::mul(y, ad::constant(tape, weight)));
  const std::vector<ad::Value> g = ad::grad(loss, std::vector<ad::Value>{xv});
  return g.at(0).value();
}

double loss_value(const std::function<ad::Value(ad::Tape&, ad::Value)>& build, const Tensor& x,
                  const Tensor& weight) {
  ad::Tape tape;
  const ad::Value xv = ad::leaf(tape, x);
  const ad::Value y = build(tape, xv);
  return ad::sum_all(ad::mul(y, ad::constant(tape, weight))).value().item();
}

// Checks d/dx sum(op(x) * W) against central finite differences.
void check_op_gradient(const char* name,
                       const std::function<ad::Value(ad::Tape&, ad::Value)>& build,
                       const Tensor& x, double tol = 1e-6) {
  CAPTURE(name);
  Rng rng = Rng::substream(99, {static_cast<std::uint64_t>(x.data.size())});
  ad::Tape probe;
  const ad::Value shape = build(probe, ad::leaf(probe, x));
  const Tensor weight = random_tensor(shape.rows(), shape.cols(), rng, 0.5, 1.5);

  const Tensor analytic = analytic_gradient(build, x, weight);
  const Tensor numeric = testutil::fd_gradient(
      [&](const Tensor& xt) { return loss_value(build, xt, weight); }, x, 1e-5);
  for (std::size_t i = 0; i < analytic.data.size(); ++i) {
    const double scale = std::max({std::abs(analytic.data[i]), std::abs(numeric.data[i]), 1.0});
    CHECK(std::abs(analytic.data[i] - numeric.data[i]) / scale < tol);
  }
}

}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("elementwise add and identity matmul forward values") {
  ad::Tape tape;
  Tensor a(1, 2);
  a.data = {1, 2};
  Tensor b(1, 2);
  b.data = {3, 4};
  const ad::Value sum = ad::add(ad::constant(tape, a), ad::constant(tape, b));
  CHECK(sum.value().data == std::vector<double>({4, 6}));

  Tensor eye(3, 3);
  eye.data = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  Tensor v(3, 1);
  v.data = {5, -6, 7};
  const ad::Value mv = ad::matmul(ad::constant(tape, eye), ad::constant(tape, v));
  CHECK(mv.value().data == v.data);

  const ad::Value t0 = ad::tanh(ad::constant(tape, Tensor::scalar(0.0)));
  CHECK(t0.value().item() == 0.0);
}

TEST_CASE("gradient of x^2 at 3 is 6") {
  ad::Tape tape;
  const ad::Value x = ad::leaf(tape, Tensor::scalar(3.0));
  const ad::Value y = ad::square(x);
  const std::vector<ad::Value> g = ad::grad(y, std::vector<ad::Value>{x});
  CHECK(g.at(0).value().item() == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("nested gradient of x^3 at 2 is 12") {
  ad::Tape tape;
  const ad::Value x = ad::leaf(tape, Tensor::scalar(2.0));
  const ad::Value y = ad::pow_const(x, 3.0);
  const std::vector<ad::Value> first = ad::grad(y, std::vector<ad::Value>{x});
  const std::vector<ad::Value> second = ad::grad(first.at(0), std::vector<ad::Value>{x});
  CHECK(second.at(0).value().item() == doctest::Approx(12.0).epsilon(1e-12));
}

TEST_CASE("mixed second derivative of theta*tanh(x) is sech^2(x)") {
  // d/dtheta [ d/dx theta*tanh(x) ] = 1 - tanh(x)^2, independent of theta.
  for (const double xval : {-1.7, -0.3, 0.0, 0.9, 2.4}) {
    ad::Tape tape;
    const ad::Value theta = ad::leaf(tape, Tensor::scalar(0.8));
    const ad::Value x = ad::leaf(tape, Tensor::scalar(xval));
    const ad::Value f = ad::mul(theta, ad::tanh(x));
    const std::vector<ad::Value> dfdx = ad::grad(f, std::vector<ad::Value>{x});
    const std::vector<ad::Value> mixed = ad::grad(dfdx.at(0), std::vector<ad::Value>{theta});
    const double sech2 = 1.0 - std::tanh(xval) * std::tanh(xval);
    CHECK(mixed.at(0).value().item() == doctest::Approx(sech2).epsilon(1e-10));
  }
}

TEST_CASE("gradients are linear in the output") {
  Rng rng = Rng::substream(3, {0});
  const Tensor x0 = random_tensor(2, 3, rng, -1.5, 1.5);
  const double a = 1.7;
  const double b = -0.6;

  ad::Tape tape;
  const ad::Value x = ad::leaf(tape, x0);
  const ad::Value f = ad::sum_all(ad::square(x));
  const ad::Value g = ad::sum_all(ad::tanh(x));
  const ad::Value combo = ad::add(ad::scale(f, a), ad::scale(g, b));
  const Tensor grad_combo = ad::grad(combo, std::vector<ad::Value>{x}).at(0).value();
  const Tensor grad_f = ad::grad(f, std::vector<ad::Value>{x}).at(0).value();
  const Tensor grad_g = ad::grad(g, std::vector<ad::Value>{x}).at(0).value();
  for (std::size_t i = 0; i < grad_combo.data.size(); ++i) {
    CHECK(grad_combo.data[i] ==
          doctest::Approx(a * grad_f.data[i] + b * grad_g.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("finite-difference suite over every primitive") {
  Rng rng = Rng::substream(17, {0});
  const Tensor x = random_tensor(3, 2, rng, -1.8, 1.8);
  Tensor xpos = x;
  for (double& v : xpos.data) v = std::abs(v) + 0.5;
  Tensor xoff = x;  // kept away from the relu kink
  for (double& v : xoff.data) v = (v >= 0.0 ? v + 0.3 : v - 0.3);

  check_op_gradient("neg", [](ad::Tape&, ad::Value v) { return ad::neg(v); }, x);
  check_op_gradient("exp", [](ad::Tape&, ad::Value v) { return ad::exp(v); }, x);
  check_op_gradient("log", [](ad::Tape&, ad::Value v) { return ad::log(v); }, xpos);
  check_op_gradient("tanh", [](ad::Tape&, ad::Value v) { return ad::tanh(v); }, x);
  check_op_gradient("sigmoid", [](ad::Tape&, ad::Value v) { return ad::sigmoid(v); }, x);
  check_op_gradient("relu", [](ad::Tape&, ad::Value v) { return ad::relu(v); }, xoff);
  check_op_gradient("square", [](ad::Tape&, ad::Value v) { return ad::square(v); }, x);
  check_op_gradient("sqrt", [](ad::Tape&, ad::Value v) { return ad::sqrt(v); }, xpos);
  check_op_gradient("pow2.7", [](ad::Tape&, ad::Value v) { return ad::pow_const(v, 2.7); },
                    xpos);
  check_op_gradient("pow-1.3", [](ad::Tape&, ad::Value v) { return ad::pow_const(v, -1.3); },
                    xpos);
  check_op_gradient("scale", [](ad::Tape&, ad::Value v) { return ad::scale(v, -2.25); }, x);
  check_op_gradient("shift", [](ad::Tape&, ad::Value v) { return ad::shift(v, 0.75); }, x);
  check_op_gradient("transpose", [](ad::Tape&, ad::Value v) { return ad::transpose(v); }, x);
  check_op_gradient("sum_all", [](ad::Tape&, ad::Value v) { return ad::sum_all(v); }, x);
  check_op_gradient("sum_rows", [](ad::Tape&, ad::Value v) { return ad::sum_rows(v); }, x);
  check_op_gradient("sum_cols", [](ad::Tape&, ad::Value v) { return ad::sum_cols(v); }, x);
  check_op_gradient("mean_all", [](ad::Tape&, ad::Value v) { return ad::mean_all(v); }, x);
  check_op_gradient("swish", [](ad::Tape&, ad::Value v) { return ad::swish(v); }, x);

  const std::vector<std::int64_t> pick = {1};
  check_op_gradient(
      "select_cols",
      [&pick](ad::Tape&, ad::Value v) { return ad::select_cols(v, pick); }, x);
  check_op_gradient(
      "scatter_cols",
      [&pick](ad::Tape&, ad::Value v) {
        return ad::scatter_cols(ad::select_cols(v, pick), pick, 2);
      },
      x);

  // Binary ops: perturb each operand in turn while the other stays fixed.
  Rng rng2 = Rng::substream(18, {0});
  const Tensor y = random_tensor(3, 2, rng2, 0.6, 2.1);
  check_op_gradient(
      "add-lhs", [&y](ad::Tape& t, ad::Value v) { return ad::add(v, ad::constant(t, y)); }, x);
  check_op_gradient(
      "sub-lhs", [&y](ad::Tape& t, ad::Value v) { return ad::sub(v, ad::constant(t, y)); }, x);
  check_op_gradient(
      "mul-lhs", [&y](ad::Tape& t, ad::Value v) { return ad::mul(v, ad::constant(t, y)); }, x);
  check_op_gradient(
      "div-lhs", [&y](ad::Tape& t, ad::Value v) { return ad::div(v, ad::constant(t, y)); }, x);
  check_op_gradient(
      "div-rhs", [&x](ad::Tape& t, ad::Value v) { return ad::div(ad::constant(t, x), v); },
      xpos);

  // Broadcast gradient: (3,2) + (1,2) reduces the adjoint over rows.
  Rng rng3 = Rng::substream(19, {0});
  const Tensor row = random_tensor(1, 2, rng3, -1.0, 1.0);
  check_op_gradient(
      "add-broadcast-row",
      [&x](ad::Tape& t, ad::Value v) { return ad::add(ad::constant(t, x), v); }, row);
  check_op_gradient(
      "mul-broadcast-row",
      [&x](ad::Tape& t, ad::Value v) { return ad::mul(ad::constant(t, x), v); }, row);

  const Tensor m = random_tensor(3, 2, rng3, -1.0, 1.0);
  const Tensor n = random_tensor(2, 4, rng3, -1.0, 1.0);
  check_op_gradient(
      "matmul-lhs", [&n](ad::Tape& t, ad::Value v) { return ad::matmul(v, ad::constant(t, n)); },
      m);
  check_op_gradient(
      "matmul-rhs", [&m](ad::Tape& t, ad::Value v) { return ad::matmul(ad::constant(t, m), v); },
      n);
}

TEST_CASE("input_gradient of a sigmoid unit matches the closed form") {
  // q(x) = sigmoid(w*x + b) in one dimension: dq/dx = q(1-q)w.
  const double w = 1.9;
  const double b = -0.4;
  Tensor x(4, 1);
  x.data = {-2.0, -0.5, 0.3, 1.4};

  ad::Tape tape;
  const ad::Value xv = ad::leaf(tape, x);
  const ad::Value wv = ad::constant(tape, Tensor::scalar(w));
  const ad::Value q = ad::sigmoid(ad::shift(ad::mul(xv, wv), b));
  const Tensor dq = ad::input_gradient(q, xv).value();
  CHECK(dq.rows == 4);
  CHECK(dq.cols == 1);
  for (std::int64_t i = 0; i < 4; ++i) {
    const double qi = 1.0 / (1.0 + std::exp(-(w * x.data[static_cast<std::size_t>(i)] + b)));
    CHECK(dq.data[static_cast<std::size_t>(i)] ==
          doctest::Approx(qi * (1.0 - qi) * w).epsilon(1e-12));
  }
}

TEST_CASE("input_gradient rows are per-sample gradients") {
  // For a row-wise map, the i-th row of input_gradient only sees sample i.
  Rng rng = Rng::substream(23, {0});
  const Tensor x = random_tensor(5, 3, rng, -1.0, 1.0);
  ad::Tape tape;
  const ad::Value xv = ad::leaf(tape, x);
  const ad::Value y = ad::sum_cols(ad::square(xv));  // y_i = sum_j x_ij^2
  const Tensor g = ad::input_gradient(y, xv).value();
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    CHECK(g.data[i] == doctest::Approx(2.0 * x.data[i]).epsilon(1e-13));
  }
}

TEST_CASE("stop_gradient blocks the backward pass") {
  ad::Tape tape;
  const ad::Value x = ad::leaf(tape, Tensor::scalar(1.3));
  const ad::Value blocked = ad::sum_all(ad::square(ad::stop_gradient(x)));
  const Tensor g = ad::grad(blocked, std::vector<ad::Value>{x}).at(0).value();
  CHECK(g.item() == 0.0);
}

TEST_CASE("unreachable targets get zero gradients") {
  ad::Tape tape;
  const ad::Value x = ad::leaf(tape, Tensor::scalar(2.0));
  const ad::Value unused = ad::leaf(tape, Tensor::full(2, 2, 1.0));
  const ad::Value y = ad::square(x);
  const std::vector<ad::Value> g = ad::grad(y, std::vector<ad::Value>{unused});
  CHECK(g.at(0).rows() == 2);
  CHECK(g.at(0).cols() == 2);
  for (double v : g.at(0).value().data) CHECK(v == 0.0);
}

TEST_CASE("grad rejects non-scalar outputs and mixed tapes") {
  ad::Tape tape;
  const ad::Value x = ad::leaf(tape, Tensor::full(2, 2, 1.0));
  CHECK_THROWS(ad::grad(x, std::vector<ad::Value>{x}));

  ad::Tape other;
  const ad::Value y = ad::leaf(other, Tensor::scalar(1.0));
  const ad::Value out = ad::sum_all(ad::square(x));
  CHECK_THROWS(ad::grad(out, std::vector<ad::Value>{y}));
}

TEST_CASE("forward values are deterministic across rebuilds") {
  Rng rng = Rng::substream(29, {0});
  const Tensor x = random_tensor(4, 4, rng, -2.0, 2.0);
  auto run = [&x]() {
    ad::Tape tape;
    const ad::Value v = ad::leaf(tape, x);
    return ad::sum_all(ad::mul(ad::tanh(v), ad::exp(ad::scale(v, 0.5)))).value().item();
  };
  const double first = run();
  const double second = run();
  CHECK(std::memcmp(&first, &second, sizeof(double)) == 0);
}

TEST_SUITE_END();

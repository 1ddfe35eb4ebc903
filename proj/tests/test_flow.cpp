#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "dastr/flow.hpp"
#include "dastr/optimizer.hpp"
#include "dastr/potentials.hpp"
#include "dastr/rng.hpp"
#include "dastr/tensor.hpp"
#include "test_util.hpp"

using namespace dastr;

namespace {

FlowConfig small_config(std::int64_t dim, const Box& box) {
  FlowConfig cfg;
  cfg.dim = dim;
  cfg.blocks = 2;
  cfg.layers_per_block = 2;
  cfg.hidden = 16;
  cfg.s_max = 5.0;
  cfg.box = box;
  return cfg;
}

// Gaussian bump centered inside the box; gentle enough for stable CE fits.
std::vector<double> bump_target(const Tensor& x) {
  std::vector<double> out(static_cast<std::size_t>(x.rows));
  for (std::int64_t i = 0; i < x.rows; ++i) {
    const std::span<const double> row = x.row(i);
    const double dx = row[0] - 0.2;
    const double dy = row[1] + 0.1;
    out[static_cast<std::size_t>(i)] = std::exp(-(dx * dx + dy * dy) / (2.0 * 0.3 * 0.3));
  }
  return out;
}

// Closed-form log-density of a fresh flow (identity couplings): the standard
// Gaussian prior pushed through the per-coordinate inverse-logit onto the box.
double fresh_log_density(const Box& box, std::span<const double> x) {
  double logp = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double width = box.hi[j] - box.lo[j];
    const double u = (x[j] - box.lo[j]) / width;
    const double z = std::log(u / (1.0 - u));
    logp += -0.5 * z * z - 0.5 * std::log(2.0 * 3.14159265358979323846);
    logp += -std::log(u * (1.0 - u)) - std::log(width);  // |dz/dx|
  }
  return logp;
}

FlowModel trained_bump_flow(const Box& box, CeTrainTrace* trace_out = nullptr) {
  Rng rng = Rng::substream(211, {0});
  FlowModel model(small_config(2, box), rng);
  AdamOptimizer opt(1e-2);
  CeTrainConfig cfg;
  cfg.epochs = 60;
  cfg.batch = 1024;
  cfg.chunk = 512;
  Rng train_rng = Rng::substream(211, {1});
  CeTrainTrace trace = train_flow_ce(model, bump_target, cfg, opt, train_rng);
  if (trace_out != nullptr) *trace_out = trace;
  return model;
}

}  // namespace

TEST_SUITE_BEGIN("flow");

TEST_CASE("fresh flow matches the logit-normal closed form") {
  const Box box = Box::cube(2, -1.0, 1.0);
  Rng rng = Rng::substream(199, {0});
  const FlowModel model(small_config(2, box), rng);
  CHECK(model.layer_count() == 4);

  // At the box center the closed form collapses to -log(2 pi) + 2 log 2.
  Tensor center(1, 2);
  center.data = {0.0, 0.0};
  const std::vector<double> lp = model.log_density(center);
  const double expected_center = -std::log(2.0 * 3.14159265358979323846) + 2.0 * std::log(2.0);
  CHECK(lp[0] == doctest::Approx(expected_center).epsilon(1e-12));

  // Off-center points against the full formula.
  Tensor pts(3, 2);
  pts.data = {-0.5, 0.4, 0.3, -0.9, 0.0, 0.7};
  const std::vector<double> lps = model.log_density(pts);
  for (std::int64_t i = 0; i < pts.rows; ++i) {
    CHECK(lps[static_cast<std::size_t>(i)] ==
          doctest::Approx(fresh_log_density(box, pts.row(i))).epsilon(1e-12));
  }

  // forward returns the latent codes and log|det dz/dx| consistent with the
  // density decomposition log p(x) = log N(z) + log|det|.
  Tensor z;
  Tensor log_det;
  model.forward(pts, &z, &log_det);
  REQUIRE(z.rows == 3);
  REQUIRE(log_det.rows == 3);
  for (std::int64_t i = 0; i < 3; ++i) {
    double prior = 0.0;
    for (std::int64_t j = 0; j < 2; ++j) {
      const double zj = z.row(i)[static_cast<std::size_t>(j)];
      prior += -0.5 * zj * zj - 0.5 * std::log(2.0 * 3.14159265358979323846);
    }
    CHECK(prior + log_det.data[static_cast<std::size_t>(i)] ==
          doctest::Approx(lps[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("fresh flow integrates to one over the box") {
  const Box box = Box::cube(2, -1.0, 1.0);
  Rng rng = Rng::substream(199, {1});
  const FlowModel model(small_config(2, box), rng);
  const double volume = 4.0;

  Rng mc = Rng::substream(199, {2});
  double total = 0.0;
  const std::int64_t chunks = 4;
  const std::int64_t per_chunk = 250000;
  for (std::int64_t c = 0; c < chunks; ++c) {
    Tensor pts(per_chunk, 2);
    mc.fill_uniform(pts.data, -1.0 + 1e-9, 1.0 - 1e-9);
    const std::vector<double> lp = model.log_density(pts);
    for (double v : lp) total += std::exp(v);
  }
  const double integral = volume * total / static_cast<double>(chunks * per_chunk);
  CHECK(std::abs(integral - 1.0) < 0.01);
}

TEST_CASE("trained flow learns, stays normalized, and inverts") {
  const Box box = Box::cube(2, -1.0, 1.0);
  CeTrainTrace trace;
  const FlowModel model = trained_bump_flow(box, &trace);

  // Cross-entropy decreased during training.
  REQUIRE(trace.ce_per_epoch.size() == 60);
  CHECK(trace.ce_per_epoch.back() < trace.ce_per_epoch.front() - 0.2);
  CHECK(trace.rejected == 0);

  // Fixed-evaluation-set cross-entropy against the target, fresh vs trained.
  Rng eval_rng = Rng::substream(211, {5});
  Tensor eval_pts(20000, 2);
  eval_rng.fill_uniform(eval_pts.data, -1.0 + 1e-9, 1.0 - 1e-9);
  const std::vector<double> target = bump_target(eval_pts);
  double wsum = 0.0;
  for (double t : target) wsum += t;
  Rng rng_fresh = Rng::substream(211, {0});
  const FlowModel fresh(small_config(2, box), rng_fresh);
  auto fixed_ce = [&](const FlowModel& m) {
    const std::vector<double> lp = m.log_density(eval_pts);
    double ce = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) ce -= target[i] / wsum * lp[i];
    return ce;
  };
  CHECK(fixed_ce(model) < fixed_ce(fresh) - 0.2);

  // Monte Carlo normalization of the trained density.
  Rng mc = Rng::substream(211, {6});
  double total = 0.0;
  const std::int64_t chunks = 4;
  const std::int64_t per_chunk = 250000;
  for (std::int64_t c = 0; c < chunks; ++c) {
    Tensor pts(per_chunk, 2);
    mc.fill_uniform(pts.data, -1.0 + 1e-9, 1.0 - 1e-9);
    const std::vector<double> lp = model.log_density(pts);
    for (double v : lp) total += std::exp(v);
  }
  const double integral = 4.0 * total / static_cast<double>(chunks * per_chunk);
  CHECK(std::abs(integral - 1.0) < 0.01);

  // Round trip x -> z -> x on model draws.
  Rng draw = Rng::substream(211, {7});
  const Tensor xs = model.sample(2000, draw);
  Tensor z;
  Tensor log_det;
  model.forward(xs, &z, &log_det);
  const Tensor back = model.inverse(z);
  CHECK(testutil::max_abs_diff(xs, back) < 1e-8);

  // Fresh flows invert essentially exactly.
  Rng draw2 = Rng::substream(211, {8});
  const Tensor xs2 = fresh.sample(2000, draw2);
  Tensor z2;
  Tensor ld2;
  fresh.forward(xs2, &z2, &ld2);
  CHECK(testutil::max_abs_diff(xs2, fresh.inverse(z2)) < 1e-10);
}

TEST_CASE("log-determinant agrees with a numerical Jacobian") {
  const Box box = Box::cube(2, -1.0, 1.0);
  const FlowModel model = trained_bump_flow(box);

  Rng draw = Rng::substream(223, {0});
  const Tensor pool = model.sample(200, draw);
  const double h = 1e-6;
  std::int64_t checked = 0;
  for (std::int64_t i = 0; i < pool.rows && checked < 20; ++i) {
    if (!box.strictly_inside(pool.row(i), 1e-3)) continue;
    ++checked;
    Tensor base(1, 2);
    base.data = {pool.row(i)[0], pool.row(i)[1]};

    double jac[2][2];
    for (std::int64_t j = 0; j < 2; ++j) {
      Tensor plus = base;
      Tensor minus = base;
      plus.data[static_cast<std::size_t>(j)] += h;
      minus.data[static_cast<std::size_t>(j)] -= h;
      Tensor zp, zm, ldp, ldm;
      model.forward(plus, &zp, &ldp);
      model.forward(minus, &zm, &ldm);
      jac[0][j] = (zp.data[0] - zm.data[0]) / (2.0 * h);
      jac[1][j] = (zp.data[1] - zm.data[1]) / (2.0 * h);
    }
    const double det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    REQUIRE(std::abs(det) > 0.0);
    Tensor z, log_det;
    model.forward(base, &z, &log_det);
    const double rel = std::abs(std::log(std::abs(det)) - log_det.data[0]) /
                       std::max(1.0, std::abs(log_det.data[0]));
    CHECK(rel < 1e-5);
  }
  CHECK(checked == 20);
}

TEST_CASE("sampling stays in the box, is deterministic, and centers fresh mass") {
  const Box box = Box::cube(2, -1.0, 1.0);
  Rng rng = Rng::substream(227, {0});
  const FlowModel model(small_config(2, box), rng);

  Rng d1 = Rng::substream(227, {1});
  Rng d2 = Rng::substream(227, {1});
  const Tensor a = model.sample(100000, d1);
  const Tensor b = model.sample(100000, d2);
  CHECK(testutil::bitwise_equal(a, b));

  double mean0 = 0.0;
  double mean1 = 0.0;
  for (std::int64_t i = 0; i < a.rows; ++i) {
    CHECK(box.strictly_inside(a.row(i)));
    mean0 += a.row(i)[0];
    mean1 += a.row(i)[1];
  }
  mean0 /= static_cast<double>(a.rows);
  mean1 /= static_cast<double>(a.rows);
  // The fresh flow pushes a symmetric prior through a symmetric bijection.
  CHECK(std::abs(mean0) < 0.01);
  CHECK(std::abs(mean1) < 0.01);
}

TEST_CASE("rejection sampler honors the metastable sets or reports failure") {
  const Box box = Box::cube(2, -2.0, 2.0);
  Rng rng = Rng::substream(229, {0});
  const FlowModel model(small_config(2, box), rng);

  const BrownianAnnulus annulus(2, 1.0, 2.0);
  Rng draw = Rng::substream(229, {1});
  std::int64_t total_draws = 0;
  const Tensor pts = model.sample_outside_ab(500, annulus, draw, 100, &total_draws);
  CHECK(pts.rows == 500);
  CHECK(total_draws >= 500);
  for (std::int64_t i = 0; i < pts.rows; ++i) {
    CHECK(!annulus.in_a(pts.row(i)));
    CHECK(!annulus.in_b(pts.row(i)));
    CHECK(box.strictly_inside(pts.row(i)));
  }

  // A sliver of admissible volume with a single pass cannot supply the draws.
  const BrownianAnnulus thin(2, 1.995, 2.0);
  Rng draw2 = Rng::substream(229, {2});
  CHECK_THROWS_WITH_AS(model.sample_outside_ab(1000, thin, draw2, 1),
                       doctest::Contains("sample_outside_ab"), std::runtime_error);
}

TEST_CASE("density evaluation requires points strictly inside the box") {
  const Box box = Box::cube(2, -1.0, 1.0);
  Rng rng = Rng::substream(233, {0});
  const FlowModel model(small_config(2, box), rng);

  Tensor outside(1, 2);
  outside.data = {1.5, 0.0};
  CHECK_THROWS(model.log_density(outside));
  Tensor on_edge(1, 2);
  on_edge.data = {1.0, 0.0};
  CHECK_THROWS(model.log_density(on_edge));
  Tensor bad_cols(1, 3);
  bad_cols.data = {0.0, 0.0, 0.0};
  CHECK_THROWS(model.log_density(bad_cols));
}

TEST_CASE("configuration errors are rejected") {
  Rng rng = Rng::substream(239, {0});
  FlowConfig mismatched = small_config(3, Box::cube(2, -1.0, 1.0));
  CHECK_THROWS(FlowModel(mismatched, rng));
  FlowConfig one_d = small_config(1, Box::cube(1, -1.0, 1.0));
  CHECK_THROWS(FlowModel(one_d, rng));
}

TEST_CASE("parameter transfer and bound density agree with the plain path") {
  const Box box = Box::cube(2, -1.0, 1.0);
  const FlowModel trained = trained_bump_flow(box);

  Rng rng2 = Rng::substream(241, {0});
  FlowModel clone(small_config(2, box), rng2);
  clone.set_all_params(trained.all_params());

  Rng draw = Rng::substream(241, {1});
  const Tensor pts = trained.sample(256, draw);
  const std::vector<double> lp_a = trained.log_density(pts);
  const std::vector<double> lp_b = clone.log_density(pts);
  REQUIRE(lp_a.size() == lp_b.size());
  for (std::size_t i = 0; i < lp_a.size(); ++i) CHECK(lp_a[i] == lp_b[i]);

  // The differentiable bound path computes the same values.
  ad::Tape tape;
  FlowModel::Bound bound = trained.bind(tape);
  const ad::Value lp_bound = bound.log_density(ad::constant(tape, pts));
  REQUIRE(lp_bound.value().rows == 256);
  for (std::int64_t i = 0; i < 256; ++i) {
    const double rel = std::abs(lp_bound.value().data[static_cast<std::size_t>(i)] -
                                lp_a[static_cast<std::size_t>(i)]) /
                       std::max(1.0, std::abs(lp_a[static_cast<std::size_t>(i)]));
    CHECK(rel < 1e-12);
  }

  // Transferring mismatched shapes is an error.
  Rng rng3 = Rng::substream(241, {2});
  FlowModel bigger(small_config(3, Box::cube(3, -1.0, 1.0)), rng3);
  CHECK_THROWS(bigger.set_all_params(trained.all_params()));
}

TEST_CASE("training is invariant to the target's scale") {
  const Box box = Box::cube(2, -1.0, 1.0);
  auto scaled_target = [](double factor) {
    return [factor](const Tensor& x) {
      std::vector<double> v = bump_target(x);
      for (double& t : v) t *= factor;
      return v;
    };
  };

  auto train_self = [&](double factor) {
    Rng rng = Rng::substream(251, {0});
    FlowModel model(small_config(2, box), rng);
    AdamOptimizer opt(1e-2);
    CeTrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch = 256;
    Rng train_rng = Rng::substream(251, {1});
    train_flow_ce(model, scaled_target(factor), cfg, opt, train_rng);
    return model.all_params();
  };

  const std::vector<Parameter> base = train_self(1.0);
  const std::vector<Parameter> pow2 = train_self(1024.0);
  REQUIRE(base.size() == pow2.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(testutil::bitwise_equal(base[i].value, pow2[i].value));
  }
  const std::vector<Parameter> x1000 = train_self(1000.0);
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(testutil::max_rel_diff(base[i].value, x1000[i].value) < 1e-9);
  }

  // Fixed-proposal form: same invariance on a frozen uniform sample set.
  Tensor samples(512, 2);
  Rng sample_rng = Rng::substream(251, {2});
  sample_rng.fill_uniform(samples.data, -1.0 + 1e-9, 1.0 - 1e-9);
  const std::vector<double> proposal_log(512, -std::log(4.0));
  auto train_fixed = [&](double factor) {
    Rng rng = Rng::substream(251, {3});
    FlowModel model(small_config(2, box), rng);
    AdamOptimizer opt(1e-2);
    CeTrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch = 256;
    Rng train_rng = Rng::substream(251, {4});
    train_flow_ce(model, samples, proposal_log, scaled_target(factor), cfg, opt, train_rng);
    return model.all_params();
  };
  const std::vector<Parameter> fixed_base = train_fixed(1.0);
  const std::vector<Parameter> fixed_pow2 = train_fixed(1024.0);
  for (std::size_t i = 0; i < fixed_base.size(); ++i) {
    CHECK(testutil::bitwise_equal(fixed_base[i].value, fixed_pow2[i].value));
  }
}

TEST_CASE("uniform weights reduce cross-entropy to the mean model log-density") {
  const Box box = Box::cube(2, -1.0, 1.0);
  Rng rng = Rng::substream(257, {0});
  FlowModel model(small_config(2, box), rng);

  Tensor samples(64, 2);
  Rng sample_rng = Rng::substream(257, {1});
  sample_rng.fill_uniform(samples.data, -1.0 + 1e-9, 1.0 - 1e-9);
  std::vector<double> proposal_log(64, -std::log(4.0));

  // Target identical to the proposal: every importance weight is exactly one.
  auto proposal_target = [](const Tensor& x) {
    return std::vector<double>(static_cast<std::size_t>(x.rows), 0.25);
  };

  const std::vector<double> lp = model.log_density(samples);
  double mean_lp = 0.0;
  for (double v : lp) mean_lp += v;
  mean_lp /= static_cast<double>(lp.size());

  AdamOptimizer opt(1e-3);
  CeTrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 64;
  Rng train_rng = Rng::substream(257, {2});
  const CeTrainTrace trace =
      train_flow_ce(model, samples, proposal_log, proposal_target, cfg, opt, train_rng);
  REQUIRE(trace.ce_per_epoch.size() == 1);
  CHECK(trace.ce_per_epoch[0] == doctest::Approx(-mean_lp).epsilon(1e-12));
  CHECK(trace.total == 64);
  CHECK(trace.rejected == 0);
}

TEST_SUITE_END();

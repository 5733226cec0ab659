#include <random>

#include "doctest.h"
#include "holdfield/autodiff.hpp"

using namespace holdfield;

TEST_CASE("grad of squared norm and of a constant") {
  ParamSet params;
  const int off = params.add_slice("p", 3, LrGroup::Field);
  params.values = {1, 2, 3};

  const auto g = grad(
      [&](Tape& t) {
        const Var x = t.leaf(off), y = t.leaf(off + 1), z = t.leaf(off + 2);
        return x * x + y * y + z * z;
      },
      params);
  CHECK(g[0] == doctest::Approx(2));
  CHECK(g[1] == doctest::Approx(4));
  CHECK(g[2] == doctest::Approx(6));

  const auto zero = grad([&](Tape& t) { return t.constant(5.0); }, params);
  for (double v : zero) CHECK(v == 0.0);
}

TEST_CASE("scalar op partials match finite differences") {
  ParamSet params;
  const int off = params.add_slice("p", 4, LrGroup::Field);
  params.values = {0.7, -0.3, 1.4, 0.25};

  auto fwd = [&](Tape& t) {
    const Var a = t.leaf(off), b = t.leaf(off + 1), c = t.leaf(off + 2), d = t.leaf(off + 3);
    const Var e = exp(a * b) + log(c) * sqrt(c + 2.0);
    const Var f = sigmoid(a - b) * tanh(c * d) + sin(a) * cos(b);
    const Var g = abs(b) + max(a, d) + min(a, d) + pow(c, 1.7) + 3.0 / (a + 2.0);
    return e * 0.3 + f - 0.2 * g + (a - b) / (c + 1.0);
  };
  const auto analytic = grad(fwd, params);
  const auto fd = finite_difference(
      [&](ParamSet& p) {
        Tape t(&p);
        return fwd(t).value();
      },
      params, {off, off + 1, off + 2, off + 3});
  for (int i = 0; i < 4; ++i) CHECK(relative_error(analytic[off + i], fd[i]) < 1e-7);
}

TEST_CASE("gradients are deterministic") {
  ParamSet params;
  const int off = params.add_slice("p", 8, LrGroup::Field);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& v : params.values) v = gauss(rng);
  auto fwd = [&](Tape& t) {
    Var acc = t.constant(0.0);
    for (int i = 0; i < 8; ++i) acc = acc + exp(t.leaf(off + i) * 0.3) * sin(t.leaf(off + i));
    return acc;
  };
  const auto g1 = grad(fwd, params);
  const auto g2 = grad(fwd, params);
  for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("non-finite forward raises") {
  ParamSet params;
  const int off = params.add_slice("p", 1, LrGroup::Field);
  params.values = {-1.0};
  CHECK_THROWS_AS(grad([&](Tape& t) { return log(t.leaf(off)); }, params), NonFiniteLoss);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParamSet params;
  params.add_slice("p", 3, LrGroup::Field);
  params.values = {1, 2, 3};
  Adam adam;
  adam.step(params, {0, 0, 0});
  CHECK(params.values[0] == 1.0);
  CHECK(params.values[1] == 2.0);
  CHECK(params.values[2] == 3.0);
}

TEST_CASE("adam: 1-d quadratic converges") {
  ParamSet params;
  const int off = params.add_slice("x", 1, LrGroup::Field);
  params.values = {1.0};
  AdamConfig cfg;
  cfg.lr_field = 0.1;
  cfg.clip_norm = 0;  // plain step
  Adam adam(cfg);
  for (int i = 0; i < 200; ++i) {
    const auto g = grad([&](Tape& t) {
      const Var x = t.leaf(off);
      return x * x;
    }, params);
    adam.step(params, g);
  }
  CHECK(std::abs(params.values[0]) < 1e-3);
}

TEST_CASE("adam: global-norm clipping equals pre-scaled gradient") {
  ParamSet a, b;
  a.add_slice("p", 2, LrGroup::Field);
  b.add_slice("p", 2, LrGroup::Field);
  a.values = {1.0, 2.0};
  b.values = {1.0, 2.0};
  AdamConfig cfg;
  cfg.clip_norm = 1.0;
  Adam adam_a(cfg), adam_b(cfg);
  const std::vector<double> big = {6.0, 8.0};             // norm 10
  const std::vector<double> scaled = {0.6, 0.8};          // norm 1
  adam_a.step(a, big);
  adam_b.step(b, scaled);
  CHECK(a.values[0] == doctest::Approx(b.values[0]).epsilon(1e-15));
  CHECK(a.values[1] == doctest::Approx(b.values[1]).epsilon(1e-15));
}

TEST_CASE("per-group learning rates") {
  ParamSet params;
  const int f = params.add_slice("field", 1, LrGroup::Field);
  const int p = params.add_slice("pose", 1, LrGroup::Pose);
  params.values = {0.0, 0.0};
  AdamConfig cfg;
  cfg.lr_field = 5e-4;
  cfg.lr_pose = 1e-3;
  cfg.clip_norm = 0;
  Adam adam(cfg);
  adam.step(params, {1.0, 1.0});
  CHECK(params.values[f] == doctest::Approx(-5e-4).epsilon(1e-6));
  CHECK(params.values[p] == doctest::Approx(-1e-3).epsilon(1e-6));
}

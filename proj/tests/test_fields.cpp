#include <filesystem>
#include <random>

#include "doctest.h"
#include "holdfield/fields.hpp"
#include "holdfield/losses.hpp"
#include "holdfield/skeleton.hpp"

using namespace holdfield;

namespace {

struct FieldFixture {
  ParamSet params;
  TrainableField field;
  FieldFixture(TrainableField proto, uint64_t seed, double radius = 0.5) {
    field = register_field(params, proto);
    init_geometric(params, field, radius, seed);
  }
};

}  // namespace

TEST_CASE("geometric init approximates a sphere of radius 0.5") {
  FieldFixture fx(TrainableField::hand_field(), 2024);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  double worst_surface = 0;
  for (int i = 0; i < 64; ++i) {
    Vec3 dir{gauss(rng), gauss(rng), gauss(rng)};
    dir = normalized(dir);
    worst_surface = std::max(worst_surface, std::abs(eval_hand(fx.field, fx.params, dir * 0.5).d));
    // Sign structure of a sphere SDF.
    CHECK(eval_hand(fx.field, fx.params, dir * 0.1).d < 0);
    CHECK(eval_hand(fx.field, fx.params, dir * 1.5).d > 0);
  }
  CHECK(worst_surface < 0.05);
}

TEST_CASE("field evaluation is deterministic and colors stay in range") {
  FieldFixture fx(TrainableField::hand_field(), 11);
  const FieldSample a = eval_hand(fx.field, fx.params, {0.3, -0.2, 0.4});
  const FieldSample b = eval_hand(fx.field, fx.params, {0.3, -0.2, 0.4});
  CHECK(a.d == b.d);
  CHECK(a.c.x == b.c.x);
  CHECK(a.c.y == b.c.y);
  CHECK(a.c.z == b.c.z);
  for (double c : {a.c.x, a.c.y, a.c.z}) {
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);
  }
}

TEST_CASE("object latent conditions color only") {
  FieldFixture fx(TrainableField::object_field(), 31);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const Vec3 x{gauss(rng), gauss(rng), gauss(rng)};
    std::vector<double> za(kLatentDim), zb(kLatentDim);
    for (int k = 0; k < kLatentDim; ++k) {
      za[k] = gauss(rng);
      zb[k] = gauss(rng);
    }
    const FieldSample sa = eval_object(fx.field, fx.params, x, za.data());
    const FieldSample sb = eval_object(fx.field, fx.params, x, zb.data());
    CHECK(sa.d == sb.d);
  }
  // z = 0 twice: bit-identical sample.
  std::vector<double> z0(kLatentDim, 0.0);
  const FieldSample s1 = eval_object(fx.field, fx.params, {0.2, 0.1, 0}, z0.data());
  const FieldSample s2 = eval_object(fx.field, fx.params, {0.2, 0.1, 0}, z0.data());
  CHECK(s1.d == s2.d);
  CHECK(norm(s1.c - s2.c) == 0.0);
}

TEST_CASE("inverted sphere parametrization") {
  const double r_bg = 3.0;
  const auto boundary = inverted_sphere_param({3, 0, 0}, r_bg);
  CHECK(boundary[3] == doctest::Approx(1.0));

  const auto mid = inverted_sphere_param({2 * r_bg, 0, 0}, r_bg);
  CHECK(mid[0] == doctest::Approx(1.0));
  CHECK(mid[1] == doctest::Approx(0.0));
  CHECK(mid[3] == doctest::Approx(0.5));

  const auto far = inverted_sphere_param({1e9, 0, 0}, r_bg);
  CHECK(far[3] >= 1e-6);
  CHECK(std::isfinite(far[3]));

  CHECK_THROWS_AS(inverted_sphere_param({1.0, 0, 0}, r_bg), InsideForeground);
}

TEST_CASE("background evaluation is finite and view conditioned") {
  FieldFixture fx(TrainableField::background_field(), 91);
  std::vector<double> z(kLatentDim, 0.3);
  const FieldSample s =
      eval_background(fx.field, fx.params, {5, 1, 2}, {0, 0, 1}, z.data(), 3.0);
  CHECK(std::isfinite(s.d));
  for (double c : {s.c.x, s.c.y, s.c.z}) CHECK(std::isfinite(c));
}

TEST_CASE("analytic sdf values") {
  const AnalyticShape sphere = AnalyticShape::sphere(1.0);
  CHECK(analytic_sdf(sphere, {0, 0, 0}) == doctest::Approx(-1));
  CHECK(analytic_sdf(sphere, {2, 0, 0}) == doctest::Approx(1));

  const AnalyticShape box = AnalyticShape::box({1, 1, 1});
  CHECK(analytic_sdf(box, {2, 2, 0}) == doctest::Approx(std::sqrt(2.0)));
  CHECK(analytic_sdf(box, {0, 0, 0}) == doctest::Approx(-1));

  const AnalyticShape cap = AnalyticShape::capsule(1.0, 0.5);
  CHECK(analytic_sdf(cap, {0, 0, 0}) == doctest::Approx(-0.5));
  CHECK(analytic_sdf(cap, {0, 0, 2.0}) == doctest::Approx(0.5));
  CHECK(analytic_sdf(cap, {1.5, 0, 0.3}) == doctest::Approx(1.0));

  AnalyticShape moved = AnalyticShape::sphere(1.0);
  moved.to_world.translation = {2, 0, 0};
  moved.to_world.scale = 2.0;
  CHECK(analytic_sdf(moved, {2, 0, 0}) == doctest::Approx(-2.0));
  const AnalyticShape uni = AnalyticShape::union_of({AnalyticShape::sphere(1.0), moved});
  CHECK(analytic_sdf(uni, {2, 0, 0}) == doctest::Approx(-2.0));
}

TEST_CASE("analytic sdfs satisfy the eikonal property") {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> gauss(0.0, 1.5);
  const double h = 1e-6;
  for (const AnalyticShape& shape :
       {AnalyticShape::sphere(1.0), AnalyticShape::box({0.8, 1.0, 1.2}),
        AnalyticShape::capsule(0.7, 0.4)}) {
    int checked = 0;
    for (int i = 0; i < 300 && checked < 60; ++i) {
      const Vec3 p{gauss(rng), gauss(rng), gauss(rng)};
      const double d = analytic_sdf(shape, p);
      if (std::abs(d) < 0.05) continue;
      // Keep off the box face/edge transitions and interior medial axis.
      if (shape.kind == AnalyticShape::Kind::Box) {
        const Vec3 q{std::abs(p.x) - shape.half_extents.x, std::abs(p.y) - shape.half_extents.y,
                     std::abs(p.z) - shape.half_extents.z};
        double near_edge = std::min({std::abs(q.x), std::abs(q.y), std::abs(q.z)});
        if (d < 0 || near_edge < 0.05) continue;
        (void)near_edge;
      }
      if (d < 0) continue;
      Vec3 g;
      for (int a = 0; a < 3; ++a) {
        Vec3 pp = p, pm = p;
        pp[a] += h;
        pm[a] -= h;
        g[a] = (analytic_sdf(shape, pp) - analytic_sdf(shape, pm)) / (2 * h);
      }
      CHECK(norm(g) == doctest::Approx(1.0).epsilon(1e-6));
      ++checked;
    }
    CHECK(checked >= 30);
  }
}

TEST_CASE("engine input gradient matches finite differences") {
  FieldFixture fx(TrainableField::hand_field(), 77);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> gauss(0.0, 0.6);
  const double h = 1e-4;
  for (int i = 0; i < 20; ++i) {
    const Vec3 x{gauss(rng), gauss(rng), gauss(rng)};
    const double in[3] = {x.x, x.y, x.z};
    double g[3];
    eval_mlp_distance_grad(fx.field.arch, fx.params.values.data() + fx.field.offset, in, g);
    for (int a = 0; a < 3; ++a) {
      Vec3 xp = x, xm = x;
      xp[a] += h;
      xm[a] -= h;
      const double fd =
          (eval_hand(fx.field, fx.params, xp).d - eval_hand(fx.field, fx.params, xm).d) / (2 * h);
      CHECK(relative_error(g[a], fd) < 1e-4);
    }
  }
}

TEST_CASE("hand field fits the template sdf prior") {
  static const Skeleton sk = Skeleton::default_hand();
  FieldFixture fx(TrainableField::hand_field(), 2025);
  AdamConfig cfg;
  cfg.clip_norm = 0;
  Adam adam(cfg);
  const int steps = 1200;
  for (int step = 0; step < steps; ++step) {
    adam.config.lr_field = 3e-3 * 0.5 * (1.0 + std::cos(M_PI * step / steps)) + 1e-4;
    const auto pts = sample_prior_points(256, {-2, -2, -2}, {2, 2, 2}, &sk.template_mesh(), 0.08,
                                         1000 + step);
    Tape tape(&fx.params);
    const Var loss = loss_sdf_tape(tape, fx.field, sk, pts);
    tape.backward(loss);
    adam.step(fx.params, tape.param_grad());
  }
  const auto probe = sample_prior_points(300, {-1.8, -1.8, -1.8}, {1.8, 1.8, 1.8},
                                         &sk.template_mesh(), 0.1, 555);
  double acc = 0, p95 = 0;
  std::vector<double> errs;
  for (const Vec3& x : probe) {
    errs.push_back(std::abs(eval_hand(fx.field, fx.params, x).d - sk.template_sdf(x)));
    acc += errs.back();
  }
  std::sort(errs.begin(), errs.end());
  p95 = errs[(size_t)(0.95 * errs.size())];
  MESSAGE("sdf fit: mean ", acc / errs.size(), " p95 ", p95, " max ", errs.back());
  CHECK(acc / errs.size() < 0.01);
  CHECK(p95 < 0.02);
}

TEST_CASE("object field fits an analytic box sdf") {
  FieldFixture fx(TrainableField::object_field(), 2026);
  const AnalyticShape box = AnalyticShape::box({0.5, 0.4, 0.6});
  AdamConfig cfg;
  cfg.clip_norm = 0;
  Adam adam(cfg);
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> uni(-1.1, 1.1);
  const int steps = 1200;
  for (int step = 0; step < steps; ++step) {
    adam.config.lr_field = 3e-3 * 0.5 * (1.0 + std::cos(M_PI * step / steps)) + 1e-4;
    std::vector<Vec3> pts(256);
    for (auto& p : pts) p = {uni(rng), uni(rng), uni(rng)};
    Tape tape(&fx.params);
    Var loss = tape.constant(0.0);
    for (const Vec3& x : pts) {
      const Var xs[3] = {tape.constant(x.x), tape.constant(x.y), tape.constant(x.z)};
      const TapeFieldSample s = eval_mlp_tape(tape, fx.field.arch, fx.field.offset, xs, {}, {});
      loss = loss + abs(s.d - analytic_sdf(box, x));
    }
    loss = loss / (double)pts.size();
    tape.backward(loss);
    adam.step(fx.params, tape.param_grad());
  }
  double mean = 0;
  std::vector<double> errs;
  for (int i = 0; i < 300; ++i) {
    const Vec3 x{uni(rng), uni(rng), uni(rng)};
    errs.push_back(std::abs(eval_object(fx.field, fx.params, x, nullptr).d -
                            analytic_sdf(box, x)));
    mean += errs.back();
  }
  std::sort(errs.begin(), errs.end());
  MESSAGE("box fit: mean ", mean / errs.size(), " p95 ", errs[(size_t)(0.95 * errs.size())]);
  CHECK(mean / errs.size() < 0.01);
  CHECK(errs[(size_t)(0.95 * errs.size())] < 0.02);
}

TEST_CASE("checkpoint round trip") {
  Checkpoint ckpt;
  ckpt.archs = {TrainableField::hand_field().arch, TrainableField::object_field().arch,
                TrainableField::background_field().arch};
  ckpt.params.add_slice("psi_h", 100, LrGroup::Field);
  ckpt.params.add_slice("pose_f0", 27, LrGroup::Pose);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& v : ckpt.params.values) v = (float)gauss(rng);  // f32-representable
  ckpt.adam_m.assign(ckpt.params.size(), 0.25);
  ckpt.adam_v.assign(ckpt.params.size(), 0.5);
  ckpt.adam_step = 42;

  const std::string path = (std::filesystem::temp_directory_path() / "hf_ckpt.bin").string();
  save_checkpoint(path, ckpt);
  const Checkpoint back = load_checkpoint(path);
  REQUIRE(back.archs.size() == 3);
  CHECK(back.archs[1].latent_dim == kLatentDim);
  REQUIRE(back.params.size() == ckpt.params.size());
  for (int i = 0; i < ckpt.params.size(); ++i) CHECK(back.params.values[i] == ckpt.params.values[i]);
  CHECK(back.params.slices[1].name == "pose_f0");
  CHECK(back.params.slices[1].group == LrGroup::Pose);
  CHECK(back.adam_step == 42);
}

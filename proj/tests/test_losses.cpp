#include <random>

#include "doctest.h"
#include "holdfield/losses.hpp"

using namespace holdfield;

TEST_CASE("loss_rgb: mean L1 over rays, summed over channels") {
  std::vector<std::array<double, 3>> rendered{{0.5, 0.5, 0.5}};
  std::vector<Vec3> target{{0.5, 0.5, 0.5}};
  CHECK(loss_rgb(rendered, target) == doctest::Approx(0.0));

  rendered = {{0.6, 0.6, 0.6}};
  target = {{0.5, 0.5, 0.5}};
  CHECK(loss_rgb(rendered, target) == doctest::Approx(0.3));

  rendered = {{0.7, 0.5, 0.5}, {0.1, 0.1, 0.1}, {0.2, 0.2, 0.2}, {0.9, 0.9, 0.9}};
  target = {{0.5, 0.5, 0.5}, {0.1, 0.1, 0.1}, {0.2, 0.2, 0.2}, {0.9, 0.9, 0.9}};
  CHECK(loss_rgb(rendered, target) == doctest::Approx(0.05));
}

TEST_CASE("loss_segm: one-hot targets and permutation symmetry") {
  std::vector<std::array<double, 3>> s{{1, 0, 0}};
  std::vector<Vec3> target{{1, 0, 0}};
  CHECK(loss_segm(s, target) == doctest::Approx(0.0));

  s = {{1.0 / 3, 1.0 / 3, 1.0 / 3}};
  CHECK(loss_segm(s, target) == doctest::Approx(4.0 / 3));

  std::vector<std::array<double, 3>> batch{{0.7, 0.2, 0.1}, {0.1, 0.8, 0.1}};
  std::vector<Vec3> targets{{1, 0, 0}, {0, 1, 0}};
  const double base = loss_segm(batch, targets);
  std::swap(batch[0], batch[1]);
  std::swap(targets[0], targets[1]);
  CHECK(loss_segm(batch, targets) == doctest::Approx(base));
}

TEST_CASE("loss_sdf equals a brute-force recomputation") {
  static const Skeleton sk = Skeleton::default_hand();
  ParamSet params;
  const TrainableField f = register_field(params, TrainableField::hand_field());
  init_geometric(params, f, 0.5, 17);
  const auto pts =
      sample_prior_points(1024, {-2, -2, -2}, {2, 2, 2}, &sk.template_mesh(), 0.05, 3);
  const double lib = loss_sdf(f, params, sk, pts);
  double brute = 0;
  for (const Vec3& x : pts) brute += std::abs(eval_hand(f, params, x).d - sk.template_sdf(x));
  brute /= (double)pts.size();
  CHECK(lib == doctest::Approx(brute).epsilon(1e-12));
  CHECK(lib >= 0.0);
}

TEST_CASE("eikonal residual definition on analytic fields") {
  // Exact sphere SDF has unit gradient: residual 0. A doubled SDF reads 1.
  auto residual = [](double grad_norm) { return (grad_norm - 1.0) * (grad_norm - 1.0); };
  CHECK(residual(1.0) == doctest::Approx(0.0).epsilon(1e-10));
  CHECK(residual(2.0) == doctest::Approx(1.0));
}

TEST_CASE("loss_eikonal matches a finite-difference recomputation") {
  ParamSet params;
  const TrainableField f = register_field(params, TrainableField::hand_field());
  init_geometric(params, f, 0.5, 23);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> gauss(0.0, 0.7);
  std::vector<Vec3> pts(64);
  for (auto& p : pts) p = {gauss(rng), gauss(rng), gauss(rng)};
  const double lib = loss_eikonal(f, params, pts);

  const double h = 1e-4;
  double brute = 0;
  for (const Vec3& x : pts) {
    Vec3 g;
    for (int a = 0; a < 3; ++a) {
      Vec3 xp = x, xm = x;
      xp[a] += h;
      xm[a] -= h;
      g[a] = (eval_hand(f, params, xp).d - eval_hand(f, params, xm).d) / (2 * h);
    }
    brute += (norm(g) - 1.0) * (norm(g) - 1.0);
  }
  brute /= (double)pts.size();
  CHECK(relative_error(lib, brute) < 1e-4);
}

TEST_CASE("loss_sparse: arithmetic and empty sets") {
  Tape tape(nullptr);
  std::vector<double> amodal{0.4, 0.0, 0.0, 0.0};
  const std::vector<int> far{0, 1, 2, 3};
  CHECK(loss_sparse_term(amodal, far, nullptr) == doctest::Approx(0.1));
  const std::vector<int> empty;
  CHECK(loss_sparse_term(amodal, empty, nullptr) == doctest::Approx(0.0));
  std::vector<double> zeros{0, 0};
  CHECK(loss_sparse_term(zeros, {0, 1}, nullptr) == doctest::Approx(0.0));
}

TEST_CASE("far ray sets honor the threshold") {
  // Vertical edge at x = 1 gives an exact ray-to-mesh gap of x - 1.
  TriMesh tri;
  tri.vertices = {{1, -1, 0}, {1, 1, 0}, {-1, 0, 0}};
  tri.faces = {{0, 1, 2}};
  const MeshBvh bvh(tri);

  auto make_ray = [](double x) {
    Ray ray;
    ray.origin = {x, 0, -5};
    ray.direction = {0, 0, 1};
    ray.near = 0;
    ray.far = 10;
    return ray;
  };
  std::vector<Ray> rays{make_ray(3.0), make_ray(1.0 + kFarRayThreshold - 0.01)};
  const FarRaySets sets = build_far_ray_sets(rays, &bvh, nullptr);
  // Gap 2: far.
  CHECK(std::find(sets.far_hand.begin(), sets.far_hand.end(), 0) != sets.far_hand.end());
  // Grazing at threshold minus epsilon: excluded.
  CHECK(std::find(sets.far_hand.begin(), sets.far_hand.end(), 1) == sets.far_hand.end());
}

TEST_CASE("loss weight schedule is monotone with the stated endpoints") {
  const int epochs = 100;
  LossWeights prev = LossWeights::at_epoch(0, epochs);
  CHECK(prev.lambda_segm == doctest::Approx(1.0));
  CHECK(prev.lambda_sdf == doctest::Approx(0.1));
  CHECK(prev.lambda_sparse == doctest::Approx(0.0));
  for (int e = 1; e < epochs; ++e) {
    const LossWeights w = LossWeights::at_epoch(e, epochs);
    CHECK(w.lambda_segm <= prev.lambda_segm + 1e-12);
    CHECK(w.lambda_sdf >= prev.lambda_sdf - 1e-12);
    CHECK(w.lambda_sparse >= prev.lambda_sparse - 1e-12);
    CHECK(w.lambda_eikonal == doctest::Approx(0.1));
    prev = w;
  }
  CHECK(prev.lambda_segm == doctest::Approx(0.1));
  CHECK(prev.lambda_sdf == doctest::Approx(1.0));
  CHECK(prev.lambda_sparse == doctest::Approx(0.5));
}

TEST_CASE("total loss: weighted sum reproducible from the logged schedule") {
  LossBreakdown b;
  b.rgb = 1.0;
  CHECK(b.weighted_total(LossWeights::at_epoch(0, 10)) == doctest::Approx(1.0));

  b.segm = 0.5;
  b.sdf = 0.25;
  b.sparse = 0.125;
  b.eikonal = 2.0;
  const LossWeights w0 = LossWeights::at_epoch(0, 100);
  const LossWeights w99 = LossWeights::at_epoch(99, 100);
  const double t0 = b.weighted_total(w0);
  const double t99 = b.weighted_total(w99);
  CHECK(t0 != t99);
  CHECK(t0 == doctest::Approx(1.0 + w0.lambda_segm * 0.5 + w0.lambda_sdf * 0.25 +
                              w0.lambda_sparse * 0.125 + 0.1 * 2.0));
  CHECK(t99 == doctest::Approx(1.0 + 0.1 * 0.5 + 1.0 * 0.25 + 0.5 * 0.125 + 0.1 * 2.0));
}

TEST_CASE("every loss is nonnegative and zero on its exact-fit case") {
  std::vector<std::array<double, 3>> exact{{0.1, 0.2, 0.3}};
  std::vector<Vec3> target{{0.1, 0.2, 0.3}};
  CHECK(loss_rgb(exact, target) == 0.0);
  CHECK(loss_segm(exact, target) == 0.0);
  std::vector<double> zero_amodal{0.0};
  CHECK(loss_sparse_term(zero_amodal, {0}, nullptr) == 0.0);
}

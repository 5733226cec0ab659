#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "holdfield/fields.hpp"
#include "holdfield/meshmetrics.hpp"

using namespace holdfield;

namespace {

TriMesh mc_sphere(double radius, int res = 64) {
  return marching_cubes(
      [radius](const Vec3& p) { return norm(p) - radius; }, res, {-2, -2, -2}, {2, 2, 2});
}

}  // namespace

TEST_CASE("marching cubes: sphere accuracy and vertex residuals") {
  const TriMesh mesh = mc_sphere(1.0);
  REQUIRE(!mesh.empty());
  const double cell_diag = std::sqrt(3.0) * 4.0 / 64.0;
  double worst = 0;
  for (const auto& v : mesh.vertices) worst = std::max(worst, std::abs(norm(v) - 1.0));
  CHECK(worst < cell_diag);
  for (const auto& v : mesh.vertices) CHECK(std::abs(norm(v) - 1.0) < cell_diag);
}

TEST_CASE("marching cubes: empty level set raises") {
  CHECK_THROWS_AS(
      marching_cubes([](const Vec3&) { return 1.0; }, 16, {-1, -1, -1}, {1, 1, 1}),
      EmptyLevelSet);
}

TEST_CASE("marching cubes: box surface area within 5 percent") {
  const AnalyticShape box = AnalyticShape::box({1, 1, 1});
  const TriMesh mesh = marching_cubes(
      [&](const Vec3& p) { return analytic_sdf(box, p); }, 96, {-1.5, -1.5, -1.5},
      {1.5, 1.5, 1.5});
  REQUIRE(!mesh.vertices.empty());
  CHECK(mesh.surface_area() == doctest::Approx(24.0).epsilon(0.05));
}

TEST_CASE("icp: identity, similarity recovery, partial overlap") {
  const TriMesh sphereish = mc_sphere(1.0, 24);

  SUBCASE("source equals target") {
    const IcpResult res = icp_align(sphereish, sphereish, true);
    CHECK(res.rms < 1e-6);
    CHECK(norm(res.transform.translation) < 1e-5);
    CHECK(std::abs(res.transform.scale - 1.0) < 1e-5);
  }

  SUBCASE("known similarity is recovered") {
    // An asymmetric shape pins the rotation.
    const TriMesh shape = marching_cubes(
        [](const Vec3& p) {
          const double body = analytic_sdf(AnalyticShape::box({0.8, 0.5, 0.3}), p);
          const double nose = norm(p - Vec3{0.9, 0, 0}) - 0.35;
          return std::min(body, nose);
        },
        48, {-2, -2, -2}, {2, 2, 2});
    ScaledRigid gt;
    gt.scale = 1.3;
    gt.rotation = rotation_from_axis_angle({0.4, -0.7, 0.2});
    gt.translation = {0.8, -0.4, 1.2};
    TriMesh target = shape;
    target.apply_transform(gt);
    const IcpResult res = icp_align(shape, target, true);
    CHECK(res.rms < 1e-3);
    CHECK(std::abs(res.transform.scale - gt.scale) < 1e-3);
    CHECK(norm(res.transform.translation - gt.translation) < 1e-2);
    double rot_err = 0;
    for (int i = 0; i < 9; ++i)
      rot_err = std::max(rot_err, std::abs(res.transform.rotation.m[i] - gt.rotation.m[i]));
    CHECK(rot_err < 1e-2);
  }

  SUBCASE("partial overlap terminates with finite output") {
    TriMesh half;
    for (const auto& f : sphereish.faces) {
      bool keep = true;
      for (int i = 0; i < 3; ++i) keep &= sphereish.vertices[f[i]].z > 0;
      if (!keep) continue;
      half.faces.push_back(f);
    }
    half.vertices = sphereish.vertices;
    half.remove_degenerate_faces();
    TriMesh compact = largest_component(half);
    REQUIRE(!compact.empty());
    const IcpResult res = icp_align(compact, sphereish, true);
    CHECK(std::isfinite(res.rms));
    CHECK(res.transform.valid(1e-6));
  }
}

TEST_CASE("chamfer: identity, symmetry, concentric spheres, translation bound") {
  const TriMesh a = mc_sphere(1.0);
  const auto pts = sample_surface(a, 5000, 3);
  CHECK(chamfer(pts, pts) == doctest::Approx(0.0));

  // Symmetry is exact at the point level.
  const TriMesh b = mc_sphere(1.1);
  const auto pa = sample_surface(a, 8000, 5);
  const auto pb = sample_surface(b, 8000, 6);
  CHECK(chamfer(pa, pb) == doctest::Approx(chamfer(pb, pa)));

  // Dense-sampling oracle: concentric spheres 1.0 vs 1.1 -> about 0.01 cm^2.
  const auto dense_a = sample_surface(a, 100000, 7);
  const auto dense_b = sample_surface(b, 100000, 8);
  CHECK(chamfer(dense_a, dense_b) == doctest::Approx(0.01).epsilon(0.10));

  // Small translation: bounded by t^2 (plus sampling slack).
  TriMesh shifted = a;
  shifted.translate({0.05, 0, 0});
  const auto ps = sample_surface(shifted, 8000, 5);  // matched seed: same barycenters
  CHECK(chamfer(pa, ps) <= 0.05 * 0.05 + 1e-6);
}

TEST_CASE("fscore: identity, thresholds, monotonicity") {
  const TriMesh a = mc_sphere(1.0);
  const auto pa = sample_surface(a, 20000, 11);
  CHECK(fscore(pa, pa, 0.5) == doctest::Approx(100.0));

  const TriMesh b = mc_sphere(1.1);
  const auto pb = sample_surface(b, 20000, 12);
  CHECK(fscore(pa, pb, 0.5) == doctest::Approx(100.0));

  const TriMesh c = mc_sphere(2.0, 48);
  const auto pc = sample_surface(c, 20000, 13);
  CHECK(fscore(pa, pc, 0.5) == doctest::Approx(0.0));

  // F5 <= F10, monotone in the threshold.
  const TriMesh d = mc_sphere(1.35, 48);
  const auto pd = sample_surface(d, 20000, 14);
  double prev = 0;
  for (double thr : {0.1, 0.25, 0.5, 1.0, 2.0}) {
    const double f = fscore(pa, pd, thr);
    CHECK(f >= prev - 1e-9);
    prev = f;
  }
  CHECK(fscore_mesh(a, d, 0.5) <= fscore_mesh(a, d, 1.0) + 1e-9);
}

TEST_CASE("mpjpe: invariances and arithmetic") {
  const std::vector<Vec3> gt{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}};
  CHECK(mpjpe(gt, gt, 0) == doctest::Approx(0.0));

  std::vector<Vec3> shifted = gt;
  for (auto& j : shifted) j += Vec3{3, -2, 5};
  CHECK(mpjpe(shifted, gt, 0) == doctest::Approx(0.0));

  std::vector<Vec3> off = gt;
  off[2] += Vec3{0, 0, 1.0};  // 1 cm on one of five joints
  CHECK(mpjpe(off, gt, 0) == doctest::Approx(2.0));
}

TEST_CASE("cd_h: exact, shared shift invariance, root offset") {
  const TriMesh obj = mc_sphere(1.0, 32);
  const Vec3 root{0.5, -0.2, 0.3};
  CHECK(cd_h({obj}, {obj}, {root}, {root}, 4000) == doctest::Approx(0.0).epsilon(1e-9));

  TriMesh shifted = obj;
  shifted.translate({2, 1, -1});
  const Vec3 root_shifted = root + Vec3{2, 1, -1};
  CHECK(cd_h({shifted}, {obj}, {root_shifted}, {root}, 4000) ==
        doctest::Approx(0.0).epsilon(1e-6));

  // Hand root off by d with a correct object: contributes about d^2.
  const double d = 0.4;
  CHECK(cd_h({obj}, {obj}, {root + Vec3{d, 0, 0}}, {root}, 4000) ==
        doctest::Approx(d * d).epsilon(0.15));
}

TEST_CASE("metric report serialization carries the definition header") {
  MetricReport report;
  report.cd_cm2 = 0.123;
  report.f5_pct = 88.0;
  const std::string path =
      (std::filesystem::temp_directory_path() / "hf_metrics.json").string();
  save_metric_report(report, path);
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  CHECK(ss.str().find("cd_definition") != std::string::npos);
  CHECK(ss.str().find("mean-of-squared") != std::string::npos);
}

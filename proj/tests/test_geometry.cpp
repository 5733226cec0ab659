#include <random>

#include "doctest.h"
#include "holdfield/geometry.hpp"

using namespace holdfield;

namespace {

ScaledRigid random_transform(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.2, 3.0);
  ScaledRigid t;
  Vec3 axis{gauss(rng), gauss(rng), gauss(rng)};
  t.rotation = rotation_from_axis_angle(normalized(axis) * uni(rng));
  t.translation = {gauss(rng), gauss(rng), gauss(rng)};
  t.scale = uni(rng);
  return t;
}

Camera test_camera() {
  Camera cam;
  cam.fx = cam.fy = 100.0;
  cam.cx = cam.cy = 50.0;
  cam.width = cam.height = 100;
  return cam;
}

}  // namespace

TEST_CASE("apply: identity, scale and rotation") {
  CHECK(norm(apply(ScaledRigid::identity(), {1, 2, 3}) - Vec3{1, 2, 3}) == doctest::Approx(0));

  ScaledRigid t;
  t.scale = 2.0;
  t.translation = {0, 0, 1};
  CHECK(norm(apply(t, {1, 0, 0}) - Vec3{2, 0, 1}) < 1e-12);

  ScaledRigid rot;
  rot.rotation = rotation_from_axis_angle({0, 0, M_PI / 2});
  CHECK(norm(apply(rot, {1, 0, 0}) - Vec3{0, 1, 0}) < 1e-12);
}

TEST_CASE("inverse_apply inverts apply") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss(0.0, 1.0);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const ScaledRigid t = random_transform(rng);
    const Vec3 p{gauss(rng), gauss(rng), gauss(rng)};
    worst = std::max(worst, norm(inverse_apply(t, apply(t, p)) - p));
  }
  CHECK(worst < 1e-9);

  ScaledRigid t;
  t.scale = 2.0;
  t.translation = {0, 0, 1};
  CHECK(norm(inverse_apply(t, {2, 0, 1}) - Vec3{1, 0, 0}) < 1e-12);

  ScaledRigid u;
  u.scale = 0.5;
  u.rotation = rotation_from_axis_angle({0, 0, M_PI / 2});
  u.translation = {1, 0, 0};
  CHECK(norm(inverse_apply(u, {1, 0.5, 0}) - Vec3{1, 0, 0}) < 1e-12);
}

TEST_CASE("transform composition") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> gauss(0.0, 1.0);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const ScaledRigid a = random_transform(rng);
    const ScaledRigid b = random_transform(rng);
    const Vec3 p{gauss(rng), gauss(rng), gauss(rng)};
    worst = std::max(worst, norm(apply(a, apply(b, p)) - apply(a.compose(b), p)));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("axis-angle round trip") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(1e-4, M_PI - 1e-4);
  for (int i = 0; i < 200; ++i) {
    Vec3 axis{gauss(rng), gauss(rng), gauss(rng)};
    const Vec3 aa = normalized(axis) * uni(rng);
    const Vec3 back = axis_angle_from_rotation(rotation_from_axis_angle(aa));
    CHECK(norm(back - aa) < 1e-8);
  }
}

TEST_CASE("project: pinhole basics") {
  const Camera cam = test_camera();
  const Pixel pp = project(cam, {0, 0, 1});
  CHECK(pp.u == doctest::Approx(50));
  CHECK(pp.v == doctest::Approx(50));

  const Pixel q = project(cam, {0.5, 0, 1});
  CHECK(q.u == doctest::Approx(100));
  CHECK(q.v == doctest::Approx(50));

  Camera flipped = test_camera();
  flipped.cam_to_world.rotation = rotation_from_axis_angle({0, M_PI, 0});
  CHECK_THROWS_AS(project(flipped, {0, 0, 1}), BehindCamera);
}

TEST_CASE("cast_ray: direction and round trip") {
  const Camera cam = test_camera();
  const Ray center = cast_ray(cam, {50, 50});
  CHECK(norm(center.direction - cam.forward()) < 1e-12);

  const Ray corner = cast_ray(cam, {0, 0});
  CHECK(norm(corner.direction - normalized(Vec3{-0.5, -0.5, 1})) < 1e-12);

  CHECK_THROWS_AS(cast_ray(cam, {150, 10}), OutOfBounds);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uni(0.0, 99.999);
  Camera moved = test_camera();
  moved.cam_to_world = ScaledRigid{rotation_from_axis_angle({0.3, -0.2, 0.5}), {1, 2, 3}, 1.0};
  double worst = 0;
  for (int i = 0; i < 500; ++i) {
    const Pixel px{uni(rng), uni(rng)};
    const Ray ray = cast_ray(moved, px);
    const Pixel back = project(moved, ray.at(0.5 * (ray.near + ray.far)));
    worst = std::max({worst, std::abs(back.u - px.u), std::abs(back.v - px.v)});
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("sphere intersection") {
  Ray ray;
  ray.origin = {-5, 0, 0};
  ray.direction = {1, 0, 0};
  double t0, t1;
  REQUIRE(intersect_sphere(ray, {0, 0, 0}, 2.0, t0, t1));
  CHECK(t0 == doctest::Approx(3));
  CHECK(t1 == doctest::Approx(7));
  ray.origin = {-5, 3, 0};
  CHECK_FALSE(intersect_sphere(ray, {0, 0, 0}, 2.0, t0, t1));
}

TEST_CASE("scaled rigid validity") {
  ScaledRigid good = ScaledRigid::identity();
  CHECK(good.valid());
  ScaledRigid bad = good;
  bad.rotation(0, 0) = 1.1;
  CHECK_FALSE(bad.valid());
  bad = good;
  bad.scale = -1;
  CHECK_FALSE(bad.valid());
}

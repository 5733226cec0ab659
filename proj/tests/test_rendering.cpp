#include <random>

#include "doctest.h"
#include "holdfield/rendering.hpp"

using namespace holdfield;

namespace {

// Solid sphere entity with a flat color.
EntityField sphere_entity(const Vec3& center, double radius, const Vec3& color) {
  return EntityField{[=](const Vec3& x) { return FieldSample{norm(x - center) - radius, color}; }};
}

BackgroundFieldFn wall_background(const Vec3& color, double far_wall) {
  return BackgroundFieldFn{
      [=](const Vec3& x, const Vec3&) { return FieldSample{far_wall - norm(x), color}; }};
}

Ray axis_ray(double near = 0.05, double far = 100.0) {
  Ray ray;
  ray.origin = {-8, 0, 0};
  ray.direction = {1, 0, 0};
  ray.near = near;
  ray.far = far;
  return ray;
}

}  // namespace

TEST_CASE("sdf_to_density: Laplace CDF values") {
  CHECK(sdf_to_density(0.0, 1.0, 0.1) == doctest::Approx(0.5));
  CHECK(sdf_to_density(10.0, 1.0, 0.1) == doctest::Approx(0.0));
  CHECK(sdf_to_density(-10.0, 2.5, 0.1) == doctest::Approx(2.5));
  CHECK(sdf_to_density(0.1 * std::log(2.0), 1.0, 0.1) == doctest::Approx(0.25));
  // Monotone decreasing in d.
  double prev = 1e30;
  for (double d = -1.0; d <= 1.0; d += 0.01) {
    const double s = sdf_to_density(d, 1.0, 0.1);
    CHECK(s <= prev + 1e-15);
    CHECK(s >= 0.0);
    prev = s;
  }
}

TEST_CASE("sample_ray: contracts") {
  Ray ray = axis_ray(2.0, 10.0);
  SamplerConfig cfg;
  cfg.count = 64;

  SUBCASE("empty scene reduces to stratified coverage") {
    const auto depths = sample_ray(ray, [](double) { return 0.0; }, cfg);
    REQUIRE((int)depths.size() == 64);
    for (size_t i = 1; i < depths.size(); ++i) CHECK(depths[i] > depths[i - 1]);
    CHECK(depths.front() >= 2.0);
    CHECK(depths.back() <= 10.0);
    double max_gap = 0;
    for (size_t i = 1; i < depths.size(); ++i)
      max_gap = std::max(max_gap, depths[i] - depths[i - 1]);
    CHECK(max_gap < 2.0 * 8.0 / 64.0);
  }

  SUBCASE("opaque wall concentrates samples") {
    Ray wall_ray = axis_ray(4.0, 8.0);
    const double t_star = 6.0, alpha2 = 0.1;
    // Solid half-space beyond t*: sdf decreases through zero at the wall.
    auto sigma = [&](double t) { return sdf_to_density(t_star - t, 20.0, alpha2); };
    const auto depths = sample_ray(wall_ray, [&](double t) { return sigma(t); }, cfg);
    REQUIRE((int)depths.size() == 64);
    int close = 0;
    for (double t : depths) close += std::abs(t - t_star) <= 3 * alpha2 ? 1 : 0;
    CHECK(close >= 32);
  }

  SUBCASE("exact count for odd budgets") {
    cfg.count = 37;
    const auto depths = sample_ray(ray, [](double t) { return std::sin(t) > 0 ? 1.0 : 0.0; }, cfg);
    CHECK((int)depths.size() == 37);
    for (size_t i = 1; i < depths.size(); ++i) CHECK(depths[i] > depths[i - 1]);
  }
}

TEST_CASE("conservation: tau sum plus residual is one") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  RenderScene scene;
  scene.sampler.count = 32;
  scene.r_bg = 3.0;
  scene.hand = sphere_entity({0, 0.2, 0}, 1.0, {1, 0, 0});
  scene.object = sphere_entity({0.5, -0.3, 0}, 0.8, {0, 1, 0});
  scene.background = wall_background({0, 0, 1}, 30.0);
  scene.density = {uni(rng) * 30 + 1, uni(rng) * 0.2 + 0.01};

  double worst_tau = 0, worst_s = 0;
  for (int i = 0; i < 2000; ++i) {
    Ray ray;
    ray.origin = Vec3{uni(rng) * 2 - 1, uni(rng) * 2 - 1, uni(rng) * 2 - 1} * 6.0;
    Vec3 target{uni(rng) - 0.5, uni(rng) - 0.5, uni(rng) - 0.5};
    ray.direction = normalized(target - ray.origin);
    ray.near = 0.05;
    ray.far = 100.0;
    RaySamples dump;
    const RenderOutput out = render_pixel(scene, ray, &dump, i);
    double exponent = 0, tau_sum = 0, trans = 1;
    for (size_t k = 0; k < dump.t.size(); ++k) {
      const double a = 1.0 - std::exp(-dump.sigma[k] * dump.delta[k]);
      tau_sum += trans * a;
      trans *= std::exp(-dump.sigma[k] * dump.delta[k]);
      exponent += dump.sigma[k] * dump.delta[k];
    }
    worst_tau = std::max(worst_tau, std::abs(tau_sum + std::exp(-exponent) - 1.0));
    CHECK(out.m_f == doctest::Approx(tau_sum).epsilon(1e-9));
    const double s_sum = out.class_probs.x + out.class_probs.y + out.class_probs.z;
    worst_s = std::max(worst_s, std::abs(s_sum - 1.0));
    CHECK(out.m_f >= 0.0);
    CHECK(out.m_f <= 1.0 + 1e-9);
    CHECK(out.m_h >= 0.0);
    CHECK(out.m_o >= 0.0);
  }
  CHECK(worst_tau < 1e-6);
  CHECK(worst_s < 1e-4);
}

TEST_CASE("merge correctness: composite equals single concatenated entity") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    EntitySamples<double> a, b;
    a.entity = 0;
    b.entity = 1;
    const int na = 3 + (int)(uni(rng) * 6), nb = 3 + (int)(uni(rng) * 6);
    double t = 0.5;
    for (int i = 0; i < na; ++i) {
      t += uni(rng);
      a.t.push_back(t);
      a.sigma.push_back(uni(rng) * 3);
      a.color.push_back({uni(rng), uni(rng), uni(rng)});
    }
    t = 0.7;
    for (int i = 0; i < nb; ++i) {
      t += uni(rng);
      b.t.push_back(t);
      b.sigma.push_back(uni(rng) * 3);
      b.color.push_back({uni(rng), uni(rng), uni(rng)});
    }
    const double far = 15.0;
    const auto merged_out = composite<double>({&a, &b}, far);

    EntitySamples<double> single;
    single.entity = 0;
    struct Ref {
      double t, sigma;
      std::array<double, 3> c;
    };
    std::vector<Ref> refs;
    for (int i = 0; i < na; ++i) refs.push_back({a.t[i], a.sigma[i], a.color[i]});
    for (int i = 0; i < nb; ++i) refs.push_back({b.t[i], b.sigma[i], b.color[i]});
    std::stable_sort(refs.begin(), refs.end(), [](const Ref& x, const Ref& y) { return x.t < y.t; });
    for (const auto& r : refs) {
      single.t.push_back(r.t);
      single.sigma.push_back(r.sigma);
      single.color.push_back(r.c);
    }
    const auto single_out = composite<double>({&single}, far);
    for (int c = 0; c < 3; ++c)
      CHECK(std::abs(merged_out.color[c] - single_out.color[c]) < 1e-9);
    CHECK(std::abs(merged_out.weight_sum - single_out.weight_sum) < 1e-9);
    CHECK(std::abs(merged_out.residual - single_out.residual) < 1e-9);
  }
}

TEST_CASE("render_pixel: opaque hand sphere dominates") {
  RenderScene scene;
  scene.sampler.count = 64;
  scene.density = {40.0, 0.02};
  scene.hand = sphere_entity({0, 0, 0}, 1.0, {0.8, 0.2, 0.1});
  scene.background = wall_background({0, 0, 1}, 30.0);
  const RenderOutput out = render_pixel(scene, axis_ray());
  CHECK(out.m_f >= 0.99);
  CHECK(out.color.x == doctest::Approx(0.8).epsilon(0.02));
  CHECK(out.class_probs.x > 0.98);
}

TEST_CASE("render_pixel: empty foreground shows the background") {
  RenderScene scene;
  scene.sampler.count = 32;
  scene.density = {40.0, 0.02};
  scene.hand = EntityField{[](const Vec3&) { return FieldSample{1e3, {1, 1, 1}}; }};
  scene.background = wall_background({0.2, 0.4, 0.6}, 30.0);
  const RenderOutput out = render_pixel(scene, axis_ray());
  CHECK(out.m_f < 1e-3);
  CHECK(std::abs(out.color.x - 0.2) < 1e-3);
  CHECK(std::abs(out.color.y - 0.4) < 1e-3);
  CHECK(std::abs(out.color.z - 0.6) < 1e-3);
}

TEST_CASE("render_pixel: occlusion ordering and amodal modes") {
  RenderScene scene;
  scene.sampler.count = 64;
  scene.density = {60.0, 0.01};
  // Object slab in x [-1, -0.5] occludes the hand sphere behind it at +0.5.
  scene.object = EntityField{[](const Vec3& x) {
    return FieldSample{std::max(-1.0 - x.x, x.x + 0.5), {0, 1, 0}};
  }};
  scene.hand = sphere_entity({0.5, 0, 0}, 0.4, {1, 0, 0});
  scene.background = wall_background({0, 0, 1}, 30.0);
  Ray ray = axis_ray();
  ray.far = 50;

  const RenderOutput occ = render_pixel(scene, ray);
  CHECK(occ.m_o > 0.95);
  CHECK(occ.m_h < 0.05);
  CHECK(occ.class_probs.y > 0.9);
  CHECK(occ.class_probs.x < 0.05);

  scene.amodal = AmodalMode::Independent;
  const RenderOutput ind = render_pixel(scene, ray);
  CHECK(ind.m_o > 0.95);
  CHECK(ind.m_h > 0.9);  // amodal: unoccluded hand mass
}

TEST_CASE("render_image: matches render_pixel and is order independent") {
  RenderScene scene;
  scene.sampler.count = 16;
  scene.density = {40.0, 0.02};
  scene.hand = sphere_entity({0, 0, 0}, 1.0, {0.7, 0.3, 0.2});
  scene.background = wall_background({0.1, 0.2, 0.3}, 30.0);

  Camera cam;
  cam.fx = cam.fy = 10;
  cam.cx = cam.cy = 0.5;
  cam.width = cam.height = 1;
  cam.cam_to_world.translation = {0, 0, -8};

  const ImageChannels img = render_image(scene, cam);
  const RenderOutput px = render_pixel(scene, cast_ray(cam, {0.5, 0.5}), nullptr, 0);
  CHECK(norm(img.color[0] - px.color) < 1e-12);
  CHECK(img.m_f[0] == doctest::Approx(px.m_f).epsilon(1e-12));

  Camera cam2 = cam;
  cam2.width = cam2.height = 8;
  cam2.cx = cam2.cy = 4;
  const std::vector<int> subset{3, 17, 42, 63};
  const std::vector<int> permuted{63, 3, 42, 17};
  const ImageChannels a = render_image(scene, cam2, &subset);
  const ImageChannels b = render_image(scene, cam2, &permuted);
  CHECK(norm(a.color[0] - b.color[1]) == 0.0);
  CHECK(norm(a.color[2] - b.color[2]) == 0.0);
  CHECK(norm(a.color[3] - b.color[0]) == 0.0);
}

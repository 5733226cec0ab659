#include <random>

#include "doctest.h"
#include "holdfield/skeleton.hpp"

using namespace holdfield;

namespace {

const Skeleton& hand() {
  static const Skeleton sk = Skeleton::default_hand();
  return sk;
}

Skeleton two_bone_chain() {
  std::vector<BoneSpec> bones(2);
  bones[0].parent = -1;
  bones[0].rest_offset = {0, 0, 0};
  bones[0].tip_offset = {1, 0, 0};
  bones[0].radius = 0.2;
  bones[0].ring_segments = 8;
  bones[1].parent = 0;
  bones[1].rest_offset = {1, 0, 0};
  bones[1].tip_offset = {1, 0, 0};
  bones[1].radius = 0.2;
  bones[1].ring_segments = 8;
  return Skeleton(std::move(bones), 2);
}

ScaledRigid random_rigid(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  ScaledRigid t;
  Vec3 axis{gauss(rng), gauss(rng), gauss(rng)};
  t.rotation = rotation_from_axis_angle(normalized(axis) * std::abs(gauss(rng)));
  t.translation = {gauss(rng), gauss(rng), gauss(rng)};
  return t;
}

}  // namespace

TEST_CASE("forward kinematics: rest pose is identity") {
  const Skeleton& sk = hand();
  const auto bones = forward_kinematics(sk, HandState::rest(sk.bone_count()));
  for (const auto& b : bones) {
    CHECK(norm(b.translation) < 1e-12);
    CHECK(norm(apply(b, {0.3, -0.2, 0.9}) - Vec3{0.3, -0.2, 0.9}) < 1e-12);
  }
}

TEST_CASE("forward kinematics: root translation propagates") {
  const Skeleton& sk = hand();
  HandState hs = HandState::rest(sk.bone_count());
  hs.root.translation = {0, 0, 5};
  const auto bones = forward_kinematics(sk, hs);
  for (const auto& b : bones)
    CHECK(norm(apply(b, {1, 2, 3}) - Vec3{1, 2, 8}) < 1e-12);
}

TEST_CASE("forward kinematics: child rotation about its joint") {
  const Skeleton sk = two_bone_chain();
  HandState hs = HandState::rest(2);
  hs.theta[1] = {0, 0, M_PI / 2};
  const auto bones = forward_kinematics(sk, hs);
  CHECK(norm(apply(bones[1], {2, 0, 0}) - Vec3{1, 1, 0}) < 1e-12);
}

TEST_CASE("skin weights: single bone and vertex dominance") {
  std::vector<BoneSpec> one(1);
  one[0].parent = -1;
  one[0].tip_offset = {1, 0, 0};
  one[0].ring_segments = 8;
  const Skeleton single(std::move(one), 4);
  const auto w = skin_weights(single, {4, 5, 6});
  REQUIRE(w.size() == 1);
  CHECK(w[0] == doctest::Approx(1.0));

  const Skeleton& sk = hand();
  const Vec3 v = sk.template_mesh().vertices[100];
  const auto wv = skin_weights(sk, v);
  const auto& expect = sk.template_weights()[100];
  for (int b = 0; b < sk.bone_count(); ++b) CHECK(std::abs(wv[b] - expect[b]) < 1e-4);
}

TEST_CASE("skin weights: midpoint of two distant one-hot vertices") {
  // Two far-apart bones so template weights are effectively one-hot; the
  // facing cap apexes are the two nearest vertices of their midpoint.
  std::vector<BoneSpec> bones(2);
  bones[0].parent = -1;
  bones[0].rest_offset = {-4, 0, 0};
  bones[0].tip_offset = {3, 0, 0};
  bones[0].radius = 0.25;
  bones[0].ring_segments = 10;
  bones[1].parent = 0;
  bones[1].rest_offset = {8, 0, 0};
  bones[1].tip_offset = {-3, 0, 0};
  bones[1].radius = 0.25;
  bones[1].ring_segments = 10;
  const Skeleton sk(std::move(bones), 2);
  const auto w = skin_weights(sk, {0, 0, 0});
  CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-4));
  CHECK(w[1] == doctest::Approx(0.5).epsilon(1e-4));
}

TEST_CASE("weight partition of unity") {
  const Skeleton& sk = hand();
  const HandState hs = HandState::rest(sk.bone_count());
  const PosedHand posed = pose_hand(sk, hs);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> gauss(0.0, 1.2);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto w = skin_weights(posed, {gauss(rng), gauss(rng), gauss(rng)});
    double sum = 0;
    for (double x : w) {
      CHECK(x >= 0.0);
      sum += x;
    }
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("inverse lbs: rigid cases") {
  const Skeleton& sk = hand();
  std::mt19937_64 rng(23);

  // Rest pose: identity map.
  const PosedHand rest = pose_hand(sk, HandState::rest(sk.bone_count()));
  CHECK(norm(inverse_lbs(rest, {0.4, 0.1, 0.2}) - Vec3{0.4, 0.1, 0.2}) < 1e-12);

  // All bones share the root transform when theta = 0: exact rigid inverse.
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    HandState hs = HandState::rest(sk.bone_count());
    hs.root = random_rigid(rng);
    const PosedHand posed = pose_hand(sk, hs);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const Vec3 p{gauss(rng), gauss(rng), gauss(rng)};
    worst = std::max(worst, norm(inverse_lbs(posed, p) - inverse_apply(hs.root, p)));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("inverse lbs: blended translation example") {
  std::vector<ScaledRigid> bones(2);
  bones[1].translation = {0, 0, 2};
  const auto blend = blend_transforms(bones, {0.5, 0.5});
  CHECK(norm(invert_blended(blend, {0, 0, 1}) - Vec3{0, 0, 0}) < 1e-12);
}

TEST_CASE("singular blend raises") {
  std::vector<ScaledRigid> bones(2);
  bones[0].rotation = rotation_from_axis_angle({0, 0, M_PI});
  // Average of R(pi) about z and identity collapses the xy plane.
  const auto blend = blend_transforms(bones, {0.5, 0.5});
  CHECK_THROWS_AS(invert_blended(blend, {1, 1, 1}), SingularBlend);
}

TEST_CASE("forward lbs basics and round trip") {
  const Skeleton& sk = hand();
  HandState hs = HandState::rest(sk.bone_count());
  const auto rest_tf = forward_kinematics(sk, hs);
  CHECK(norm(forward_lbs(rest_tf, skin_weights(sk, {0.2, 0.1, 0}), {0.2, 0.1, 0}) -
             Vec3{0.2, 0.1, 0}) < 1e-12);

  std::mt19937_64 rng(29);
  hs.theta[2] = {0.3, -0.2, 0.4};
  hs.root = random_rigid(rng);
  const auto tf = forward_kinematics(sk, hs);
  std::vector<double> one_hot(sk.bone_count(), 0.0);
  one_hot[2] = 1.0;
  const Vec3 p{0.1, 0.3, -0.2};
  CHECK(norm(forward_lbs(tf, one_hot, p) - apply(tf[2], p)) < 1e-12);

  // Single-bone skeleton: forward then inverse is exact.
  std::vector<BoneSpec> one(1);
  one[0].parent = -1;
  one[0].tip_offset = {1, 0, 0};
  one[0].ring_segments = 8;
  const Skeleton single(std::move(one), 2);
  HandState shs = HandState::rest(1);
  shs.root = random_rigid(rng);
  const PosedHand posed = pose_hand(single, shs);
  const Vec3 q{0.5, -0.3, 0.8};
  const Vec3 moved = forward_lbs(posed.bone_tf, {1.0}, q);
  CHECK(norm(inverse_lbs(posed, moved) - q) < 1e-9);
}

TEST_CASE("surface fidelity round trip is bounded (reported)") {
  const Skeleton& sk = hand();
  HandState hs = HandState::rest(sk.bone_count());
  hs.theta[1] = {0, 0, -0.5};
  hs.theta[2] = {0, 0, -0.4};
  hs.theta[3] = {0, 0, 0.5};
  const PosedHand posed = pose_hand(sk, hs);
  double worst = 0;
  for (size_t v = 0; v < sk.template_mesh().vertices.size(); v += 7) {
    const Vec3 can = sk.template_mesh().vertices[v];
    const Vec3 moved = forward_lbs(posed.bone_tf, sk.template_weights()[v], can);
    try {
      worst = std::max(worst, norm(inverse_lbs(posed, moved) - can));
    } catch (const SingularBlend&) {
    }
  }
  MESSAGE("inverse-LBS surface round-trip bound: ", worst);
  CHECK(worst < 0.5);  // not zero for multi-bone blends; guards regressions
}

TEST_CASE("template sdf: surface, axis and far-field") {
  const Skeleton& sk = hand();
  const std::vector<double> ones(sk.bone_count(), 1.0);

  // On-surface vertex.
  CHECK(std::abs(sk.template_sdf(sk.template_mesh().vertices[42])) < 1e-6);

  // Bone-axis midpoints read minus the capsule radius.
  for (int bone : {0, 1, 2}) {
    Vec3 a, b;
    double r;
    sk.bone_capsule(bone, ones, a, b, r);
    const Vec3 mid = (a + b) * 0.5;
    CHECK(sk.template_sdf(mid) == doctest::Approx(-r).epsilon(1e-3 / r));
  }

  // Far point: between D - R and D (triangle inequality against the
  // template's bounding sphere around the origin).
  double bound_r = 0;
  for (const auto& v : sk.template_mesh().vertices) bound_r = std::max(bound_r, norm(v));
  const Vec3 far{40, 25, -30};
  const double d = sk.template_sdf(far);
  CHECK(d >= norm(far) - bound_r - 1e-9);
  CHECK(d <= norm(far));
}

TEST_CASE("template sdf gradient is unit away from the medial axis") {
  const Skeleton& sk = hand();
  std::mt19937_64 rng(31);
  std::normal_distribution<double> gauss(0.0, 1.5);
  const double h = 1e-5;
  int checked = 0;
  for (int i = 0; i < 400 && checked < 100; ++i) {
    const Vec3 p{gauss(rng), gauss(rng), gauss(rng)};
    const double d = sk.template_sdf(p);
    if (d < 0.05) continue;  // outside only
    // Keep clear of the medial axis between bones.
    std::vector<double> dists;
    const std::vector<double> ones(sk.bone_count(), 1.0);
    for (int b = 0; b < sk.bone_count(); ++b) {
      Vec3 a, bb;
      double r;
      sk.bone_capsule(b, ones, a, bb, r);
      const Vec3 ab = bb - a;
      const double t = std::clamp(dot(p - a, ab) / norm2(ab), 0.0, 1.0);
      dists.push_back(norm(p - (a + ab * t)) - r);
    }
    std::sort(dists.begin(), dists.end());
    if (dists.size() > 1 && dists[1] - dists[0] < 0.1) continue;
    const Vec3 g{(sk.template_sdf({p.x + h, p.y, p.z}) - sk.template_sdf({p.x - h, p.y, p.z})),
                 (sk.template_sdf({p.x, p.y + h, p.z}) - sk.template_sdf({p.x, p.y - h, p.z})),
                 (sk.template_sdf({p.x, p.y, p.z + h}) - sk.template_sdf({p.x, p.y, p.z - h}))};
    CHECK(norm(g / (2 * h)) == doctest::Approx(1.0).epsilon(1e-3));
    ++checked;
  }
  CHECK(checked >= 50);
}

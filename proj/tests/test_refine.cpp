#include <random>

#include "doctest.h"
#include "holdfield/harness.hpp"

using namespace holdfield;

namespace {

// Small shared scene: 4 frames, 32x32, tips resting on the object.
SceneScript small_script() {
  SceneScript s;
  s.frames = 4;
  s.width = 32;
  s.height = 32;
  s.seed = 5;
  s.focal_px = 50.0;
  s.cloud_count = 512;
  s.cloud_noise = 0.0;
  return s;
}

struct RefineFixture {
  SceneDataset ds;
  TrainConfig cfg;
  RefineFixture(const SceneScript& script) {
    ds = gen_scene(script);
    cfg.seed = 11;
  }
};

// The zero-noise fixture is shared; tests copy the state they mutate.
const RefineFixture& shared_fixture() {
  static const RefineFixture fx(small_script());
  return fx;
}

RefineProblem make_problem(const SceneDataset& ds, TrainState& state) {
  RefineProblem prob;
  prob.skeleton = state.skeleton.get();
  prob.scene = state.scene;
  prob.params = &state.params;
  prob.contact.tip_vertex_ids = state.skeleton->tip_vertex_ids();
  prob.cloud_canonical = ds.cloud_canonical;
  for (int f = 0; f < ds.n_frames; ++f) {
    RefineFrameData fd;
    fd.camera = ds.cameras[f];
    fd.labels = ds.labels[f].pixels;
    fd.joints2d = ds.joints2d[f];
    fd.cloud2d = ds.cloud2d[f];
    prob.frames.push_back(std::move(fd));
  }
  return prob;
}

// Ground-truth object mesh expressed in the engine's canonical (normalized
// cloud) frame; exact when the cloud is noise free.
TriMesh gt_mesh_engine_canonical(const SceneDataset& ds, double cloud_scale) {
  TriMesh mesh = gt_object_mesh_canonical(ds);
  for (auto& v : mesh.vertices) v *= cloud_scale / ds.norm_scale;
  return mesh;
}

Vec3 object_center_world(const SceneParams& sp, const ParamSet& params, int frame) {
  return sp.object_state(params, frame).to_world.translation;
}

}  // namespace

TEST_CASE("loss_contact: exact values and brute-force equality") {
  TriMesh hand;
  hand.vertices = {{0, 0, 1}, {5, 5, 5}};
  hand.faces = {{0, 1, 0}};
  TriMesh object;
  object.vertices = {{0, 0, 0}, {2, 0, 0}, {0, 3, 0}};
  object.faces = {{0, 1, 2}};

  ContactSpec spec;
  spec.tip_vertex_ids = {0};
  CHECK(loss_contact(hand, object, spec) == doctest::Approx(1.0));

  // Tip coinciding with an object vertex contributes zero.
  hand.vertices[0] = {2, 0, 0};
  CHECK(loss_contact(hand, object, spec) == doctest::Approx(0.0));

  // Random tips vs a 100-vertex mesh equal the O(n*m) double loop.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  TriMesh cloud;
  for (int i = 0; i < 100; ++i) cloud.vertices.push_back({gauss(rng), gauss(rng), gauss(rng)});
  cloud.faces = {{0, 1, 2}};
  TriMesh tips;
  for (int i = 0; i < 3; ++i) tips.vertices.push_back({gauss(rng), gauss(rng), gauss(rng)});
  tips.faces = {{0, 1, 2}};
  ContactSpec spec3;
  spec3.tip_vertex_ids = {0, 1, 2};
  double brute = 0;
  for (int i = 0; i < 3; ++i) {
    double best = 1e30;
    for (const auto& v : cloud.vertices) best = std::min(best, norm(tips.vertices[i] - v));
    brute += best;
  }
  CHECK(loss_contact(tips, cloud, spec3) == doctest::Approx(brute).epsilon(1e-12));
}

TEST_CASE("soft_rasterize: interior saturation and falloff") {
  TriMesh tri;
  tri.vertices = {{-3, -3, 5}, {3, -3, 5}, {0, 4, 5}};
  tri.faces = {{0, 1, 2}};
  Camera cam;
  cam.fx = cam.fy = 20;
  cam.cx = cam.cy = 32;
  cam.width = cam.height = 64;

  const GrayImage img = soft_rasterize(tri, cam, 1e-3, 64);
  // The projected triangle covers the image center.
  CHECK(img.at(32, 32) > 0.999);
  CHECK(img.at(2, 2) < 1e-3);

  TriMesh degenerate;
  degenerate.vertices = {{0, 0, 5}, {0, 0, 5}, {0, 0, 5}};
  degenerate.faces = {{0, 1, 2}};
  CHECK_THROWS_AS(soft_rasterize(degenerate, cam, 1e-2, 32), DegenerateMesh);
}

TEST_CASE("loss_mask: occlusion-aware exclusion") {
  const int res = 8;
  GrayImage hand_sil, object_sil;
  hand_sil.width = hand_sil.height = res;
  object_sil.width = object_sil.height = res;
  hand_sil.values.assign(res * res, 0.0);
  object_sil.values.assign(res * res, 0.0);
  std::vector<uint8_t> labels(res * res, 0);
  // Left half: hand; right half: object.
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      labels[y * res + x] = x < res / 2 ? 1 : 2;
      hand_sil.values[y * res + x] = x < res / 2 ? 1.0 : 0.123;  // excluded region
      object_sil.values[y * res + x] = x >= res / 2 ? 1.0 : 0.0;
    }
  CHECK(loss_mask(hand_sil, object_sil, labels, res, res) == doctest::Approx(0.0));

  // Values on excluded pixels never matter.
  GrayImage noisy = hand_sil;
  for (int y = 0; y < res; ++y)
    for (int x = res / 2; x < res; ++x) noisy.values[y * res + x] = 0.987;
  CHECK(loss_mask(noisy, object_sil, labels, res, res) ==
        doctest::Approx(loss_mask(hand_sil, object_sil, labels, res, res)));

  // Uniform 0.5 silhouette against a checkerboard on valid pixels: 0.5 each.
  GrayImage half;
  half.width = half.height = res;
  half.values.assign(res * res, 0.5);
  std::vector<uint8_t> checker(res * res);
  for (int i = 0; i < res * res; ++i) checker[i] = i % 2 ? 1 : 0;
  CHECK(loss_mask(half, half, checker, res, res) == doctest::Approx(1.0));  // 0.5 + 0.5
}

TEST_CASE("loss_reproj: zero, uniform shift, recomputation") {
  Camera cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 50;
  cam.width = cam.height = 100;
  std::vector<Vec3> pts{{0, 0, 5}, {0.5, -0.3, 4}, {-0.2, 0.4, 6}};
  std::vector<Pixel> targets;
  for (const auto& p : pts) targets.push_back(project(cam, p));
  CHECK(loss_reproj(pts, targets, cam) == doctest::Approx(0.0));

  std::vector<Pixel> shifted = targets;
  for (auto& t : shifted) { t.u += 2.0; }
  CHECK(loss_reproj(pts, shifted, cam) == doctest::Approx(2.0));

  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss(0.0, 3.0);
  std::vector<Pixel> random_targets = targets;
  double manual = 0;
  for (size_t i = 0; i < random_targets.size(); ++i) {
    const double du = gauss(rng), dv = gauss(rng);
    random_targets[i].u += du;
    random_targets[i].v += dv;
    manual += std::hypot(du, dv);
  }
  manual /= (double)pts.size();
  CHECK(loss_reproj(pts, random_targets, cam) == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("align_init: fixed point on the aligned scene") {
  const RefineFixture& fx = shared_fixture();
  TrainState state = init_train_state(fx.ds, fx.cfg);
  const std::vector<double> before = state.params.values;
  RefineProblem prob = make_problem(fx.ds, state);
  const RefineResult res = align_init(prob);
  double worst = 0;
  const SceneParams& sp = state.scene;
  for (int f = 0; f < fx.ds.n_frames; ++f)
    for (int i = 0; i < 3; ++i) {
      worst = std::max(worst, std::abs(state.params.values[sp.t_h_offset(state.params, f) + i] -
                                       before[sp.t_h_offset(state.params, f) + i]));
      worst = std::max(worst, std::abs(state.params.values[sp.t_o_offset(state.params, f) + i] -
                                       before[sp.t_o_offset(state.params, f) + i]));
    }
  worst = std::max(worst, std::abs(state.params.values[sp.log_s_offset(state.params)] -
                                   before[sp.log_s_offset(state.params)]));
  MESSAGE("align fixed-point drift: ", worst, " energies: ", res.energies.front(), " -> ",
          res.energies.back());
  CHECK(worst < 1e-4);
  // Monotone energy trace.
  for (size_t i = 1; i < res.energies.size(); ++i)
    CHECK(res.energies[i] <= res.energies[i - 1] + 1e-12);
}

TEST_CASE("align_init: recovers a cloud-scale mismatch within 5 percent") {
  SceneScript base = small_script();
  RefineFixture ref(base);
  const double s_true = ref.ds.init_poses[0].object.scale;  // zero noise: ground truth

  SceneScript scaled = base;
  scaled.cloud_scale = 2.0;
  RefineFixture fx(scaled);
  TrainState state = init_train_state(fx.ds, fx.cfg);
  const double s_init = fx.ds.init_poses[0].object.scale;
  CHECK(s_init == doctest::Approx(2.0 * s_true).epsilon(0.02));  // the planted error

  RefineProblem prob = make_problem(fx.ds, state);
  prob.max_iterations = 150;
  align_init(prob);
  const double s_rec =
      std::exp(state.params.values[state.scene.log_s_offset(state.params)]);
  MESSAGE("scale: true ", s_true, " init ", s_init, " recovered ", s_rec);
  CHECK(std::abs(s_rec - s_true) / s_true < 0.05);
}

TEST_CASE("align_init: pulls a displaced hand back into contact") {
  const RefineFixture& fx = shared_fixture();
  TrainState state = init_train_state(fx.ds, fx.cfg);
  const SceneParams& sp = state.scene;
  // Displace the hand 3 units away from the object in every frame.
  for (int f = 0; f < fx.ds.n_frames; ++f)
    state.params.values[sp.t_h_offset(state.params, f)] -= 3.0;

  RefineProblem prob = make_problem(fx.ds, state);
  prob.max_iterations = 200;
  align_init(prob);

  // Tip distance to the true object surface after alignment.
  AnalyticShape obj = fx.ds.gt_object_shape;
  obj.to_world = fx.ds.gt_poses[0].object;
  double worst = 0;
  for (int f = 0; f < fx.ds.n_frames; ++f) {
    const PosedHand posed = pose_hand(*state.skeleton, sp.hand_state(state.params, f));
    double best = 1e30;
    for (int tip : state.skeleton->tip_vertex_ids())
      best = std::min(best, analytic_sdf(obj, posed.mesh.vertices[tip]));
    worst = std::max(worst, best);
  }
  MESSAGE("post-align worst tip-to-surface distance: ", worst);
  CHECK(worst < 0.2);
}

TEST_CASE("refine_poses: fixed point at ground truth") {
  const RefineFixture& fx = shared_fixture();
  TrainState state = init_train_state(fx.ds, fx.cfg);
  const std::vector<double> before = state.params.values;
  RefineProblem prob = make_problem(fx.ds, state);
  prob.object_mesh_canonical = gt_mesh_engine_canonical(fx.ds, 1.0);
  prob.max_iterations = 30;
  const RefineResult res = refine_poses(prob);
  double worst = 0;
  const SceneParams& sp = state.scene;
  for (int f = 0; f < fx.ds.n_frames; ++f) {
    for (int i = 0; i < 3; ++i) {
      worst = std::max(worst, std::abs(state.params.values[sp.t_h_offset(state.params, f) + i] -
                                       before[sp.t_h_offset(state.params, f) + i]));
      worst = std::max(worst, std::abs(state.params.values[sp.t_o_offset(state.params, f) + i] -
                                       before[sp.t_o_offset(state.params, f) + i]));
      worst = std::max(worst, std::abs(state.params.values[sp.rot_h_offset(state.params, f) + i] -
                                       before[sp.rot_h_offset(state.params, f) + i]));
      worst = std::max(worst, std::abs(state.params.values[sp.rot_o_offset(state.params, f) + i] -
                                       before[sp.rot_o_offset(state.params, f) + i]));
    }
  }
  MESSAGE("refine zero-perturbation pose drift: ", worst);
  CHECK(worst < 1e-3);
  for (size_t i = 1; i < res.energies.size(); ++i)
    CHECK(res.energies[i] <= res.energies[i - 1] + 1e-12);
}

TEST_CASE("refine_poses: recovers a large object translation") {
  const RefineFixture& fx = shared_fixture();
  TrainState state = init_train_state(fx.ds, fx.cfg);
  const SceneParams& sp = state.scene;
  for (int f = 0; f < fx.ds.n_frames; ++f)
    state.params.values[sp.t_o_offset(state.params, f) + 1] += 5.0;

  RefineProblem prob = make_problem(fx.ds, state);
  prob.object_mesh_canonical = gt_mesh_engine_canonical(fx.ds, 1.0);
  prob.max_iterations = 100;
  refine_poses(prob);
  double worst = 0;
  for (int f = 0; f < fx.ds.n_frames; ++f)
    worst = std::max(worst, norm(object_center_world(sp, state.params, f) -
                                 fx.ds.gt_poses[f].object.translation));
  MESSAGE("post-refine object translation error: ", worst);
  CHECK(worst < 0.5);
}

TEST_CASE("refine_poses: halves a depth-axis hand offset") {
  const RefineFixture& fx = shared_fixture();
  TrainState state = init_train_state(fx.ds, fx.cfg);
  const SceneParams& sp = state.scene;
  const Vec3 depth_axis = fx.ds.cameras[0].forward();
  for (int f = 0; f < fx.ds.n_frames; ++f)
    for (int i = 0; i < 3; ++i)
      state.params.values[sp.t_h_offset(state.params, f) + i] += 1.5 * depth_axis[i];

  auto relative_error_now = [&]() {
    double acc = 0;
    for (int f = 0; f < fx.ds.n_frames; ++f) {
      const Vec3 pred_rel = object_center_world(sp, state.params, f) -
                            pose_hand(*state.skeleton, sp.hand_state(state.params, f)).joints[0];
      const Vec3 gt_rel = fx.ds.gt_poses[f].object.translation -
                          pose_hand(*state.skeleton, fx.ds.gt_poses[f].hand).joints[0];
      acc += norm(pred_rel - gt_rel);
    }
    return acc / fx.ds.n_frames;
  };
  const double before = relative_error_now();
  RefineProblem prob = make_problem(fx.ds, state);
  prob.object_mesh_canonical = gt_mesh_engine_canonical(fx.ds, 1.0);
  prob.max_iterations = 100;
  refine_poses(prob);
  const double after = relative_error_now();
  MESSAGE("hand-relative object center error: ", before, " -> ", after);
  CHECK(after < 0.5 * before);
}

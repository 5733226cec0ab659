#include "holdfield/harness.hpp"

#include <atomic>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <thread>

#include "json.hpp"

namespace holdfield {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs_pretrain <= 0 || epochs_final <= 0 || epochs_pretrain > epochs_final)
    throw Error("train config: need 0 < epochs_pretrain <= epochs_final");
  if (steps_per_epoch <= 0 || images_per_step <= 0 || rays_per_image <= 0 ||
      samples_per_ray <= 0)
    throw Error("train config: sampling budgets must be positive");
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open config " + path);
  json j = json::parse(is);
  TrainConfig cfg;
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
  };
  get("epochs_pretrain", cfg.epochs_pretrain);
  get("epochs_final", cfg.epochs_final);
  get("steps_per_epoch", cfg.steps_per_epoch);
  get("images_per_step", cfg.images_per_step);
  get("rays_per_image", cfg.rays_per_image);
  get("samples_per_ray", cfg.samples_per_ray);
  get("background_samples", cfg.background_samples);
  get("eikonal_samples", cfg.eikonal_samples);
  get("sdf_samples", cfg.sdf_samples);
  get("mesh_refresh_epochs", cfg.mesh_refresh_epochs);
  get("checkpoint_every", cfg.checkpoint_every);
  get("seed", cfg.seed);
  get("optimize_poses", cfg.optimize_poses);
  get("lr_field", cfg.adam.lr_field);
  get("lr_pose", cfg.adam.lr_pose);
  get("clip_norm", cfg.adam.clip_norm);
  cfg.validate();
  return cfg;
}

void save_train_config(const TrainConfig& cfg, const std::string& path) {
  json j{{"epochs_pretrain", cfg.epochs_pretrain},
         {"epochs_final", cfg.epochs_final},
         {"steps_per_epoch", cfg.steps_per_epoch},
         {"images_per_step", cfg.images_per_step},
         {"rays_per_image", cfg.rays_per_image},
         {"samples_per_ray", cfg.samples_per_ray},
         {"background_samples", cfg.background_samples},
         {"eikonal_samples", cfg.eikonal_samples},
         {"sdf_samples", cfg.sdf_samples},
         {"mesh_refresh_epochs", cfg.mesh_refresh_epochs},
         {"checkpoint_every", cfg.checkpoint_every},
         {"seed", cfg.seed},
         {"optimize_poses", cfg.optimize_poses},
         {"lr_field", cfg.adam.lr_field},
         {"lr_pose", cfg.adam.lr_pose},
         {"clip_norm", cfg.adam.clip_norm}};
  std::ofstream os(path);
  if (!os) throw Error("cannot write config " + path);
  os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// scene generation
// ---------------------------------------------------------------------------

AnalyticShape script_object_shape(const SceneScript& script) {
  if (script.object_shape == "sphere") return AnalyticShape::sphere(script.object_radius);
  if (script.object_shape == "box") return AnalyticShape::box(script.object_half_extents);
  return AnalyticShape::capsule(script.object_half_length, script.object_radius);
}

AnalyticShape posed_hand_shape(const Skeleton& sk, const HandState& hs) {
  const auto bones = forward_kinematics(sk, hs);
  std::vector<AnalyticShape> capsules;
  for (int b = 0; b < sk.bone_count(); ++b) {
    Vec3 a, bb;
    double r;
    sk.bone_capsule(b, hs.beta, a, bb, r);
    const Vec3 pa = apply(bones[b], a), pb = apply(bones[b], bb);
    AnalyticShape cap = AnalyticShape::capsule(0.5 * norm(pb - pa), r);
    const Vec3 axis = norm(pb - pa) > 1e-12 ? normalized(pb - pa) : Vec3{0, 0, 1};
    // Frame with +z along the bone.
    Vec3 up = std::abs(axis.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{0, 1, 0};
    const Vec3 x = normalized(cross(up, axis));
    const Vec3 y = cross(axis, x);
    Mat3 rot;
    for (int i = 0; i < 3; ++i) {
      rot(i, 0) = x[i];
      rot(i, 1) = y[i];
      rot(i, 2) = axis[i];
    }
    cap.to_world.rotation = rot;
    cap.to_world.translation = (pa + pb) * 0.5;
    capsules.push_back(cap);
  }
  return AnalyticShape::union_of(std::move(capsules));
}

Vec3 hand_color(const Vec3& x) {
  return {0.72 + 0.18 * std::sin(2.1 * x.x + 0.7 * x.z),
          0.48 + 0.14 * std::sin(1.7 * x.y + 1.3),
          0.38 + 0.10 * std::sin(2.9 * x.z)};
}

Vec3 object_color(const Vec3& x) {
  return {0.25 + 0.15 * std::sin(4.0 * x.z),
          0.45 + 0.25 * std::sin(3.0 * x.x + 2.0),
          0.65 + 0.22 * std::sin(3.5 * x.y + 4.0)};
}

Vec3 background_color(const Vec3& d) {
  return {0.55 + 0.25 * std::sin(3.0 * d.x + 1.0) * std::cos(2.0 * d.z),
          0.45 + 0.20 * std::sin(2.0 * d.y + 2.0),
          0.35 + 0.15 * std::cos(3.0 * d.z + 0.5)};
}

namespace {

constexpr double kOracleAlpha1 = 40.0;
constexpr double kOracleAlpha2 = 0.02;

Camera make_orbit_camera(const SceneScript& s, int frame) {
  Camera cam;
  cam.fx = cam.fy = s.focal_px;
  cam.width = s.width;
  cam.height = s.height;
  cam.cx = 0.5 * s.width;
  cam.cy = 0.5 * s.height;
  const double phi = 2.0 * M_PI * frame / s.frames;
  const double elev = s.elevation_deg * M_PI / 180.0 * (frame % 2 == 0 ? 1.0 : -1.0);
  const Vec3 pos{s.orbit_radius * std::cos(phi) * std::cos(elev),
                 s.orbit_radius * std::sin(phi) * std::cos(elev),
                 s.orbit_radius * std::sin(elev)};
  const Vec3 forward = normalized(Vec3{0, 0, 0} - pos);
  Vec3 up{0, 0, 1};
  Vec3 right = cross(forward, up);
  if (norm(right) < 1e-9) right = {1, 0, 0};
  right = normalized(right);
  const Vec3 down = cross(forward, right);
  for (int i = 0; i < 3; ++i) {
    cam.cam_to_world.rotation(i, 0) = right[i];
    cam.cam_to_world.rotation(i, 1) = down[i];
    cam.cam_to_world.rotation(i, 2) = forward[i];
  }
  cam.cam_to_world.translation = pos;
  cam.cam_to_world.scale = 1.0;
  return cam;
}

// First surface hit by sphere tracing; returns depth or a negative value.
double sphere_trace(const AnalyticShape& shape, const Ray& ray, double t_max) {
  double t = std::max(ray.near, 0.0);
  for (int i = 0; i < 256 && t < t_max; ++i) {
    const double d = analytic_sdf(shape, ray.at(t));
    if (d < 1e-4) return t;
    t += std::max(d, 5e-4);
  }
  return -1.0;
}

HandState gt_hand_state(const SceneScript& script, const Skeleton& sk,
                        const AnalyticShape& object_world) {
  HandState hs = HandState::rest(sk.bone_count());
  // Two-bone finger chains curl around the object; chain on +y curls with
  // negative z rotation, the mirrored chain with positive.
  for (int b = 1; b < sk.bone_count(); ++b) {
    const double sy = sk.bones()[b].tip_offset.y >= 0 ? -1.0 : 1.0;
    hs.theta[b] = {0, 0, sy * script.hand_curl};
  }
  if (!script.hand_present) return hs;

  // Slide the hand along -x until the fingertips rest on the object surface.
  auto min_tip_sdf = [&](double tx) {
    hs.root.translation = {tx, 0, 0};
    const PosedHand posed = pose_hand(sk, hs);
    double best = 1e30;
    for (int tip : sk.tip_vertex_ids())
      best = std::min(best, analytic_sdf(object_world, posed.mesh.vertices[tip]));
    return best;
  };
  double lo = -script.orbit_radius, hi = 0.0;  // sdf(lo) > 0 > sdf(hi)
  if (min_tip_sdf(hi) > 0) hi = 1.0;
  for (int i = 0; i < 64; ++i) {
    const double mid = 0.5 * (lo + hi);
    (min_tip_sdf(mid) > 0 ? lo : hi) = mid;
  }
  hs.root.translation = {lo, 0, 0};
  return hs;
}

Mat3 small_rotation(std::mt19937_64& rng, double sigma_deg) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 axis{gauss(rng), gauss(rng), gauss(rng)};
  const double angle = gauss(rng) * sigma_deg * M_PI / 180.0;
  if (norm(axis) < 1e-12) return Mat3::identity();
  return rotation_from_axis_angle(normalized(axis) * angle);
}

}  // namespace

RenderScene oracle_scene(const SceneDataset& ds, int frame, const SamplerConfig& sampler) {
  if (!ds.has_gt) throw Error("oracle_scene requires ground truth");
  RenderScene scene;
  scene.sampler = sampler;
  scene.density = {kOracleAlpha1, kOracleAlpha2};
  scene.r_bg = ds.r_bg;

  const FramePoses& gt = ds.gt_poses[frame];
  const auto hand_shape = std::make_shared<AnalyticShape>(
      posed_hand_shape(*ds.skeleton, gt.hand));
  AnalyticShape obj = ds.gt_object_shape;
  obj.to_world = gt.object;
  const auto object_shape = std::make_shared<AnalyticShape>(obj);
  const ScaledRigid obj_pose = gt.object;

  scene.hand = EntityField{[hand_shape](const Vec3& x) {
    return FieldSample{analytic_sdf(*hand_shape, x), hand_color(x)};
  }};
  scene.object = EntityField{[object_shape, obj_pose](const Vec3& x) {
    return FieldSample{analytic_sdf(*object_shape, x), object_color(inverse_apply(obj_pose, x))};
  }};
  const double far_wall = 10.0 * ds.r_bg;
  scene.background = BackgroundFieldFn{[far_wall](const Vec3& x, const Vec3&) {
    return FieldSample{far_wall - norm(x), background_color(normalized(x))};
  }};
  return scene;
}

SceneDataset gen_scene(const SceneScript& script) {
  SceneDataset ds;
  ds.width = script.width;
  ds.height = script.height;
  ds.n_frames = script.frames;
  ds.r_bg = 3.0;
  ds.skeleton = std::make_shared<Skeleton>(Skeleton::default_hand());
  ds.has_gt = true;
  ds.gt_object_shape = script_object_shape(script);

  std::mt19937_64 rng(script.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Ground-truth trajectories: static grasp, orbiting cameras, optional spin.
  AnalyticShape object_frame0 = ds.gt_object_shape;
  object_frame0.to_world.scale = script.object_scale;
  const HandState hand_gt = gt_hand_state(script, *ds.skeleton, object_frame0);
  for (int f = 0; f < ds.n_frames; ++f) {
    FramePoses gt;
    gt.hand = hand_gt;
    gt.object.rotation =
        rotation_from_axis_angle({0, 0, script.object_spin_deg * M_PI / 180.0 * f});
    gt.object.translation = {0, 0, 0};
    gt.object.scale = script.object_scale;
    ds.gt_poses.push_back(gt);
    ds.cameras.push_back(make_orbit_camera(script, f));
  }

  // Sparse object point cloud from the canonical surface, with the SfM-style
  // unknown global scale applied to the cloud but not to the emitted poses.
  const TriMesh gt_canonical_mesh = gt_object_mesh_canonical(ds, 96);
  const std::vector<Vec3> surface_pts =
      sample_surface(gt_canonical_mesh, script.cloud_count, script.seed ^ 0xc10d);
  for (const Vec3& p : surface_pts) {
    const Vec3 noisy = p + Vec3{gauss(rng), gauss(rng), gauss(rng)} * script.cloud_noise;
    ds.cloud_raw.push_back(noisy * script.cloud_scale);
  }
  {  // Canonicalize in the same way load_dataset does.
    Vec3 centroid{0, 0, 0};
    for (const auto& p : ds.cloud_raw) centroid += p;
    centroid = centroid / (double)ds.cloud_raw.size();
    double radius = 0;
    for (const auto& p : ds.cloud_raw) radius = std::max(radius, norm(p - centroid));
    ds.norm_centroid = centroid;
    ds.norm_scale = radius > 0 ? radius : 1.0;
    for (const auto& p : ds.cloud_raw)
      ds.cloud_canonical.push_back((p - centroid) / ds.norm_scale);
  }

  // Noisy initial poses. The init scale follows the true world scale (times
  // noise): a cloud-scale mismatch is exactly the scale error alignment must
  // recover.
  for (int f = 0; f < ds.n_frames; ++f) {
    FramePoses init = ds.gt_poses[f];
    init.hand.root.rotation = small_rotation(rng, script.noise_rot_deg) * init.hand.root.rotation;
    init.hand.root.translation +=
        Vec3{gauss(rng), gauss(rng), gauss(rng)} * script.noise_trans;
    init.object.rotation = small_rotation(rng, script.noise_rot_deg) * init.object.rotation;
    init.object.translation += Vec3{gauss(rng), gauss(rng), gauss(rng)} * script.noise_trans;
    init.object.scale *= std::exp(gauss(rng) * script.noise_scale_pct / 100.0);
    // SfM-style emission: the pose scale is blind to the cloud's global
    // scale factor, so a scaled cloud plants exactly that scale error.
    const double s_raw = init.object.scale;
    init.object.translation += init.object.rotation * ds.norm_centroid * s_raw;
    init.object.scale = s_raw * ds.norm_scale;
    ds.init_poses.push_back(init);
  }

  // 2D observations: projections of the true joints and true surface points.
  const PosedHand posed_gt = pose_hand(*ds.skeleton, hand_gt);
  const int n_cloud_obs = std::min<int>(128, (int)surface_pts.size());
  for (int f = 0; f < ds.n_frames; ++f) {
    std::vector<Pixel> joints, cloud;
    for (const Vec3& j : posed_gt.joints) joints.push_back(project(ds.cameras[f], j));
    for (int i = 0; i < n_cloud_obs; ++i)
      cloud.push_back(project(ds.cameras[f], apply(ds.gt_poses[f].object, surface_pts[i])));
    ds.joints2d.push_back(std::move(joints));
    ds.cloud2d.push_back(std::move(cloud));
  }

  // Images via the dense-quadrature oracle; labels and depth from analytic
  // first hits so occlusion ordering is exact.
  SamplerConfig dense;
  dense.count = 2048;
  dense.mode = SamplerMode::Stratified;
  dense.background_count = 48;
  for (int f = 0; f < ds.n_frames; ++f) {
    const RenderScene scene = oracle_scene(ds, f, dense);
    const ImageChannels img = render_image(scene, ds.cameras[f]);
    ImageU8 rgb;
    rgb.width = ds.width;
    rgb.height = ds.height;
    rgb.channels = 3;
    rgb.pixels.resize((size_t)ds.width * ds.height * 3);
    for (size_t i = 0; i < img.color.size(); ++i) {
      rgb.pixels[3 * i] = to_u8(img.color[i].x);
      rgb.pixels[3 * i + 1] = to_u8(img.color[i].y);
      rgb.pixels[3 * i + 2] = to_u8(img.color[i].z);
    }
    ds.images.push_back(std::move(rgb));

    const AnalyticShape hand_shape = posed_hand_shape(*ds.skeleton, ds.gt_poses[f].hand);
    AnalyticShape obj = ds.gt_object_shape;
    obj.to_world = ds.gt_poses[f].object;
    ImageU8 label;
    label.width = ds.width;
    label.height = ds.height;
    label.channels = 1;
    label.pixels.resize((size_t)ds.width * ds.height);
    std::vector<double> depth((size_t)ds.width * ds.height, 0.0);
    for (int y = 0; y < ds.height; ++y)
      for (int x = 0; x < ds.width; ++x) {
        Ray ray = cast_ray(ds.cameras[f], {x + 0.5, y + 0.5});
        ray.near = 0.1;
        const double t_hand =
            script.hand_present ? sphere_trace(hand_shape, ray, 3.0 * script.orbit_radius) : -1.0;
        const double t_obj = sphere_trace(obj, ray, 3.0 * script.orbit_radius);
        uint8_t value = 0;
        double t_hit = 0.0;
        if (t_hand > 0 && (t_obj < 0 || t_hand <= t_obj)) {
          value = 1;
          t_hit = t_hand;
        } else if (t_obj > 0) {
          value = 2;
          t_hit = t_obj;
        }
        label.pixels[(size_t)y * ds.width + x] = value;
        depth[(size_t)y * ds.width + x] = t_hit;
      }
    ds.labels.push_back(std::move(label));
    ds.depth.push_back(std::move(depth));
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// training state
// ---------------------------------------------------------------------------

namespace {

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t x = a * 0x9e3779b97f4a7c15ull + b;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  return x;
}

void init_random_field(ParamSet& params, const TrainableField& f, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  double* p = params.values.data() + f.offset;
  const int n = f.arch.param_count();
  for (int i = 0; i < n; ++i) p[i] = 0.08 * gauss(rng);
}

void init_all_fields(TrainState& state, uint64_t seed) {
  init_geometric(state.params, state.scene.f_h, 0.5, mix_seed(seed, 11));
  init_geometric(state.params, state.scene.f_o, 0.5, mix_seed(seed, 22));
  init_random_field(state.params, state.scene.f_b, mix_seed(seed, 33));
  for (const char* slice : {"z_o", "z_b"}) {
    const ParamSlice& s = state.params.slice(slice);
    std::fill(state.params.values.begin() + s.offset,
              state.params.values.begin() + s.offset + s.count, 0.0);
  }
}

void refresh_object_mesh(TrainState& state) {
  try {
    TriMesh mesh = extract_object_mesh(state, 48);
    state.object_mesh = largest_component(mesh);
    state.object_mesh_bvh = std::make_shared<MeshBvh>(state.object_mesh);
  } catch (const EmptyLevelSet&) {
    state.object_mesh = TriMesh{};
    state.object_mesh_bvh.reset();
  }
}

}  // namespace

TrainState init_train_state(const SceneDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  TrainState state;
  state.skeleton = ds.skeleton;
  state.scene = SceneParams::build(state.params, ds.n_frames, ds.skeleton->bone_count());
  state.adam = Adam(cfg.adam);
  init_all_fields(state, cfg.seed);
  for (int f = 0; f < ds.n_frames; ++f) {
    state.scene.set_hand_state(state.params, f, ds.init_poses[f].hand);
    state.scene.set_object_state(state.params, f, ds.init_poses[f].object);
  }
  refresh_object_mesh(state);
  return state;
}

void reinit_fields(TrainState& state, uint64_t seed) {
  init_all_fields(state, seed);
  state.adam = Adam(state.adam.config);
  refresh_object_mesh(state);
}

TriMesh extract_object_mesh(const TrainState& state, int resolution) {
  const TrainableField f = state.scene.f_o;
  const ParamSet& params = state.params;
  return marching_cubes(
      [&](const Vec3& x) { return eval_object(f, params, x, nullptr).d; }, resolution,
      {-1.25, -1.25, -1.25}, {1.25, 1.25, 1.25});
}

TriMesh extract_hand_mesh(const TrainState& state, int resolution) {
  const TrainableField f = state.scene.f_h;
  const ParamSet& params = state.params;
  return marching_cubes([&](const Vec3& x) { return eval_hand(f, params, x).d; }, resolution,
                        {-2.1, -2.1, -2.1}, {2.1, 2.1, 2.1});
}

RenderScene neural_scene_for_frame(const TrainState& state, const SceneDataset& ds, int frame,
                                   const PosedHand& posed, const SamplerConfig& sampler,
                                   AmodalMode amodal) {
  NeuralScene neural;
  neural.skeleton = state.skeleton.get();
  neural.posed = &posed;
  neural.f_h = state.scene.f_h;
  neural.f_o = state.scene.f_o;
  neural.f_b = state.scene.f_b;
  neural.params = &state.params;
  neural.object = state.scene.object_state(state.params, frame);
  const double* zb = state.params.values.data() + state.scene.z_b_offset(state.params, frame);
  neural.z_background.assign(zb, zb + kLatentDim);
  neural.density = state.scene.density(state.params);
  neural.r_bg = ds.r_bg;
  neural.hand_enabled = state.hand_enabled;
  return bind_neural_scene(neural, sampler, amodal);
}

// ---------------------------------------------------------------------------
// training step
// ---------------------------------------------------------------------------

namespace {

struct RayRec {
  int frame = 0;
  Ray ray;
  Vec3 target_rgb;
  uint8_t label = 0;
  bool far_hand = false, far_object = false;
  double fg_near = 0, fg_far = -1;  // fg_far < fg_near: misses the sphere
  uint64_t seed = 0;
};

struct FrameCache {
  int frame = -1;
  PosedHand posed;
  HandState hand;
  ObjectState object;
  std::unique_ptr<MeshBvh> hand_proxy_bvh;
};

struct ChunkTerms {
  double rgb = 0, segm = 0, sparse_h = 0, sparse_o = 0, eik = 0, sdf = 0;
  int dropped = 0;
};

// One chunk of rays from a single frame, evaluated on its own tape.
ChunkTerms process_ray_chunk(const SceneDataset& ds, const TrainConfig& cfg, TrainState& state,
                             const std::vector<RayRec>& rays, size_t begin, size_t end,
                             const FrameCache& fc, const LossWeights& weights, int n_rays_total,
                             int n_segm_total, int n_far_h_total, int n_far_o_total,
                             std::vector<double>& grad_out) {
  ChunkTerms terms;
  ParamSet& params = state.params;
  const SceneParams& sp = state.scene;
  const Skeleton& sk = *state.skeleton;
  const int frame = rays[begin].frame;
  const int n_b = sk.bone_count();

  Tape tape(&params);

  std::vector<Var> theta(3 * n_b), beta_c(n_b);
  for (int i = 0; i < 3 * n_b; ++i)
    theta[i] = cfg.optimize_poses ? tape.leaf(sp.theta_offset(params, frame) + i)
                                  : tape.constant(params.values[sp.theta_offset(params, frame) + i]);
  for (int b = 0; b < n_b; ++b)
    beta_c[b] = tape.constant(params.values[sp.beta_offset(params) + b]);
  const int rh = sp.rot_h_offset(params, frame), th = sp.t_h_offset(params, frame);
  const int ro = sp.rot_o_offset(params, frame), to = sp.t_o_offset(params, frame);
  auto pose_var = [&](int idx) {
    return cfg.optimize_poses ? tape.leaf(idx) : tape.constant(params.values[idx]);
  };
  const TapeRigid root =
      tape_rigid_from_params(tape, pose_var(rh), pose_var(rh + 1), pose_var(rh + 2),
                             pose_var(th), pose_var(th + 1), pose_var(th + 2));
  const TapeRigid obj_rt =
      tape_rigid_from_params(tape, pose_var(ro), pose_var(ro + 1), pose_var(ro + 2),
                             pose_var(to), pose_var(to + 1), pose_var(to + 2));
  const Var obj_scale = cfg.optimize_poses ? exp(tape.leaf(sp.log_s_offset(params)))
                                           : tape.constant(std::exp(params.values[sp.log_s_offset(params)]));
  const Var alpha1 = exp(tape.leaf(sp.density_offset(params)));
  const Var alpha2 = exp(tape.leaf(sp.density_offset(params) + 1));
  std::vector<TapeRigid> bones;
  if (state.hand_enabled) bones = tape_forward_kinematics(tape, sk, theta, beta_c, root);

  std::vector<Var> z_o(kLatentDim), z_b(kLatentDim);
  for (int i = 0; i < kLatentDim; ++i) {
    z_o[i] = tape.leaf(sp.z_o_offset(params, frame) + i);
    z_b[i] = tape.leaf(sp.z_b_offset(params, frame) + i);
  }

  Var rgb_sum = tape.constant(0.0);
  Var segm_sum = tape.constant(0.0);
  Var sparse_h_sum = tape.constant(0.0);
  Var sparse_o_sum = tape.constant(0.0);

  const double a1 = alpha1.value(), a2 = alpha2.value();
  const double* pv = params.values.data();

  for (size_t ri = begin; ri < end; ++ri) {
    const RayRec& rec = rays[ri];
    const bool hits_fg = rec.fg_far > rec.fg_near;

    std::vector<EntitySamples<Var>> fg_lists;
    if (hits_fg && state.hand_enabled) {
      Ray bounded = rec.ray;
      bounded.near = rec.fg_near;
      bounded.far = rec.fg_far;
      EntitySamples<Var> hand;
      hand.entity = 0;
      auto sigma_at = [&](double t) {
        try {
          const Vec3 canonical = inverse_lbs(fc.posed, rec.ray.at(t));
          const FieldSample s = eval_hand(sp.f_h, params, canonical);
          return sdf_to_density(s.d, a1, a2);
        } catch (const SingularBlend&) {
          return 0.0;
        }
      };
      SamplerConfig sampler;
      sampler.count = cfg.samples_per_ray;
      sampler.mode = cfg.sampler_mode;
      sampler.jitter = true;
      const auto depths = sample_ray(bounded, sigma_at, sampler, 1.0 / 3.0, rec.seed * 2 + 1);
      for (double t : depths) {
        const Vec3 x_obs = rec.ray.at(t);
        std::vector<double> w;
        try {
          w = skin_weights(fc.posed, x_obs);
        } catch (...) {
          ++terms.dropped;
          continue;
        }
        std::array<Var, 3> canonical;
        try {
          canonical = tape_blend_inverse(tape, bones, w, x_obs);
        } catch (const SingularBlend&) {
          ++terms.dropped;
          continue;
        }
        const TapeFieldSample s =
            eval_mlp_tape(tape, sp.f_h.arch, sp.f_h.offset, canonical, {}, {});
        hand.t.push_back(t);
        hand.sigma.push_back(sdf_to_density(s.d, alpha1, alpha2));
        hand.color.push_back({s.c[0], s.c[1], s.c[2]});
      }
      if (!hand.t.empty()) fg_lists.push_back(std::move(hand));
    }
    if (hits_fg) {
      Ray bounded = rec.ray;
      bounded.near = rec.fg_near;
      bounded.far = rec.fg_far;
      EntitySamples<Var> object;
      object.entity = 1;
      auto sigma_at = [&](double t) {
        const Vec3 canonical = inverse_apply(fc.object.to_world, rec.ray.at(t));
        const FieldSample s = eval_object(sp.f_o, params, canonical, fc.object.latent.data());
        return sdf_to_density(s.d, a1, a2);
      };
      SamplerConfig sampler;
      sampler.count = cfg.samples_per_ray;
      sampler.mode = cfg.sampler_mode;
      sampler.jitter = true;
      const auto depths = sample_ray(bounded, sigma_at, sampler, 2.0 / 3.0, rec.seed * 2 + 2);
      for (double t : depths) {
        const auto canonical = tape_rigid_inverse_apply(tape, obj_rt, obj_scale, rec.ray.at(t));
        const TapeFieldSample s =
            eval_mlp_tape(tape, sp.f_o.arch, sp.f_o.offset, canonical, z_o, {});
        object.t.push_back(t);
        object.sigma.push_back(sdf_to_density(s.d, alpha1, alpha2));
        object.color.push_back({s.c[0], s.c[1], s.c[2]});
      }
      fg_lists.push_back(std::move(object));
    }

    CompositeResult<Var> fg{{tape.constant(0), tape.constant(0), tape.constant(0)},
                            tape.constant(0),
                            {tape.constant(0), tape.constant(0), tape.constant(0)},
                            {tape.constant(0), tape.constant(0), tape.constant(0)},
                            tape.constant(0),
                            tape.constant(1)};
    if (!fg_lists.empty()) {
      std::vector<const EntitySamples<Var>*> refs;
      for (const auto& l : fg_lists) refs.push_back(&l);
      fg = composite<Var>(refs, rec.fg_far);
    }

    // Background with an opaque terminal sample.
    const double bg_near = hits_fg ? rec.fg_far : rec.ray.near;
    const double bg_far = 10.0 * ds.r_bg;
    EntitySamples<Var> bg;
    bg.entity = 2;
    const int nb = cfg.background_samples;
    for (int i = 0; i < nb; ++i) bg.t.push_back(bg_near + (bg_far - bg_near) * (i + 0.5) / nb);
    const double delta_last = std::max((bg_far - bg_near) / nb, 1e-9);
    bg.t.push_back(bg_far);
    for (size_t i = 0; i < bg.t.size(); ++i) {
      const Vec3 x = rec.ray.at(std::min(bg.t[i], bg_far - 1e-9));
      const auto param4 = inverted_sphere_param(x, ds.r_bg);
      Var xin[4], extra[3];
      for (int k = 0; k < 4; ++k) xin[k] = tape.constant(param4[k]);
      for (int k = 0; k < 3; ++k) extra[k] = tape.constant(rec.ray.direction[k]);
      const TapeFieldSample s =
          eval_mlp_tape(tape, sp.f_b.arch, sp.f_b.offset, std::span<const Var>(xin, 4), z_b,
                        std::span<const Var>(extra, 3));
      if (i + 1 < bg.t.size()) {
        bg.sigma.push_back(sdf_to_density(s.d, alpha1, alpha2));
      } else {
        bg.sigma.push_back(tape.constant(kOpaqueBackgroundSigmaDelta / delta_last));
      }
      bg.color.push_back({s.c[0], s.c[1], s.c[2]});
    }
    std::vector<const EntitySamples<Var>*> bg_refs{&bg};
    const CompositeResult<Var> bgres = composite<Var>(bg_refs, bg_far + delta_last);

    const Var bg_vis = 1.0 - fg.weight_sum;
    Var color[3];
    for (int c = 0; c < 3; ++c) color[c] = fg.color[c] + bg_vis * bgres.color[c];

    for (int c = 0; c < 3; ++c) rgb_sum = rgb_sum + abs(color[c] - rec.target_rgb[c]);

    if (rec.label != 255) {
      const Var s_hand = fg.per_entity[0];
      const Var s_obj = fg.per_entity[1];
      const Var s_bg = bg_vis * bgres.weight_sum;
      const double onehot[3] = {rec.label == 1 ? 1.0 : 0.0, rec.label == 2 ? 1.0 : 0.0,
                                rec.label == 0 ? 1.0 : 0.0};
      segm_sum = segm_sum + abs(s_hand - onehot[0]) + abs(s_obj - onehot[1]) +
                 abs(s_bg - onehot[2]);
    }
    if (rec.far_hand && state.hand_enabled) sparse_h_sum = sparse_h_sum + abs(fg.per_entity[0]);
    if (rec.far_object) sparse_o_sum = sparse_o_sum + abs(fg.per_entity[1]);
    (void)pv;
  }

  terms.rgb = rgb_sum.value();
  terms.segm = segm_sum.value();
  terms.sparse_h = sparse_h_sum.value();
  terms.sparse_o = sparse_o_sum.value();

  std::vector<std::pair<Var, double>> seeds{
      {rgb_sum, 1.0 / n_rays_total},
      {segm_sum, n_segm_total > 0 ? weights.lambda_segm / n_segm_total : 0.0},
      {sparse_h_sum, n_far_h_total > 0 ? weights.lambda_sparse / n_far_h_total : 0.0},
      {sparse_o_sum, n_far_o_total > 0 ? weights.lambda_sparse / n_far_o_total : 0.0}};
  tape.backward(seeds);
  grad_out = tape.param_grad();
  return terms;
}

// Shape-prior chunk: eikonal on both canonical fields plus the hand SDF prior.
ChunkTerms process_prior_chunk(const TrainConfig& cfg, TrainState& state,
                               const LossWeights& weights, uint64_t seed,
                               std::vector<double>& grad_out) {
  ChunkTerms terms;
  ParamSet& params = state.params;
  const SceneParams& sp = state.scene;
  const Skeleton& sk = *state.skeleton;
  Tape tape(&params);

  const auto hand_pts =
      state.hand_enabled
          ? sample_prior_points(cfg.eikonal_samples, {-2, -2, -2}, {2, 2, 2},
                                &sk.template_mesh(), 0.05, mix_seed(seed, 1))
          : std::vector<Vec3>{};
  const auto object_pts = sample_prior_points(
      cfg.eikonal_samples, {-1.2, -1.2, -1.2}, {1.2, 1.2, 1.2},
      state.object_mesh.empty() ? nullptr : &state.object_mesh, 0.05, mix_seed(seed, 2));

  Var eik = tape.constant(0.0);
  int eik_terms = 0;
  if (!hand_pts.empty()) {
    eik = eik + loss_eikonal_tape(tape, sp.f_h, hand_pts);
    ++eik_terms;
  }
  eik = eik + loss_eikonal_tape(tape, sp.f_o, object_pts);
  ++eik_terms;
  eik = eik / (double)eik_terms;

  Var sdf = tape.constant(0.0);
  if (state.hand_enabled) {
    const auto sdf_pts = sample_prior_points(cfg.sdf_samples, {-2, -2, -2}, {2, 2, 2},
                                             &sk.template_mesh(), 0.05, mix_seed(seed, 3));
    sdf = loss_sdf_tape(tape, sp.f_h, sk, sdf_pts);
  }

  terms.eik = eik.value();
  terms.sdf = sdf.value();
  tape.backward({{eik, weights.lambda_eikonal}, {sdf, weights.lambda_sdf}});
  grad_out = tape.param_grad();
  return terms;
}

}  // namespace

StepStats train_loss_probe(const SceneDataset& ds, const TrainConfig& cfg, TrainStage stage,
                           TrainState& state, int epoch, int step, std::vector<double>* grad_out) {
  const int total_epochs = stage == TrainStage::Pretrain ? cfg.epochs_pretrain : cfg.epochs_final;
  const LossWeights weights = LossWeights::at_epoch(epoch, total_epochs);
  const uint64_t step_seed =
      mix_seed(mix_seed(cfg.seed, stage == TrainStage::Pretrain ? 1 : 2),
               (uint64_t)epoch * 10007 + step);
  std::mt19937_64 rng(step_seed);

  // Frame draws and per-frame caches.
  std::vector<int> frame_of_image(cfg.images_per_step);
  for (int& f : frame_of_image) f = (int)(rng() % ds.n_frames);
  std::map<int, FrameCache> caches;
  for (int f : frame_of_image) {
    if (caches.count(f)) continue;
    FrameCache& fc = caches[f];
    fc.frame = f;
    fc.hand = state.scene.hand_state(state.params, f);
    fc.object = state.scene.object_state(state.params, f);
    if (state.hand_enabled) {
      fc.posed = pose_hand(*state.skeleton, fc.hand);
      TriMesh proxy = state.skeleton->proxy_mesh();
      proxy.vertices = state.skeleton->shaped_vertices(fc.hand.beta).empty()
                           ? proxy.vertices
                           : proxy.vertices;
      // Pose the proxy template for far-ray classification.
      const auto& weights_p = state.skeleton->proxy_weights();
      const auto& owners = state.skeleton->proxy_owner_bones();
      const auto& locals = state.skeleton->proxy_local_offsets();
      const auto joints = state.skeleton->joint_positions(fc.hand.beta);
      for (size_t v = 0; v < proxy.vertices.size(); ++v) {
        const Vec3 can = joints[owners[v]] + locals[v] * fc.hand.beta[owners[v]];
        proxy.vertices[v] = forward_lbs(fc.posed.bone_tf, weights_p[v], can);
      }
      fc.hand_proxy_bvh = std::make_unique<MeshBvh>(proxy);
    }
  }

  // Ray batch with far-set membership and segmentation counts.
  std::vector<RayRec> rays;
  rays.reserve((size_t)cfg.images_per_step * cfg.rays_per_image);
  int n_segm = 0, n_far_h = 0, n_far_o = 0;
  for (int img = 0; img < cfg.images_per_step; ++img) {
    const int f = frame_of_image[img];
    const FrameCache& fc = caches[f];
    const Camera& cam = ds.cameras[f];
    for (int r = 0; r < cfg.rays_per_image; ++r) {
      const int pix = (int)(rng() % ((uint64_t)ds.width * ds.height));
      RayRec rec;
      rec.frame = f;
      rec.ray = cast_ray(cam, {pix % ds.width + 0.5, pix / ds.width + 0.5});
      rec.ray.near = 0.05;
      rec.seed = mix_seed(step_seed, rays.size());
      const ImageU8& image = ds.images[f];
      rec.target_rgb = {from_u8(image.pixels[3 * pix]), from_u8(image.pixels[3 * pix + 1]),
                        from_u8(image.pixels[3 * pix + 2])};
      rec.label = ds.labels[f].pixels[pix];
      double t0, t1;
      if (intersect_sphere(rec.ray, {0, 0, 0}, ds.r_bg, t0, t1) && t1 > rec.ray.near) {
        rec.fg_near = std::max(t0, rec.ray.near);
        rec.fg_far = t1;
      }
      const bool hits_fg = rec.fg_far > rec.fg_near;
      const Vec3 seg_a = rec.ray.at(hits_fg ? rec.fg_near : rec.ray.near);
      const Vec3 seg_b = rec.ray.at(hits_fg ? rec.fg_far : rec.ray.near + 2 * ds.r_bg);
      if (state.hand_enabled && fc.hand_proxy_bvh) {
        rec.far_hand = fc.hand_proxy_bvh->segment_distance(seg_a, seg_b) > kFarRayThreshold;
      }
      if (state.object_mesh_bvh && !state.object_mesh.empty()) {
        // Distance in the canonical object frame scales back to world units.
        const Vec3 ca = inverse_apply(fc.object.to_world, seg_a);
        const Vec3 cb = inverse_apply(fc.object.to_world, seg_b);
        rec.far_object = state.object_mesh_bvh->segment_distance(ca, cb) *
                             fc.object.to_world.scale >
                         kFarRayThreshold;
      }
      if (rec.label != 255) ++n_segm;
      if (rec.far_hand && state.hand_enabled) ++n_far_h;
      if (rec.far_object) ++n_far_o;
      rays.push_back(rec);
    }
  }
  const int n_rays_total = (int)rays.size();

  // Chunks: consecutive rays of one image; the prior chunk comes last.
  const int rays_per_chunk = 16;
  struct ChunkSpec {
    size_t begin, end;
    int frame;
    bool prior = false;
  };
  std::vector<ChunkSpec> chunks;
  for (int img = 0; img < cfg.images_per_step; ++img) {
    const size_t base = (size_t)img * cfg.rays_per_image;
    for (int c = 0; c < cfg.rays_per_image; c += rays_per_chunk)
      chunks.push_back({base + c,
                        base + std::min(c + rays_per_chunk, cfg.rays_per_image),
                        frame_of_image[img], false});
  }
  chunks.push_back({0, 0, -1, true});

  // Workers produce chunk gradients; the main thread reduces them in chunk
  // order so results are identical for any worker count.
  int workers = (int)std::thread::hardware_concurrency();
  if (const char* env = std::getenv("HOLDFIELD_THREADS")) workers = std::max(1, atoi(env));
  workers = std::clamp(workers, 1, (int)chunks.size());

  std::vector<double> grad(state.params.size(), 0.0);
  LossBreakdown breakdown;
  int dropped = 0;

  std::mutex mu;
  std::condition_variable cv;
  std::map<int, std::pair<std::vector<double>, ChunkTerms>> done;
  std::atomic<int> next_chunk{0};
  std::atomic<bool> failed{false};

  auto worker_fn = [&]() {
    while (!failed.load()) {
      const int c = next_chunk.fetch_add(1);
      if (c >= (int)chunks.size()) break;
      std::vector<double> g;
      ChunkTerms terms;
      try {
        if (chunks[c].prior) {
          terms = process_prior_chunk(cfg, state, weights, mix_seed(step_seed, 999), g);
        } else {
          terms = process_ray_chunk(ds, cfg, state, rays, chunks[c].begin, chunks[c].end,
                                    caches[chunks[c].frame], weights, n_rays_total, n_segm,
                                    n_far_h, n_far_o, g);
        }
      } catch (...) {
        failed.store(true);
        cv.notify_all();
        throw;
      }
      {
        std::lock_guard<std::mutex> lock(mu);
        done.emplace(c, std::make_pair(std::move(g), terms));
      }
      cv.notify_all();
    }
  };

  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker_fn);
  {
    std::unique_lock<std::mutex> lock(mu);
    for (int c = 0; c < (int)chunks.size(); ++c) {
      cv.wait(lock, [&] { return done.count(c) > 0 || failed.load(); });
      if (failed.load()) break;
      auto& [g, terms] = done.at(c);
      for (size_t i = 0; i < grad.size(); ++i) grad[i] += g[i];
      breakdown.rgb += terms.rgb;
      breakdown.segm += terms.segm;
      breakdown.sparse += terms.sparse_h / std::max(n_far_h, 1) +
                          terms.sparse_o / std::max(n_far_o, 1);
      breakdown.eikonal += terms.eik;
      breakdown.sdf += terms.sdf;
      dropped += terms.dropped;
      done.erase(c);
    }
  }
  for (auto& t : pool) t.join();
  if (failed.load()) throw NonFiniteLoss("training step failed");

  breakdown.rgb /= n_rays_total;
  breakdown.segm = n_segm > 0 ? breakdown.segm / n_segm : 0.0;
  breakdown.empty_far_hand = n_far_h == 0;
  breakdown.empty_far_object = n_far_o == 0;
  breakdown.total = breakdown.weighted_total(weights);
  if (!std::isfinite(breakdown.total))
    throw NonFiniteLoss("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                        std::to_string(step));

  StepStats stats;
  stats.epoch = epoch;
  stats.step = step;
  stats.loss = breakdown;
  stats.dropped_samples = dropped;
  state.total_dropped_samples += dropped;

  double gn = 0;
  for (double g : grad) gn += g * g;
  stats.grad_norm = std::sqrt(gn);
  if (grad_out) *grad_out = std::move(grad);
  return stats;
}

StepStats train_step(const SceneDataset& ds, const TrainConfig& cfg, TrainStage stage,
                     TrainState& state, int epoch, int step) {
  std::vector<double> grad;
  const StepStats stats = train_loss_probe(ds, cfg, stage, state, epoch, step, &grad);
  state.adam.step(state.params, std::move(grad));
  return stats;
}

void train(const SceneDataset& ds, const TrainConfig& cfg, TrainStage stage, TrainState& state,
           const std::string& run_dir, std::ostream* log) {
  const int total_epochs = stage == TrainStage::Pretrain ? cfg.epochs_pretrain : cfg.epochs_final;
  const char* stage_name = stage == TrainStage::Pretrain ? "pretrain" : "final";
  fs::create_directories(fs::path(run_dir) / "checkpoints");
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    if (epoch % cfg.mesh_refresh_epochs == 0) refresh_object_mesh(state);
    for (int step = 0; step < cfg.steps_per_epoch; ++step) {
      const StepStats s = train_step(ds, cfg, stage, state, epoch, step);
      if (log) {
        const LossWeights w = LossWeights::at_epoch(epoch, total_epochs);
        json line{{"stage", stage_name},
                  {"epoch", s.epoch},
                  {"step", s.step},
                  {"rgb", s.loss.rgb},
                  {"segm", s.loss.segm},
                  {"sdf", s.loss.sdf},
                  {"sparse", s.loss.sparse},
                  {"eikonal", s.loss.eikonal},
                  {"total", s.loss.total},
                  {"lambda_segm", w.lambda_segm},
                  {"lambda_sdf", w.lambda_sdf},
                  {"lambda_sparse", w.lambda_sparse},
                  {"lambda_eikonal", w.lambda_eikonal},
                  {"grad_norm", s.grad_norm},
                  {"dropped_samples", s.dropped_samples}};
        (*log) << line.dump() << "\n";
      }
    }
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint((fs::path(run_dir) / "checkpoints" /
                       (std::string(stage_name) + "_epoch" + std::to_string(epoch + 1) + ".ckpt"))
                          .string(),
                      make_checkpoint(state));
    }
  }
  save_checkpoint(
      (fs::path(run_dir) / "checkpoints" / (std::string(stage_name) + ".ckpt")).string(),
      make_checkpoint(state));
  if (log) log->flush();
}

Checkpoint make_checkpoint(const TrainState& state) {
  Checkpoint ckpt;
  ckpt.archs = {state.scene.f_h.arch, state.scene.f_o.arch, state.scene.f_b.arch};
  ckpt.params = state.params;
  ckpt.adam_m = state.adam.m;
  ckpt.adam_v = state.adam.v;
  ckpt.adam_step = state.adam.step_count;
  return ckpt;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

TriMesh gt_object_mesh_canonical(const SceneDataset& ds, int resolution) {
  const AnalyticShape shape = ds.gt_object_shape;
  return marching_cubes([&](const Vec3& x) { return analytic_sdf(shape, x); }, resolution,
                        {-1.3, -1.3, -1.3}, {1.3, 1.3, 1.3});
}

std::vector<Vec3> gt_joints(const SceneDataset& ds, int frame) {
  return pose_hand(*ds.skeleton, ds.gt_poses[frame].hand).joints;
}

std::vector<Vec3> predicted_joints(const TrainState& state, int frame) {
  return pose_hand(*state.skeleton, state.scene.hand_state(state.params, frame)).joints;
}

MetricReport evaluate_state(const TrainState& state, const SceneDataset& ds,
                            const TriMesh& object_canonical) {
  MetricReport report;
  const double s_hat = std::exp(state.params.values[state.scene.log_s_offset(state.params)]);

  // Canonical-quality metrics after similarity ICP, in world (cm) scale.
  TriMesh pred = object_canonical;
  for (auto& v : pred.vertices) v *= s_hat;
  TriMesh gt = gt_object_mesh_canonical(ds);
  for (auto& v : gt.vertices) v *= ds.gt_poses.empty() ? 1.0 : ds.gt_poses[0].object.scale;
  const IcpResult icp = icp_align(pred, gt, /*allow_scale=*/true);
  report.cd_cm2 = chamfer_mesh(icp.aligned, gt);
  report.f5_pct = fscore_mesh(icp.aligned, gt, 0.5);
  report.f10_pct = fscore_mesh(icp.aligned, gt, 1.0);

  // Pose-sensitive metrics per frame.
  std::vector<TriMesh> pred_world(ds.n_frames), gt_world(ds.n_frames);
  std::vector<Vec3> pred_roots(ds.n_frames), gt_roots(ds.n_frames);
  const TriMesh gt_canonical = gt_object_mesh_canonical(ds);
  for (int f = 0; f < ds.n_frames; ++f) {
    pred_world[f] = object_canonical;
    pred_world[f].apply_transform(state.scene.object_state(state.params, f).to_world);
    gt_world[f] = gt_canonical;
    gt_world[f].apply_transform(ds.gt_poses[f].object);
    if (state.hand_enabled) {
      pred_roots[f] = predicted_joints(state, f)[0];
      gt_roots[f] = gt_joints(ds, f)[0];
      report.per_frame_mpjpe.push_back(mpjpe(predicted_joints(state, f), gt_joints(ds, f), 0));
    } else {
      pred_roots[f] = gt_roots[f] = {0, 0, 0};
    }
  }
  if (state.hand_enabled) {
    double acc = 0;
    for (double v : report.per_frame_mpjpe) acc += v;
    report.mpjpe_mm = acc / report.per_frame_mpjpe.size();
  }
  const int cdh_samples = 8000;
  for (int f = 0; f < ds.n_frames; ++f) {
    report.per_frame_cdh.push_back(
        cd_h({pred_world[f]}, {gt_world[f]}, {pred_roots[f]}, {gt_roots[f]}, cdh_samples));
  }
  double acc = 0;
  for (double v : report.per_frame_cdh) acc += v;
  report.cdh_cm2 = acc / report.per_frame_cdh.size();
  return report;
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

namespace {

SceneDataset apply_mask_hand(const SceneDataset& ds) {
  SceneDataset out = ds;
  for (auto& label : out.labels)
    for (auto& v : label.pixels)
      if (v == 1) v = 255;
  return out;
}

RefineProblem build_refine_problem(const SceneDataset& ds, TrainState& state) {
  RefineProblem prob;
  prob.skeleton = state.skeleton.get();
  prob.scene = state.scene;
  prob.params = &state.params;
  prob.contact.tip_vertex_ids = state.skeleton->tip_vertex_ids();
  prob.cloud_canonical = ds.cloud_canonical;
  prob.hand_enabled = state.hand_enabled;
  for (int f = 0; f < ds.n_frames; ++f) {
    RefineFrameData fd;
    fd.camera = ds.cameras[f];
    fd.labels = ds.labels[f].pixels;
    fd.joints2d = ds.joints2d.empty() ? std::vector<Pixel>{} : ds.joints2d[f];
    fd.cloud2d = ds.cloud2d.empty() ? std::vector<Pixel>{} : ds.cloud2d[f];
    prob.frames.push_back(std::move(fd));
  }
  return prob;
}

std::vector<FramePoses> current_poses(const TrainState& state, int n_frames) {
  std::vector<FramePoses> out(n_frames);
  for (int f = 0; f < n_frames; ++f) {
    out[f].hand = state.scene.hand_state(state.params, f);
    out[f].object = state.scene.object_state(state.params, f).to_world;
  }
  return out;
}

}  // namespace

PipelineResult pipeline(const SceneDataset& ds_in, const TrainConfig& cfg,
                        const PipelineOptions& options) {
  cfg.validate();
  const SceneDataset ds = options.mask_hand ? apply_mask_hand(ds_in) : ds_in;
  fs::create_directories(options.out_dir);
  fs::create_directories(fs::path(options.out_dir) / "meshes");
  fs::create_directories(fs::path(options.out_dir) / "renders");
  std::ofstream log((fs::path(options.out_dir) / "train.log.ndjson").string());

  PipelineResult result;
  TrainState state = init_train_state(ds, cfg);
  state.hand_enabled = !options.mask_hand;

  // Scale/translation alignment on the raw observations.
  {
    RefineProblem align = build_refine_problem(ds, state);
    result.align_result = align_init(align);
    json line{{"stage", "align"},
              {"iterations", result.align_result.iterations},
              {"converged", result.align_result.converged},
              {"contact", result.align_result.contact},
              {"reproj", result.align_result.reproj}};
    log << line.dump() << "\n";
  }

  train(ds, cfg, TrainStage::Pretrain, state, options.out_dir, &log);

  TriMesh pretrain_mesh;
  try {
    pretrain_mesh = largest_component(extract_object_mesh(state));
    save_obj(pretrain_mesh,
             (fs::path(options.out_dir) / "meshes" / "object_pretrain.obj").string());
  } catch (const EmptyLevelSet&) {
  }

  if (!options.skip_refine && !pretrain_mesh.empty()) {
    RefineProblem refine = build_refine_problem(ds, state);
    refine.object_mesh_canonical = pretrain_mesh;
    result.refine_result = refine_poses(refine);
    result.refined = true;
    json line{{"stage", "refine"},
              {"iterations", result.refine_result.iterations},
              {"converged", result.refine_result.converged},
              {"contact", result.refine_result.contact},
              {"mask", result.refine_result.mask},
              {"reproj", result.refine_result.reproj}};
    log << line.dump() << "\n";
    if (!ds.root_dir.empty())
      write_back_poses(ds.root_dir, ds, current_poses(state, ds.n_frames), "refine",
                       result.refine_result.iterations);
  }

  // Final training restarts the fields from scratch with the refined poses.
  reinit_fields(state, mix_seed(cfg.seed, 0xf1a1));
  train(ds, cfg, TrainStage::Final, state, options.out_dir, &log);

  result.object_mesh_canonical = largest_component(extract_object_mesh(state));
  result.object_scale = std::exp(state.params.values[state.scene.log_s_offset(state.params)]);
  result.final_poses = current_poses(state, ds.n_frames);
  result.object_mesh_path = (fs::path(options.out_dir) / "meshes" / "object.obj").string();
  save_obj(result.object_mesh_canonical, result.object_mesh_path);
  if (state.hand_enabled) {
    try {
      save_obj(largest_component(extract_hand_mesh(state)),
               (fs::path(options.out_dir) / "meshes" / "hand_canonical.obj").string());
    } catch (const EmptyLevelSet&) {
    }
    for (int f = 0; f < ds.n_frames; ++f) {
      const PosedHand posed = pose_hand(*state.skeleton, state.scene.hand_state(state.params, f));
      save_obj(posed.mesh, (fs::path(options.out_dir) / "meshes" /
                            ("hand_frame_" + std::to_string(f) + ".obj"))
                               .string());
    }
  }

  // A rendered frame with its auxiliary channels.
  {
    const PosedHand posed = pose_hand(*state.skeleton, state.scene.hand_state(state.params, 0));
    SamplerConfig sampler;
    sampler.count = cfg.samples_per_ray;
    sampler.background_count = cfg.background_samples;
    const RenderScene scene = neural_scene_for_frame(state, ds, 0, posed, sampler,
                                                     options.amodal);
    const ImageChannels img = render_image(scene, ds.cameras[0]);
    ImageU8 rgb;
    rgb.width = ds.width;
    rgb.height = ds.height;
    rgb.channels = 3;
    rgb.pixels.resize((size_t)ds.width * ds.height * 3);
    std::vector<double> s_h(img.color.size()), s_o(img.color.size()), s_b(img.color.size());
    for (size_t i = 0; i < img.color.size(); ++i) {
      rgb.pixels[3 * i] = to_u8(img.color[i].x);
      rgb.pixels[3 * i + 1] = to_u8(img.color[i].y);
      rgb.pixels[3 * i + 2] = to_u8(img.color[i].z);
      s_h[i] = img.class_probs[i].x;
      s_o[i] = img.class_probs[i].y;
      s_b[i] = img.class_probs[i].z;
    }
    const fs::path renders = fs::path(options.out_dir) / "renders";
    save_png((renders / "frame_000.png").string(), rgb);
    save_pfm((renders / "m_f_000.pfm").string(), ds.width, ds.height, img.m_f);
    save_pfm((renders / "m_h_000.pfm").string(), ds.width, ds.height, img.m_h);
    save_pfm((renders / "m_o_000.pfm").string(), ds.width, ds.height, img.m_o);
    save_pfm((renders / "s_hand_000.pfm").string(), ds.width, ds.height, s_h);
    save_pfm((renders / "s_object_000.pfm").string(), ds.width, ds.height, s_o);
    save_pfm((renders / "s_background_000.pfm").string(), ds.width, ds.height, s_b);
    save_pfm((renders / "depth_000.pfm").string(), ds.width, ds.height, img.depth);
  }

  if (ds.has_gt) {
    result.metrics = evaluate_state(state, ds, result.object_mesh_canonical);
    result.metrics_path = (fs::path(options.out_dir) / "metrics.json").string();
    save_metric_report(result.metrics, result.metrics_path);
  }
  log.flush();
  return result;
}

}  // namespace holdfield

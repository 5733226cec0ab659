#include "holdfield/gradcheck.hpp"

#include <map>
#include <random>

#include "holdfield/harness.hpp"

namespace holdfield {

namespace {

// Max relative FD error of a tape-built scalar over the given coordinates.
double check_against_fd(const std::function<Var(Tape&)>& fwd, ParamSet& params,
                        const std::vector<int>& indices, double h = 1e-4) {
  const std::vector<double> analytic = grad(fwd, params);
  auto value_of = [&](ParamSet& p) {
    Tape tape(&p);
    return fwd(tape).value();
  };
  const std::vector<double> fd = finite_difference(value_of, params, indices, h);
  double worst = 0;
  for (size_t i = 0; i < indices.size(); ++i)
    worst = std::max(worst, relative_error(analytic[indices[i]], fd[i]));
  return worst;
}

std::vector<int> probe_indices(std::mt19937_64& rng, int offset, int count, int want) {
  std::vector<int> out;
  for (int i = 0; i < want; ++i) out.push_back(offset + (int)(rng() % count));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

ParamSet make_field_params(const TrainableField& proto, TrainableField& out, uint64_t seed) {
  ParamSet params;
  out = register_field(params, proto);
  init_geometric(params, out, 0.5, seed);
  return params;
}

double check_mlp_eval(TrainableField proto, bool with_latent, bool with_extra, uint64_t seed) {
  TrainableField field;
  ParamSet params = make_field_params(proto, field, seed);
  const int latent_off =
      with_latent ? params.add_slice("latent", field.arch.latent_dim, LrGroup::Field) : -1;
  std::mt19937_64 rng(seed ^ 0x5eed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  if (with_latent)
    for (int i = 0; i < field.arch.latent_dim; ++i)
      params.values[latent_off + i] = 0.4 * gauss(rng);
  const std::vector<double> x_raw = [&] {
    std::vector<double> x(field.arch.in_dim);
    for (auto& v : x) v = 0.6 * gauss(rng);
    if (field.arch.in_dim == 4) x[3] = 0.3 + 0.5 * std::abs(x[3]);  // inverse depth in (0,1]
    return x;
  }();
  const Vec3 view{0.2, -0.5, 0.9};

  auto fwd = [&](Tape& tape) {
    std::vector<Var> x(field.arch.in_dim);
    for (int i = 0; i < field.arch.in_dim; ++i) x[i] = tape.constant(x_raw[i]);
    std::vector<Var> latent;
    if (with_latent)
      for (int i = 0; i < field.arch.latent_dim; ++i) latent.push_back(tape.leaf(latent_off + i));
    std::vector<Var> extra;
    if (with_extra)
      for (int i = 0; i < 3; ++i) extra.push_back(tape.constant(view[i]));
    const TapeFieldSample s = eval_mlp_tape(tape, field.arch, field.offset, x, latent, extra);
    // Mix distance and color so every head receives an adjoint.
    return s.d + 0.7 * s.c[0] + 0.4 * s.c[1] + 0.9 * s.c[2];
  };

  std::vector<int> idx = probe_indices(rng, field.offset, field.arch.param_count(), 40);
  if (with_latent) {
    const auto more = probe_indices(rng, latent_off, field.arch.latent_dim, 10);
    idx.insert(idx.end(), more.begin(), more.end());
  }
  return check_against_fd(fwd, params, idx);
}

double check_distance_gradient(uint64_t seed) {
  TrainableField field;
  ParamSet params = make_field_params(TrainableField::hand_field(), field, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Vec3 x{0.7 * gauss(rng), 0.7 * gauss(rng), 0.7 * gauss(rng)};
  auto fwd = [&](Tape& tape) {
    const Var xs[3] = {tape.constant(x.x), tape.constant(x.y), tape.constant(x.z)};
    const TapeDistGrad dg = eval_mlp_distance_grad_tape(tape, field.arch, field.offset, xs);
    const Var gn = sqrt(dg.g[0] * dg.g[0] + dg.g[1] * dg.g[1] + dg.g[2] * dg.g[2] + 1e-18);
    return (gn - 1.0) * (gn - 1.0) + 0.3 * dg.d;
  };
  return check_against_fd(fwd, params, probe_indices(rng, 0, field.arch.param_count(), 50));
}

double check_density(uint64_t seed) {
  ParamSet params;
  const int off = params.add_slice("density", 2, LrGroup::Field);
  params.values[off] = std::log(7.0);
  params.values[off + 1] = std::log(0.17);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double d0 = 0.23 * gauss(rng), d1 = -0.4 + 0.2 * gauss(rng);
  auto fwd = [&](Tape& tape) {
    const Var a1 = exp(tape.leaf(off));
    const Var a2 = exp(tape.leaf(off + 1));
    return sdf_to_density(tape.constant(d0), a1, a2) +
           0.5 * sdf_to_density(tape.constant(d1), a1, a2);
  };
  return check_against_fd(fwd, params, {off, off + 1});
}

double check_warp_hand(uint64_t seed) {
  static const Skeleton sk = Skeleton::default_hand();
  const int n_b = sk.bone_count();
  ParamSet params;
  const int pose_off = params.add_slice("pose", 3 * n_b + 6, LrGroup::Pose);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < 3 * n_b + 6; ++i) params.values[pose_off + i] = 0.3 * gauss(rng);
  const Vec3 x_obs{0.4, 0.2, 0.1};
  std::vector<double> w(n_b);
  double sum = 0;
  for (auto& v : w) {
    v = 0.05 + std::abs(gauss(rng));
    sum += v;
  }
  for (auto& v : w) v /= sum;

  auto fwd = [&](Tape& tape) {
    std::vector<Var> theta(3 * n_b);
    for (int i = 0; i < 3 * n_b; ++i) theta[i] = tape.leaf(pose_off + i);
    std::vector<Var> beta(n_b);
    for (int b = 0; b < n_b; ++b) beta[b] = tape.constant(1.0);
    const TapeRigid root = tape_rigid_from_params(
        tape, tape.leaf(pose_off + 3 * n_b), tape.leaf(pose_off + 3 * n_b + 1),
        tape.leaf(pose_off + 3 * n_b + 2), tape.leaf(pose_off + 3 * n_b + 3),
        tape.leaf(pose_off + 3 * n_b + 4), tape.leaf(pose_off + 3 * n_b + 5));
    const auto bones = tape_forward_kinematics(tape, sk, theta, beta, root);
    const auto y = tape_blend_inverse(tape, bones, w, x_obs);
    return y[0] * y[0] + 0.5 * y[1] + 0.25 * y[2] * y[2];
  };
  std::vector<int> idx;
  for (int i = 0; i < 3 * n_b + 6; ++i) idx.push_back(pose_off + i);
  return check_against_fd(fwd, params, idx);
}

double check_warp_object(uint64_t seed) {
  ParamSet params;
  const int off = params.add_slice("pose", 7, LrGroup::Pose);  // rot 3, t 3, log_s
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < 7; ++i) params.values[off + i] = 0.4 * gauss(rng);
  const Vec3 x_obs{1.2, -0.4, 0.6};
  auto fwd = [&](Tape& tape) {
    const TapeRigid rt =
        tape_rigid_from_params(tape, tape.leaf(off), tape.leaf(off + 1), tape.leaf(off + 2),
                               tape.leaf(off + 3), tape.leaf(off + 4), tape.leaf(off + 5));
    const Var s = exp(tape.leaf(off + 6));
    const auto y = tape_rigid_inverse_apply(tape, rt, s, x_obs);
    return y[0] * y[0] + y[1] * y[1] + y[2] * y[2];
  };
  return check_against_fd(fwd, params, {off, off + 1, off + 2, off + 3, off + 4, off + 5, off + 6});
}

double check_soft_rasterize(uint64_t seed) {
  ParamSet params;
  const int off = params.add_slice("uv", 6, LrGroup::Pose);
  const double base[6] = {0.3, 0.3, 0.7, 0.35, 0.45, 0.7};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int i = 0; i < 6; ++i) params.values[off + i] = base[i] + 0.01 * gauss(rng);
  const int res = 32;
  std::vector<double> target((size_t)res * res, 0.0);
  for (int i = res / 2; i < res; ++i) target[i] = 1.0;
  const std::vector<uint8_t> valid((size_t)res * res, 1);
  auto fwd = [&](Tape& tape) {
    std::vector<Var> uv(6);
    for (int i = 0; i < 6; ++i) uv[i] = tape.leaf(off + i);
    return soft_silhouette_loss_tape(tape, uv, {{0, 1, 2}}, target, valid, res, 0.02);
  };
  return check_against_fd(fwd, params, {off, off + 1, off + 2, off + 3, off + 4, off + 5}, 1e-5);
}

// --- shared fixtures for the scene-level checks -------------------------------

struct SceneFixture {
  SceneDataset ds;
  TrainConfig cfg;
  SceneFixture() {
    SceneScript script;
    script.frames = 2;
    script.width = 16;
    script.height = 16;
    script.seed = 91;
    script.focal_px = 26.0;
    ds = gen_scene(script);
    cfg.images_per_step = 1;
    cfg.rays_per_image = 3;
    cfg.samples_per_ray = 6;
    cfg.background_samples = 3;
    cfg.eikonal_samples = 4;
    cfg.sdf_samples = 6;
    cfg.sampler_mode = SamplerMode::Stratified;
    cfg.seed = 17;
  }
};

const SceneFixture& scene_fixture() {
  static SceneFixture fx;
  return fx;
}

// Full training-step loss (all terms) against finite differences. Probes the
// smooth parameter groups; hand-pose coordinates are exercised by the warp
// checks since skinning weights are stop-gradient by design.
double check_train_loss(uint64_t seed, double lambda_scale) {
  const SceneFixture& fx = scene_fixture();
  TrainState state = init_train_state(fx.ds, fx.cfg);
  // Perturb fields so color and mask terms are away from symmetric points.
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& v : state.params.values) v += 1e-3 * gauss(rng);

  TrainConfig cfg = fx.cfg;
  (void)lambda_scale;
  auto loss_value = [&](ParamSet& p) {
    TrainState probe = state;
    probe.params = p;
    const StepStats s = train_loss_probe(fx.ds, cfg, TrainStage::Final, probe, 3, 0, nullptr);
    const LossWeights w = LossWeights::at_epoch(3, cfg.epochs_final);
    return s.loss.weighted_total(w);
  };
  std::vector<double> analytic;
  {
    TrainState probe = state;
    train_loss_probe(fx.ds, cfg, TrainStage::Final, probe, 3, 0, &analytic);
  }
  const SceneParams& sp = state.scene;
  std::vector<int> idx;
  idx.insert(idx.end(), {sp.f_h.offset + 3, sp.f_h.offset + 200, sp.f_h.offset + 2600,
                         sp.f_h.offset + sp.f_h.arch.bd_off(),
                         sp.f_o.offset + 5, sp.f_o.offset + 3000,
                         sp.f_o.offset + sp.f_o.arch.wc_off() + 7,
                         sp.f_b.offset + 11, sp.f_b.offset + sp.f_b.arch.wc_off() + 40});
  idx.push_back(sp.z_o_offset(state.params, 0) + 2);
  idx.push_back(sp.z_b_offset(state.params, 0) + 5);
  idx.push_back(sp.density_offset(state.params));
  idx.push_back(sp.density_offset(state.params) + 1);
  idx.push_back(sp.rot_o_offset(state.params, 0) + 1);
  idx.push_back(sp.t_o_offset(state.params, 0) + 2);
  idx.push_back(sp.log_s_offset(state.params));

  double worst = 0;
  for (int i : idx) {
    const double saved = state.params.values[i];
    state.params.values[i] = saved + 1e-4;
    const double fp = loss_value(state.params);
    state.params.values[i] = saved - 1e-4;
    const double fm = loss_value(state.params);
    state.params.values[i] = saved;
    const double fd = (fp - fm) / 2e-4;
    worst = std::max(worst, relative_error(analytic[i], fd, 1e-5));
  }
  return worst;
}

double check_prior_losses(uint64_t seed) {
  static const Skeleton sk = Skeleton::default_hand();
  TrainableField field;
  ParamSet params = make_field_params(TrainableField::hand_field(), field, seed);
  std::mt19937_64 rng(seed ^ 0xabc);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Vec3> pts;
  for (int i = 0; i < 6; ++i) pts.push_back({gauss(rng), gauss(rng), gauss(rng)});
  auto fwd = [&](Tape& tape) {
    return loss_sdf_tape(tape, field, sk, pts) + loss_eikonal_tape(tape, field, pts);
  };
  return check_against_fd(fwd, params, probe_indices(rng, 0, field.arch.param_count(), 50));
}

double check_refine_energy(uint64_t seed, double wc, double wm, double wr, bool align) {
  const SceneFixture& fx = scene_fixture();
  static std::map<uint64_t, TrainState> states;
  if (!states.count(seed)) states.emplace(seed, init_train_state(fx.ds, fx.cfg));
  TrainState state = states.at(seed);

  RefineProblem prob;
  prob.skeleton = state.skeleton.get();
  prob.scene = state.scene;
  prob.params = &state.params;
  prob.contact.tip_vertex_ids = state.skeleton->tip_vertex_ids();
  prob.cloud_canonical = fx.ds.cloud_canonical;
  prob.object_mesh_canonical = state.object_mesh;
  prob.w_contact = wc;
  prob.w_mask = wm;
  prob.w_reproj = wr;
  prob.raster_resolution = 48;
  for (int f = 0; f < fx.ds.n_frames; ++f) {
    RefineFrameData fd;
    fd.camera = fx.ds.cameras[f];
    fd.labels = fx.ds.labels[f].pixels;
    fd.joints2d = fx.ds.joints2d[f];
    fd.cloud2d = fx.ds.cloud2d[f];
    prob.frames.push_back(std::move(fd));
  }

  std::vector<double> analytic;
  refine_energy_probe(prob, align, &analytic);
  const SceneParams& sp = state.scene;
  std::vector<int> idx;
  for (int f = 0; f < fx.ds.n_frames; ++f) {
    for (int i = 0; i < 3; ++i) {
      idx.push_back(sp.t_h_offset(state.params, f) + i);
      idx.push_back(sp.t_o_offset(state.params, f) + i);
      if (!align) {
        idx.push_back(sp.rot_h_offset(state.params, f) + i);
        idx.push_back(sp.rot_o_offset(state.params, f) + i);
      }
    }
  }
  idx.push_back(sp.beta_offset(state.params) + 1);
  idx.push_back(sp.log_s_offset(state.params));

  double worst = 0;
  for (int i : idx) {
    const double saved = state.params.values[i];
    const double h = 1e-5;
    state.params.values[i] = saved + h;
    const double fp = refine_energy_probe(prob, align, nullptr);
    state.params.values[i] = saved - h;
    const double fm = refine_energy_probe(prob, align, nullptr);
    state.params.values[i] = saved;
    worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2 * h), 1e-5));
  }
  return worst;
}

}  // namespace

const std::vector<GradCheckEntry>& gradient_check_registry() {
  static const std::vector<GradCheckEntry> registry = {
      {"field_hand_eval", 1e-4, [] { return check_mlp_eval(TrainableField::hand_field(), false, false, 101); }},
      {"field_object_eval", 1e-4, [] { return check_mlp_eval(TrainableField::object_field(), true, false, 102); }},
      {"field_background_eval", 1e-4, [] { return check_mlp_eval(TrainableField::background_field(), true, true, 103); }},
      {"field_distance_gradient", 1e-4, [] { return check_distance_gradient(104); }},
      {"sdf_to_density", 1e-4, [] { return check_density(105); }},
      {"warp_hand_inverse_lbs", 1e-4, [] { return check_warp_hand(106); }},
      {"warp_object_rigid", 1e-4, [] { return check_warp_object(107); }},
      {"render_losses_rgb_segm_sparse", 1e-4, [] { return check_train_loss(108, 1.0); }},
      {"loss_sdf_eikonal", 1e-4, [] { return check_prior_losses(109); }},
      {"soft_rasterizer", 1e-3, [] { return check_soft_rasterize(110); }},
      {"refine_contact", 1e-4, [] { return check_refine_energy(111, 1.0, 0.0, 0.0, false); }},
      {"refine_mask", 1e-3, [] { return check_refine_energy(112, 0.0, 1.0, 0.0, false); }},
      {"refine_reproj", 1e-4, [] { return check_refine_energy(113, 0.0, 0.0, 1.0, false); }},
      {"align_energy", 1e-4, [] { return check_refine_energy(114, 1.0, 0.0, 0.01, true); }},
  };
  return registry;
}

}  // namespace holdfield

#include "holdfield/scene_params.hpp"

#include <cmath>

namespace holdfield {

SceneParams SceneParams::build(ParamSet& params, int n_frames, int n_bones) {
  SceneParams sp;
  sp.n_frames = n_frames;
  sp.n_bones = n_bones;
  sp.f_h = register_field(params, TrainableField::hand_field());
  sp.f_o = register_field(params, TrainableField::object_field());
  sp.f_b = register_field(params, TrainableField::background_field());
  params.add_slice("z_o", kLatentDim * n_frames, LrGroup::Field);
  params.add_slice("z_b", kLatentDim * n_frames, LrGroup::Field);
  for (int f = 0; f < n_frames; ++f)
    params.add_slice(pose_slice(f), 3 * n_bones + 12, LrGroup::Pose);
  {
    const int off = params.add_slice("shape_globals", n_bones + 1, LrGroup::Pose);
    for (int b = 0; b < n_bones; ++b) params.values[off + b] = 1.0;  // beta
    params.values[off + n_bones] = 0.0;                              // log s
  }
  {
    const int off = params.add_slice("density", 2, LrGroup::Field);
    params.values[off + 0] = std::log(10.0);  // log alpha1
    params.values[off + 1] = std::log(0.1);   // log alpha2
  }
  return sp;
}

HandState SceneParams::hand_state(const ParamSet& p, int frame) const {
  HandState hs;
  hs.theta.resize(n_bones);
  const double* th = p.values.data() + theta_offset(p, frame);
  for (int b = 0; b < n_bones; ++b) hs.theta[b] = {th[3 * b], th[3 * b + 1], th[3 * b + 2]};
  hs.beta = beta(p);
  const double* rh = p.values.data() + rot_h_offset(p, frame);
  const double* th_t = p.values.data() + t_h_offset(p, frame);
  hs.root.rotation = rotation_from_axis_angle({rh[0], rh[1], rh[2]});
  hs.root.translation = {th_t[0], th_t[1], th_t[2]};
  hs.root.scale = 1.0;
  return hs;
}

ObjectState SceneParams::object_state(const ParamSet& p, int frame) const {
  ObjectState obj;
  const double* ro = p.values.data() + rot_o_offset(p, frame);
  const double* to = p.values.data() + t_o_offset(p, frame);
  obj.to_world.rotation = rotation_from_axis_angle({ro[0], ro[1], ro[2]});
  obj.to_world.translation = {to[0], to[1], to[2]};
  obj.to_world.scale = std::exp(p.values[log_s_offset(p)]);
  obj.latent.assign(p.values.data() + z_o_offset(p, frame),
                    p.values.data() + z_o_offset(p, frame) + kLatentDim);
  return obj;
}

DensityParams SceneParams::density(const ParamSet& p) const {
  const int off = density_offset(p);
  return {std::exp(p.values[off]), std::exp(p.values[off + 1])};
}

std::vector<double> SceneParams::beta(const ParamSet& p) const {
  const double* b = p.values.data() + beta_offset(p);
  return std::vector<double>(b, b + n_bones);
}

void SceneParams::set_hand_state(ParamSet& p, int frame, const HandState& hs) const {
  double* th = p.values.data() + theta_offset(p, frame);
  for (int b = 0; b < n_bones; ++b) {
    th[3 * b] = hs.theta[b].x;
    th[3 * b + 1] = hs.theta[b].y;
    th[3 * b + 2] = hs.theta[b].z;
  }
  const Vec3 aa = axis_angle_from_rotation(hs.root.rotation);
  double* rh = p.values.data() + rot_h_offset(p, frame);
  rh[0] = aa.x; rh[1] = aa.y; rh[2] = aa.z;
  double* tt = p.values.data() + t_h_offset(p, frame);
  tt[0] = hs.root.translation.x;
  tt[1] = hs.root.translation.y;
  tt[2] = hs.root.translation.z;
  double* beta_dst = p.values.data() + beta_offset(p);
  for (int b = 0; b < n_bones; ++b) beta_dst[b] = hs.beta[b];
}

void SceneParams::set_object_state(ParamSet& p, int frame, const ScaledRigid& obj) const {
  const Vec3 aa = axis_angle_from_rotation(obj.rotation);
  double* ro = p.values.data() + rot_o_offset(p, frame);
  ro[0] = aa.x; ro[1] = aa.y; ro[2] = aa.z;
  double* to = p.values.data() + t_o_offset(p, frame);
  to[0] = obj.translation.x;
  to[1] = obj.translation.y;
  to[2] = obj.translation.z;
  p.values[log_s_offset(p)] = std::log(obj.scale);
}

void SceneParams::set_density(ParamSet& p, const DensityParams& dp) const {
  const int off = density_offset(p);
  p.values[off] = std::log(dp.alpha1);
  p.values[off + 1] = std::log(dp.alpha2);
}

}  // namespace holdfield

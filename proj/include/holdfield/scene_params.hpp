#pragma once

#include <string>

#include "holdfield/fields.hpp"
#include "holdfield/rendering.hpp"
#include "holdfield/skeleton.hpp"

namespace holdfield {

// Canonical layout of every optimizable quantity for one scene: the three
// field parameter blocks, per-frame latents, per-frame poses (axis-angle
// rotations), and globals (shape scales, object scale, density parameters).
// Rotations are stored as axis-angle and materialized to matrices on read.
struct SceneParams {
  int n_frames = 0;
  int n_bones = 0;
  TrainableField f_h, f_o, f_b;

  static std::string pose_slice(int frame) { return "pose_f" + std::to_string(frame); }

  // Per-frame pose slice layout.
  int theta_offset(const ParamSet& p, int frame) const {
    return p.slice(pose_slice(frame)).offset;
  }
  int rot_h_offset(const ParamSet& p, int frame) const {
    return theta_offset(p, frame) + 3 * n_bones;
  }
  int t_h_offset(const ParamSet& p, int frame) const { return rot_h_offset(p, frame) + 3; }
  int rot_o_offset(const ParamSet& p, int frame) const { return t_h_offset(p, frame) + 3; }
  int t_o_offset(const ParamSet& p, int frame) const { return rot_o_offset(p, frame) + 3; }

  int beta_offset(const ParamSet& p) const { return p.slice("shape_globals").offset; }
  int log_s_offset(const ParamSet& p) const { return beta_offset(p) + n_bones; }
  int density_offset(const ParamSet& p) const { return p.slice("density").offset; }
  int z_o_offset(const ParamSet& p, int frame) const {
    return p.slice("z_o").offset + kLatentDim * frame;
  }
  int z_b_offset(const ParamSet& p, int frame) const {
    return p.slice("z_b").offset + kLatentDim * frame;
  }

  // Registers all slices on an empty ParamSet.
  static SceneParams build(ParamSet& params, int n_frames, int n_bones);

  HandState hand_state(const ParamSet& p, int frame) const;
  ObjectState object_state(const ParamSet& p, int frame) const;
  DensityParams density(const ParamSet& p) const;
  std::vector<double> beta(const ParamSet& p) const;

  void set_hand_state(ParamSet& p, int frame, const HandState& hs) const;
  void set_object_state(ParamSet& p, int frame, const ScaledRigid& obj) const;
  void set_density(ParamSet& p, const DensityParams& dp) const;
};

}  // namespace holdfield

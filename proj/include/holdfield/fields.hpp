#pragma once

#include <optional>
#include <span>
#include <vector>

#include "holdfield/autodiff.hpp"
#include "holdfield/geometry.hpp"

namespace holdfield {

struct InsideForeground : Error {
  explicit InsideForeground(const std::string& msg = "sample inside the foreground sphere")
      : Error(msg) {}
};

struct FieldSample {
  double d = 0.0;  // signed distance, scene units
  Vec3 c;          // color in [0,1]^3
};

// Latent codes are fixed at 32 dims; per-frame for the background, per-frame
// for the object appearance.
inline constexpr int kLatentDim = 32;

// Positional-encoded MLP with a distance head and a color head. The color
// head sees the last hidden feature plus any latent / extra conditioning;
// the distance head never sees them.
struct MlpArchitecture {
  int in_dim = 3;
  int pe_octaves = 6;
  int hidden = 64;
  int depth = 4;        // hidden layers
  int latent_dim = 0;   // color-only conditioning
  int extra_dim = 0;    // color-only conditioning (e.g. view direction)

  int encoded_dim() const { return in_dim * (1 + 2 * pe_octaves); }
  int color_in_dim() const { return hidden + latent_dim + extra_dim; }
  int param_count() const;

  // Offsets into the field's parameter slice.
  int w_off(int layer) const;
  int b_off(int layer) const;
  int wd_off() const;
  int bd_off() const;
  int wc_off() const;
  int bc_off() const;
};

struct TrainableField {
  MlpArchitecture arch;
  std::string slice;  // name of the parameter slice
  int offset = -1;    // resolved offset into the ParamSet

  static TrainableField hand_field() {
    return {MlpArchitecture{3, 6, 64, 4, 0, 0}, "psi_h", -1};
  }
  static TrainableField object_field() {
    return {MlpArchitecture{3, 6, 64, 4, kLatentDim, 0}, "psi_o", -1};
  }
  static TrainableField background_field() {
    return {MlpArchitecture{4, 6, 64, 4, kLatentDim, 3}, "psi_b", -1};
  }
};

// Registers the field's parameter slice and returns the resolved field.
TrainableField register_field(ParamSet& params, TrainableField field);

// Distance-head initialization approximating d(x) = |x| - radius, with the
// positional-encoding columns zeroed; deterministic in the seed.
void init_geometric(ParamSet& params, const TrainableField& field, double radius, uint64_t seed);

// --- plain (double) evaluation ----------------------------------------------

FieldSample eval_mlp(const MlpArchitecture& arch, const double* p, const double* x_in,
                     const double* latent, const double* extra);
// Distance plus its input-space gradient (exact backprop through the net).
double eval_mlp_distance_grad(const MlpArchitecture& arch, const double* p, const double* x_in,
                              double* grad_out);

FieldSample eval_hand(const TrainableField& f, const ParamSet& params, const Vec3& x_canonical);
FieldSample eval_object(const TrainableField& f, const ParamSet& params, const Vec3& x_canonical,
                        const double* z_object);
FieldSample eval_background(const TrainableField& f, const ParamSet& params, const Vec3& x,
                            const Vec3& view, const double* z_background, double r_bg);

// NeRF++-style inverted-sphere coordinates: (unit direction, R_bg / |x|),
// the inverse depth clamped to [1e-6, 1]. Throws InsideForeground for points
// strictly inside the sphere.
std::array<double, 4> inverted_sphere_param(const Vec3& x, double r_bg);

// --- tape evaluation ----------------------------------------------------------

struct TapeFieldSample {
  Var d;
  Var c[3];
};

// MLP evaluation as a tape fat node; color is squashed on the tape.
TapeFieldSample eval_mlp_tape(Tape& tape, const MlpArchitecture& arch, int param_offset,
                              std::span<const Var> x, std::span<const Var> latent,
                              std::span<const Var> extra);

// Distance and its spatial gradient as tape outputs; backward implements the
// full second-order flow so eikonal-style losses differentiate exactly.
struct TapeDistGrad {
  Var d;
  Var g[3];
};
TapeDistGrad eval_mlp_distance_grad_tape(Tape& tape, const MlpArchitecture& arch,
                                         int param_offset, std::span<const Var> x);

// --- analytic shapes -----------------------------------------------------------

struct AnalyticShape {
  enum class Kind { Sphere, Box, Capsule, Union };
  Kind kind = Kind::Sphere;
  double radius = 1.0;          // sphere, capsule
  Vec3 half_extents{1, 1, 1};   // box
  double half_length = 1.0;     // capsule, along +z
  std::vector<AnalyticShape> children;  // union
  ScaledRigid to_world;         // shape frame

  static AnalyticShape sphere(double r);
  static AnalyticShape box(const Vec3& half_extents);
  static AnalyticShape capsule(double half_length, double r);
  static AnalyticShape union_of(std::vector<AnalyticShape> shapes);
};

double analytic_sdf(const AnalyticShape& shape, const Vec3& p);

// --- checkpoints -----------------------------------------------------------------

// Versioned binary container, magic "HOLDF001", little-endian f32 payload.
struct Checkpoint {
  std::vector<MlpArchitecture> archs;  // hand, object, background
  ParamSet params;
  std::vector<double> adam_m, adam_v;
  int64_t adam_step = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace holdfield

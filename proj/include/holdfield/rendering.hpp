#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <optional>
#include <span>

#include "holdfield/fields.hpp"
#include "holdfield/skeleton.hpp"

namespace holdfield {

// Laplace-CDF density parameters (VolSDF style); positivity is enforced by
// the exponential reparametrization in the parameter set.
struct DensityParams {
  double alpha1 = 10.0;
  double alpha2 = 0.1;
};

// sigma = alpha1 * Psi_{alpha2}(-d) with Psi the scaled-Laplace CDF.
template <typename T>
T sdf_to_density(T d, T a1, T a2) {
  if (scalar_value(d) <= 0.0) {
    using std::exp;
    return a1 * (1.0 - 0.5 * exp(d / a2));
  }
  using std::exp;
  return a1 * (0.5 * exp(-d / a2));
}

enum class SamplerMode { ErrorBounded, Stratified };
enum class AmodalMode { OcclusionAware, Independent };

struct SamplerConfig {
  int count = 64;
  SamplerMode mode = SamplerMode::ErrorBounded;
  int init_count = 16;
  int rounds = 5;
  bool jitter = false;
  int background_count = 16;
};

// Sample depths for one entity along a ray: uniform init plus greedy splits
// of the segments with the largest opacity-error bound (sigma variation times
// segment length). `phase` offsets the initial strata so independently
// sampled entities do not produce coincident depths.
std::vector<double> sample_ray(const Ray& ray, const std::function<double(double)>& sigma_at,
                               const SamplerConfig& config, double phase = 0.5,
                               uint64_t seed = 0);

// --- compositing core (shared by the plain and tape paths) -------------------

template <typename T>
struct EntitySamples {
  int entity = 0;  // 0 hand, 1 object, 2 background
  std::vector<double> t;
  std::vector<T> sigma;
  std::vector<std::array<T, 3>> color;
};

template <typename T>
struct CompositeResult {
  std::array<T, 3> color;   // sum tau_i c_i
  T weight_sum;             // sum tau_i
  T per_entity[3];          // occlusion-aware per-entity mass
  T independent[3];         // per-entity mass with independent transmittance
  T depth;                  // sum tau_i t_i
  T residual;               // exp(-sum sigma_i delta_i)
};

// Merges the entity sample lists by depth and integrates transmittance.
// delta_i spans to the next merged sample, the last one to `far`.
template <typename T>
CompositeResult<T> composite(std::vector<const EntitySamples<T>*> lists, double far) {
  struct Ref {
    double t;
    int list, idx;
  };
  std::vector<Ref> merged;
  for (int li = 0; li < (int)lists.size(); ++li)
    for (int i = 0; i < (int)lists[li]->t.size(); ++i)
      merged.push_back({lists[li]->t[i], li, i});
  std::stable_sort(merged.begin(), merged.end(),
                   [](const Ref& a, const Ref& b) { return a.t < b.t; });

  auto make_scalar = [&](double v) -> T {
    if constexpr (std::is_same_v<T, Var>) {
      for (auto* l : lists)
        if (!l->sigma.empty()) return l->sigma[0].tape->constant(v);
      throw Error("composite: empty tape sample lists");
    } else {
      return v;
    }
  };

  CompositeResult<T> out{{make_scalar(0), make_scalar(0), make_scalar(0)},
                         make_scalar(0),
                         {make_scalar(0), make_scalar(0), make_scalar(0)},
                         {make_scalar(0), make_scalar(0), make_scalar(0)},
                         make_scalar(0),
                         make_scalar(1)};
  if (merged.empty()) return out;

  T trans = make_scalar(1.0);
  T own_trans[3] = {make_scalar(1.0), make_scalar(1.0), make_scalar(1.0)};
  for (size_t i = 0; i < merged.size(); ++i) {
    const auto& ref = merged[i];
    const double t_next = i + 1 < merged.size() ? merged[i + 1].t : far;
    const double delta = std::max(t_next - ref.t, 1e-9);
    const EntitySamples<T>& list = *lists[ref.list];
    const T sigma_delta = list.sigma[ref.idx] * delta;
    using std::exp;
    const T step_trans = exp(-sigma_delta);
    const T alpha = 1.0 - step_trans;
    const T tau = trans * alpha;
    for (int c = 0; c < 3; ++c) out.color[c] = out.color[c] + tau * list.color[ref.idx][c];
    out.weight_sum = out.weight_sum + tau;
    out.per_entity[list.entity] = out.per_entity[list.entity] + tau;
    out.independent[list.entity] =
        out.independent[list.entity] + own_trans[list.entity] * alpha;
    own_trans[list.entity] = own_trans[list.entity] * step_trans;
    out.depth = out.depth + tau * ref.t;
    trans = trans * step_trans;
  }
  out.residual = trans;
  return out;
}

// --- plain-path scene rendering ------------------------------------------------

struct EntityField {
  std::function<FieldSample(const Vec3& x_world)> eval;
};
struct BackgroundFieldFn {
  std::function<FieldSample(const Vec3& x_world, const Vec3& view)> eval;
};

struct RenderScene {
  std::optional<EntityField> hand;
  std::optional<EntityField> object;
  std::optional<BackgroundFieldFn> background;
  DensityParams density;
  Vec3 fg_center{0, 0, 0};
  double r_bg = 3.0;
  SamplerConfig sampler;
  AmodalMode amodal = AmodalMode::OcclusionAware;
  // Diagnostic: samples dropped due to singular skinning blends; shared by
  // copies of the scene so parallel renders keep one total.
  std::shared_ptr<std::atomic<int>> drop_counter = std::make_shared<std::atomic<int>>(0);
};

struct RenderOutput {
  Vec3 color;        // C
  Vec3 fg_color;     // C_F
  double m_f = 0, m_h = 0, m_o = 0;
  Vec3 class_probs;  // S over (hand, object, background)
  double depth = 0;
  int dropped_samples = 0;
};

// Diagnostic dump of the merged foreground samples.
struct RaySamples {
  std::vector<double> t, sigma, delta;
  std::vector<int> entity;
};

// Terminal background opacity: appended sample with sigma * delta = 20.
inline constexpr double kOpaqueBackgroundSigmaDelta = 20.0;

RenderOutput render_pixel(const RenderScene& scene, const Ray& pixel_ray,
                          RaySamples* dump = nullptr, uint64_t sample_seed = 0);

struct ImageChannels {
  int width = 0, height = 0;
  std::vector<Vec3> color;
  std::vector<double> m_f, m_h, m_o, depth;
  std::vector<Vec3> class_probs;
  int dropped_samples = 0;
};

// Renders the full frame, or only `pixels` (linear indices) when given.
// Deterministic for any worker count.
ImageChannels render_image(const RenderScene& scene, const Camera& camera,
                           const std::vector<int>* pixels = nullptr, int workers = 0);

// --- neural scene binding ------------------------------------------------------

struct ObjectState {
  ScaledRigid to_world;  // scale carries the global object scale s
  std::vector<double> latent;
};

struct NeuralScene {
  const Skeleton* skeleton = nullptr;
  const PosedHand* posed = nullptr;  // per-frame cache
  TrainableField f_h, f_o, f_b;
  const ParamSet* params = nullptr;
  ObjectState object;
  std::vector<double> z_background;
  DensityParams density;
  double r_bg = 3.0;
  bool hand_enabled = true;
};

// World-space evaluators over the canonical fields (inverse LBS for the hand,
// rigid inverse for the object, inverted sphere for the background).
RenderScene bind_neural_scene(const NeuralScene& neural, const SamplerConfig& sampler,
                              AmodalMode amodal = AmodalMode::OcclusionAware);

// --- tape-path building blocks ---------------------------------------------------

struct TapeRigid {
  Var r[9];
  Var t[3];
};

TapeRigid tape_rigid_from_params(Tape& tape, Var ax, Var ay, Var az, Var tx, Var ty, Var tz);
TapeRigid tape_compose(const TapeRigid& outer, const TapeRigid& inner);

// Joint positions and bone transforms with pose and shape on the tape; pass
// constants for quantities that should not receive gradients.
std::vector<std::array<Var, 3>> tape_joint_positions(Tape& tape, const Skeleton& sk,
                                                     std::span<const Var> beta);
std::vector<TapeRigid> tape_forward_kinematics(Tape& tape, const Skeleton& sk,
                                               std::span<const Var> theta,
                                               std::span<const Var> beta, const TapeRigid& root,
                                               std::vector<std::array<Var, 3>>* joints_out = nullptr);

// Inverse of the weight-blended bone transform applied to a fixed observed
// point; a fat node with an analytic backward into all bone entries.
std::array<Var, 3> tape_blend_inverse(Tape& tape, std::span<const TapeRigid> bones,
                                      const std::vector<double>& weights, const Vec3& x_obs);

// (s R)^-1 (x - t) with scale as a tape variable.
std::array<Var, 3> tape_rigid_inverse_apply(Tape& tape, const TapeRigid& rot_trans, Var scale,
                                            const Vec3& x_obs);

}  // namespace holdfield

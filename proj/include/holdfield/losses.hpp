#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "holdfield/rendering.hpp"
#include "holdfield/spatial.hpp"

namespace holdfield {

// Loss weights with their training schedule: the segmentation weight decays
// over epochs while the prior weights (sdf, sparse) ramp up.
struct LossWeights {
  double lambda_segm = 1.0;
  double lambda_sdf = 0.1;
  double lambda_sparse = 0.0;
  double lambda_eikonal = 0.1;

  static LossWeights at_epoch(int epoch, int total_epochs) {
    const double p =
        total_epochs > 1 ? std::clamp((double)epoch / (total_epochs - 1), 0.0, 1.0) : 1.0;
    LossWeights w;
    w.lambda_segm = 1.0 + p * (0.1 - 1.0);
    w.lambda_sdf = 0.1 + p * (1.0 - 0.1);
    w.lambda_sparse = 0.5 * p;
    w.lambda_eikonal = 0.1;
    return w;
  }
};

// Rays whose closest approach to the posed hand / object meshes exceeds the
// far threshold; members index into the ray batch that produced them.
struct FarRaySets {
  std::vector<int> far_hand;
  std::vector<int> far_object;
};

inline constexpr double kFarRayThreshold = 0.1;  // scene units

FarRaySets build_far_ray_sets(std::span<const Ray> rays, const MeshBvh* hand_mesh,
                              const MeshBvh* object_mesh, double tau_far = kFarRayThreshold);

// Mean L1 over rays, summed across channels first. Shared by the plain and
// tape paths.
template <typename T>
T loss_rgb(const std::vector<std::array<T, 3>>& rendered, const std::vector<Vec3>& target) {
  using std::abs;
  T acc = rendered[0][0] - rendered[0][0];  // zero of the right type
  for (size_t i = 0; i < rendered.size(); ++i)
    for (int c = 0; c < 3; ++c) acc = acc + abs(rendered[i][c] - target[i][c]);
  return acc / (double)rendered.size();
}

// Identical arithmetic; kept separate because the targets are one-hot class
// vectors rather than colors.
template <typename T>
T loss_segm(const std::vector<std::array<T, 3>>& rendered_probs,
            const std::vector<Vec3>& one_hot_target) {
  return loss_rgb(rendered_probs, one_hot_target);
}

// Mean amodal-mask probability over the far rays; zero (with the empty flag
// surfaced to the caller) when a set is empty.
template <typename T>
T loss_sparse_term(const std::vector<T>& amodal, const std::vector<int>& far_set, Tape* tape) {
  if (far_set.empty()) {
    if constexpr (std::is_same_v<T, Var>) return tape->constant(0.0);
    else return 0.0;
  }
  using std::abs;
  T acc = abs(amodal[far_set[0]]);
  for (size_t i = 1; i < far_set.size(); ++i) acc = acc + abs(amodal[far_set[i]]);
  return acc / (double)far_set.size();
}

// Canonical-space sampling policy for the shape priors: a 50/50 mix of
// uniform box samples and a Gaussian shell around the given surface.
std::vector<Vec3> sample_prior_points(int count, const Vec3& box_lo, const Vec3& box_hi,
                                      const TriMesh* shell_surface, double shell_sigma,
                                      uint64_t seed);

// |f_h(x) - template_sdf(x)| averaged over the sample set.
double loss_sdf(const TrainableField& f, const ParamSet& params, const Skeleton& sk,
                std::span<const Vec3> points);
Var loss_sdf_tape(Tape& tape, const TrainableField& f, const Skeleton& sk,
                  std::span<const Vec3> points);

// Mean (|grad f| - 1)^2 with exact engine gradients.
double loss_eikonal(const TrainableField& f, const ParamSet& params,
                    std::span<const Vec3> points);
Var loss_eikonal_tape(Tape& tape, const TrainableField& f, std::span<const Vec3> points);

struct LossBreakdown {
  double rgb = 0, segm = 0, sdf = 0, sparse = 0, eikonal = 0;
  double total = 0;
  bool empty_far_hand = false, empty_far_object = false;

  double weighted_total(const LossWeights& w) const {
    return rgb + w.lambda_segm * segm + w.lambda_sdf * sdf + w.lambda_sparse * sparse +
           w.lambda_eikonal * eikonal;
  }
};

}  // namespace holdfield

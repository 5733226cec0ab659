#pragma once

#include <cstdint>

#include "holdfield/scene_params.hpp"

namespace holdfield {

// Frequently-contacted hand vertices, indices into the full template mesh.
struct ContactSpec {
  std::vector<int> tip_vertex_ids;
};

// Sum over tip vertices of the exact distance to the nearest object vertex.
double loss_contact(const TriMesh& hand_posed, const TriMesh& object_posed,
                    const ContactSpec& spec);

struct GrayImage {
  int width = 0, height = 0;
  std::vector<double> values;

  double at(int x, int y) const { return values[(size_t)y * width + x]; }
};

// Soft silhouette: per pixel 1 - prod_faces (1 - sigmoid(signed 2D distance /
// sharpness)); distances in image units (pixel coordinates / resolution).
GrayImage soft_rasterize(const TriMesh& mesh, const Camera& camera, double sharpness,
                         int resolution = 128);

// Occlusion-aware silhouette loss: per entity, mean L1 against its target
// mask over pixels not labeled as the other entity (255 = ignore everywhere).
double loss_mask(const GrayImage& hand_sil, const GrayImage& object_sil,
                 const std::vector<uint8_t>& labels, int label_width, int label_height);

// Mean 2D distance in pixels between projected points and their targets.
double loss_reproj(const std::vector<Vec3>& points, const std::vector<Pixel>& targets,
                   const Camera& camera);

// Tape version of the silhouette loss; `uv` holds normalized vertex
// coordinates (2 per vertex). Exposed for gradient checking.
Var soft_silhouette_loss_tape(Tape& tape, std::span<const Var> uv,
                              const std::vector<std::array<int, 3>>& faces,
                              const std::vector<double>& target,
                              const std::vector<uint8_t>& valid, int resolution,
                              double sharpness);

// --- stage problems -----------------------------------------------------------

struct RefineFrameData {
  Camera camera;
  std::vector<uint8_t> labels;  // label map at camera resolution (0 bg, 1 hand, 2 obj, 255 ignore)
  std::vector<Pixel> joints2d;  // observed 2D hand joints
  std::vector<Pixel> cloud2d;   // observed 2D projections of the sparse cloud subset
};

struct RefineProblem {
  const Skeleton* skeleton = nullptr;
  SceneParams scene;
  ParamSet* params = nullptr;
  std::vector<RefineFrameData> frames;
  ContactSpec contact;
  std::vector<Vec3> cloud_canonical;  // object-frame sparse points (align-stage targets)
  TriMesh object_mesh_canonical;      // extracted object mesh (refine-stage targets)

  double w_contact = 1.0;
  double w_mask = 10.0;
  double w_reproj = 0.01;
  int raster_resolution = 128;
  double raster_sharpness = 0.01;
  int max_iterations = 60;
  double contact_gate = 2.0;  // per-frame gating distance for the refine stage
  bool hand_enabled = true;   // ablations can run object-only
};

struct RefineResult {
  bool converged = false;  // false = NoConvergence, best-so-far returned
  int iterations = 0;
  std::vector<double> energies;  // accepted-iteration trace, monotone
  double contact = 0, mask = 0, reproj = 0;
};

// Scale/translation alignment: updates {t_h, t_o} per frame plus {beta, s};
// rotations and articulation stay fixed. Contact pulls fingertips toward the
// sparse object cloud, reprojection anchors the 2D evidence.
RefineResult align_init(RefineProblem& problem);

// Mesh-based pose refinement over {R_h, t_h, R_o, t_o, beta, s} with the
// extracted object mesh: contact + occlusion-aware silhouettes + reprojection,
// monotone under backtracking line search.
RefineResult refine_poses(RefineProblem& problem);

// Energy value and gradient at the current parameters (test hook).
double refine_energy_probe(RefineProblem& problem, bool align_stage, std::vector<double>* grad);

}  // namespace holdfield

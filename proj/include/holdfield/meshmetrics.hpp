#pragma once

#include <functional>

#include "holdfield/spatial.hpp"
#include "holdfield/trimesh.hpp"

namespace holdfield {

struct EmptyLevelSet : Error {
  explicit EmptyLevelSet(const std::string& msg = "no zero crossing in the sampled grid")
      : Error(msg) {}
};

// Zero level set of a scalar field over a regular grid; vertices linearly
// interpolated along cell edges and welded across cells.
TriMesh marching_cubes(const std::function<double(const Vec3&)>& field, int resolution,
                       const Vec3& lo, const Vec3& hi, int workers = 0);

struct IcpResult {
  ScaledRigid transform;  // maps source into the target frame
  TriMesh aligned;
  double rms = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Umeyama-based ICP with optional scale, seeded by centroid/scale matching
// plus fixed random-rotation restarts; the best alignment wins.
IcpResult icp_align(const TriMesh& source, const TriMesh& target, bool allow_scale,
                    int restarts = 10, int max_iterations = 100, double tol = 1e-6);

// Least-squares similarity (Umeyama) between matched point sets.
ScaledRigid umeyama(const std::vector<Vec3>& from, const std::vector<Vec3>& to, bool allow_scale);

// Symmetric mean-of-squared-distance Chamfer metric between point samples
// (cm^2 at the 1 unit = 1 cm convention).
double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b);
// F-score (percent) at the given distance threshold (cm).
double fscore(const std::vector<Vec3>& a, const std::vector<Vec3>& b, double threshold);
// Recall side only: fraction of b (reference) points matched by a within the
// threshold; used for hole detection on surface patches.
double recall_percent(const std::vector<Vec3>& pred, const std::vector<Vec3>& reference,
                      double threshold);

inline constexpr int kMetricSampleCount = 30000;
inline constexpr uint64_t kMetricSampleSeed = 411;

double chamfer_mesh(const TriMesh& a, const TriMesh& b, int samples = kMetricSampleCount);
double fscore_mesh(const TriMesh& a, const TriMesh& b, double threshold,
                   int samples = kMetricSampleCount);

// Root-relative mean per-joint error in millimeters.
double mpjpe(const std::vector<Vec3>& predicted, const std::vector<Vec3>& truth, int root_index);

// Hand-relative Chamfer: object meshes translated by minus their hand root,
// averaged over frames.
double cd_h(const std::vector<TriMesh>& pred_objects, const std::vector<TriMesh>& gt_objects,
            const std::vector<Vec3>& pred_roots, const std::vector<Vec3>& gt_roots,
            int samples = kMetricSampleCount);

struct MetricReport {
  double mpjpe_mm = 0.0;
  double cd_cm2 = 0.0;
  double f5_pct = 0.0;
  double f10_pct = 0.0;
  double cdh_cm2 = 0.0;
  std::vector<double> per_frame_mpjpe;
  std::vector<double> per_frame_cdh;
  // Stated in every serialized report.
  static const char* cd_definition() {
    return "symmetric mean-of-squared point distance, cm^2; F-score thresholds 0.5/1.0 cm";
  }
};

void save_metric_report(const MetricReport& report, const std::string& path);

}  // namespace holdfield

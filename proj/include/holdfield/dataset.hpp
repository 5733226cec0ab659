#pragma once

#include <memory>

#include "holdfield/fields.hpp"
#include "holdfield/imageio.hpp"
#include "holdfield/skeleton.hpp"

namespace holdfield {

struct FramePoses {
  HandState hand;
  ScaledRigid object;  // scale carries the global object scale s
};

// One captured (here: generated) sequence and its side information. The
// object point cloud arrives in an arbitrary-scale object frame; loading
// normalizes it to the canonical frame (centroid at the origin, unit ball)
// and rewrites the object poses accordingly.
struct SceneDataset {
  int width = 0, height = 0, n_frames = 0;
  double r_bg = 3.0;
  std::vector<Camera> cameras;
  std::shared_ptr<Skeleton> skeleton;
  std::vector<ImageU8> images;                 // RGB
  std::vector<ImageU8> labels;                 // 0 bg, 1 hand, 2 object, 255 ignore
  std::vector<std::vector<double>> depth;      // optional GT depth per frame
  std::vector<Vec3> cloud_raw;                 // as stored
  std::vector<Vec3> cloud_canonical;           // normalized
  double norm_scale = 1.0;                     // raw = centroid + norm_scale * canonical
  Vec3 norm_centroid{0, 0, 0};
  std::vector<FramePoses> init_poses;          // canonical-frame object poses
  std::vector<FramePoses> gt_poses;            // synthetic ground truth
  bool has_gt = false;
  AnalyticShape gt_object_shape;               // in the generator's canonical frame
  std::vector<std::vector<Pixel>> joints2d;    // per frame, per joint
  std::vector<std::vector<Pixel>> cloud2d;     // per frame, per observed cloud point
  std::string root_dir;

  void validate() const;
};

void save_dataset(const SceneDataset& ds, const std::string& dir);
SceneDataset load_dataset(const std::string& dir);

// Rewrites the manifest poses in place, recording the producing stage and
// iteration count in a provenance field.
void write_back_poses(const std::string& dir, const SceneDataset& ds,
                      const std::vector<FramePoses>& refined, const std::string& stage,
                      int iterations);

}  // namespace holdfield

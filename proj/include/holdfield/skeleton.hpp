#pragma once

#include <memory>
#include <vector>

#include "holdfield/spatial.hpp"
#include "holdfield/trimesh.hpp"

namespace holdfield {

struct SingularBlend : Error {
  explicit SingularBlend(const std::string& msg = "blended skinning matrix is singular")
      : Error(msg) {}
};

// Per-frame articulation state: pose theta (axis-angle per bone), per-bone
// shape scales beta, and the global root transform {R_h, t_h} (scale 1).
struct HandState {
  std::vector<Vec3> theta;
  std::vector<double> beta;
  ScaledRigid root;

  static HandState rest(int n_bones) {
    HandState hs;
    hs.theta.assign(n_bones, Vec3{0, 0, 0});
    hs.beta.assign(n_bones, 1.0);
    return hs;
  }
};

struct BoneSpec {
  int parent = -1;            // -1 for the root
  Vec3 rest_offset;           // joint position relative to parent joint (beta-scaled)
  Vec3 tip_offset;            // capsule axis from the joint (beta-scaled)
  double radius = 0.25;       // capsule radius (beta-scaled)
  int ring_segments = 20;     // base mesh resolution before subdivision
  int cap_rows = 3;
  int body_rows = 3;
};

// Articulated capsule-chain skeleton with a subdivided template mesh,
// smooth per-vertex skinning weights and spatial indices built once.
class Skeleton {
 public:
  Skeleton(std::vector<BoneSpec> bones, int k_nearest = 4);

  // Default desk-scale skeleton: palm root plus two 2-bone finger chains.
  static Skeleton default_hand();

  int bone_count() const { return (int)bones_.size(); }
  int k_nearest() const { return k_; }
  const std::vector<BoneSpec>& bones() const { return bones_; }
  const TriMesh& template_mesh() const { return template_mesh_; }
  const std::vector<std::vector<double>>& template_weights() const { return weights_; }
  const std::vector<std::pair<int, int>>& bone_vertex_ranges() const { return bone_ranges_; }
  const std::vector<int>& tip_vertex_ids() const { return tip_ids_; }
  const std::vector<int>& owner_bones() const { return owner_bone_; }
  const std::vector<Vec3>& local_offsets() const { return local_offset_; }

  // Coarse pre-subdivision template for rasterization-heavy consumers.
  const TriMesh& proxy_mesh() const { return proxy_mesh_; }
  const std::vector<std::vector<double>>& proxy_weights() const { return proxy_weights_; }
  const std::vector<int>& proxy_owner_bones() const { return proxy_owner_; }
  const std::vector<Vec3>& proxy_local_offsets() const { return proxy_local_; }

  // Joint positions in canonical space for the given shape.
  std::vector<Vec3> joint_positions(const std::vector<double>& beta) const;
  // Capsule axis segment and radius of a bone under the given shape.
  void bone_capsule(int bone, const std::vector<double>& beta, Vec3& a, Vec3& b,
                    double& radius) const;
  // Canonical template vertices under the given shape (beta=1 returns template_mesh).
  std::vector<Vec3> shaped_vertices(const std::vector<double>& beta) const;

  double template_sdf(const Vec3& p) const;

 private:
  void build_template();

  std::vector<BoneSpec> bones_;
  int k_;
  TriMesh template_mesh_;                        // beta = 1 canonical pose
  std::vector<std::vector<double>> weights_;     // per vertex, length n_bones
  std::vector<std::pair<int, int>> bone_ranges_; // vertex [begin, end) per bone
  std::vector<int> owner_bone_;                  // per vertex
  std::vector<Vec3> local_offset_;               // vertex - joint at beta = 1
  std::vector<int> tip_ids_;
  std::vector<MeshBvh> bone_bvh_;                // per-bone signed distance
  TriMesh proxy_mesh_;
  std::vector<std::vector<double>> proxy_weights_;
  std::vector<int> proxy_owner_;
  std::vector<Vec3> proxy_local_;

 public:
  // Read-only canonical-vertex index shared across threads.
  const KdTree& canonical_vertex_tree() const { return canonical_tree_; }

 private:
  KdTree canonical_tree_;
};

// Forward kinematics: canonical-to-observation bone transforms B_i. The root
// transform {R_h, t_h} enters through the root bone; rest pose gives identity.
std::vector<ScaledRigid> forward_kinematics(const Skeleton& sk, const HandState& hs);

// Pose-dependent cache: bone transforms, posed template and its indices.
struct PosedHand {
  std::vector<ScaledRigid> bone_tf;
  std::vector<Vec3> joints;      // posed joint positions
  TriMesh mesh;                  // posed template mesh
  KdTree vertex_tree;            // over posed vertices
  const Skeleton* skeleton = nullptr;
};

PosedHand pose_hand(const Skeleton& sk, const HandState& hs);

// Skinning weights by inverse-distance averaging of the K nearest template
// vertices; canonical-template query.
std::vector<double> skin_weights(const Skeleton& sk, const Vec3& p);
// Observation-space query against the posed template vertices.
std::vector<double> skin_weights(const PosedHand& posed, const Vec3& p_obs);

Vec3 forward_lbs(const std::vector<ScaledRigid>& bone_tf, const std::vector<double>& w,
                 const Vec3& p);
Vec3 inverse_lbs(const PosedHand& posed, const Vec3& p_obs);
Vec3 inverse_lbs(const Skeleton& sk, const HandState& hs, const Vec3& p_obs);

// Blend of bone transforms at fixed weights; throws SingularBlend when the
// blended matrix is not invertible.
struct BlendedAffine {
  Mat3 linear;
  Vec3 translation;
};
BlendedAffine blend_transforms(const std::vector<ScaledRigid>& bone_tf,
                               const std::vector<double>& w);
Vec3 invert_blended(const BlendedAffine& blend, const Vec3& p_obs);

}  // namespace holdfield

#include "holdfield/skeleton.hpp"

#include <algorithm>
#include <cmath>

namespace holdfield {

namespace {

double capsule_sdf(const Vec3& p, const Vec3& a, const Vec3& b, double r) {
  const Vec3 ab = b - a;
  const double t = std::clamp(dot(p - a, ab) / std::max(norm2(ab), 1e-30), 0.0, 1.0);
  return norm(p - (a + ab * t)) - r;
}

// Axis-aligned capsule mesh along +z from 0 to len, later rotated into place.
TriMesh base_capsule_mesh(double len, double radius, int ring, int cap_rows, int body_rows) {
  TriMesh m;
  std::vector<int> prev_ring;
  auto add_ring = [&](double z, double r) {
    std::vector<int> ids;
    for (int i = 0; i < ring; ++i) {
      const double a = 2.0 * M_PI * i / ring;
      ids.push_back((int)m.vertices.size());
      m.vertices.push_back({r * std::cos(a), r * std::sin(a), z});
    }
    return ids;
  };
  auto stitch = [&](const std::vector<int>& lo, const std::vector<int>& hi) {
    for (int i = 0; i < ring; ++i) {
      const int j = (i + 1) % ring;
      m.faces.push_back({lo[i], lo[j], hi[i]});
      m.faces.push_back({lo[j], hi[j], hi[i]});
    }
  };

  // Bottom pole and cap.
  const int bottom_pole = (int)m.vertices.size();
  m.vertices.push_back({0, 0, -radius});
  for (int row = 1; row <= cap_rows; ++row) {
    const double phi = 0.5 * M_PI * row / (cap_rows + 0.0);
    const auto ids = add_ring(-radius * std::cos(phi), radius * std::sin(phi));
    if (row == 1) {
      for (int i = 0; i < ring; ++i)
        m.faces.push_back({bottom_pole, ids[(i + 1) % ring], ids[i]});
    } else {
      stitch(prev_ring, ids);
    }
    prev_ring = ids;
  }
  // Body.
  for (int row = 1; row <= body_rows; ++row) {
    const auto ids = add_ring(len * row / body_rows, radius);
    stitch(prev_ring, ids);
    prev_ring = ids;
  }
  // Top cap and pole.
  for (int row = cap_rows - 1; row >= 1; --row) {
    const double phi = 0.5 * M_PI * row / (cap_rows + 0.0);
    const auto ids = add_ring(len + radius * std::cos(phi), radius * std::sin(phi));
    stitch(prev_ring, ids);
    prev_ring = ids;
  }
  const int top_pole = (int)m.vertices.size();
  m.vertices.push_back({0, 0, len + radius});
  for (int i = 0; i < ring; ++i)
    m.faces.push_back({prev_ring[i], prev_ring[(i + 1) % ring], top_pole});
  return m;
}

Mat3 frame_from_z(const Vec3& z_dir) {
  const Vec3 z = normalized(z_dir);
  Vec3 up = std::abs(z.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{0, 1, 0};
  const Vec3 x = normalized(cross(up, z));
  const Vec3 y = cross(z, x);
  Mat3 r;
  r(0, 0) = x.x; r(1, 0) = x.y; r(2, 0) = x.z;
  r(0, 1) = y.x; r(1, 1) = y.y; r(2, 1) = y.z;
  r(0, 2) = z.x; r(1, 2) = z.y; r(2, 2) = z.z;
  return r;
}

}  // namespace

Skeleton::Skeleton(std::vector<BoneSpec> bones, int k_nearest)
    : bones_(std::move(bones)), k_(k_nearest) {
  if (bones_.empty()) throw Error("skeleton needs at least one bone");
  if (bones_[0].parent != -1) throw Error("bone 0 must be the root");
  for (size_t i = 1; i < bones_.size(); ++i)
    if (bones_[i].parent < 0 || bones_[i].parent >= (int)i)
      throw Error("parents must precede children");
  if (k_ < 1) throw Error("K must be >= 1");
  build_template();
}

std::vector<Vec3> Skeleton::joint_positions(const std::vector<double>& beta) const {
  std::vector<Vec3> joints(bones_.size());
  for (size_t i = 0; i < bones_.size(); ++i) {
    const Vec3 base = bones_[i].parent < 0 ? Vec3{0, 0, 0} : joints[bones_[i].parent];
    joints[i] = base + bones_[i].rest_offset * beta[i];
  }
  return joints;
}

void Skeleton::bone_capsule(int bone, const std::vector<double>& beta, Vec3& a, Vec3& b,
                            double& radius) const {
  const auto joints = joint_positions(beta);
  a = joints[bone];
  b = a + bones_[bone].tip_offset * beta[bone];
  radius = bones_[bone].radius * beta[bone];
}

void Skeleton::build_template() {
  const std::vector<double> ones(bones_.size(), 1.0);
  const auto joints = joint_positions(ones);

  for (size_t bi = 0; bi < bones_.size(); ++bi) {
    const BoneSpec& bone = bones_[bi];
    const double len = norm(bone.tip_offset);
    TriMesh base =
        base_capsule_mesh(len, bone.radius, bone.ring_segments, bone.cap_rows, bone.body_rows);
    TriMesh sub = loop_subdivide(base);
    // Snap subdivided vertices back onto the analytic capsule so the template
    // carries the exact surface rather than the shrunken Loop limit.
    const Vec3 axis_a{0, 0, 0}, axis_b{0, 0, len};
    for (auto& v : sub.vertices) {
      const Vec3 ab = axis_b - axis_a;
      const double t = std::clamp(dot(v - axis_a, ab) / std::max(norm2(ab), 1e-30), 0.0, 1.0);
      const Vec3 q = axis_a + ab * t;
      const Vec3 d = v - q;
      const double dn = norm(d);
      v = dn > 1e-12 ? q + d * (bone.radius / dn) : q + Vec3{bone.radius, 0, 0};
    }
    const Mat3 frame = frame_from_z(bone.tip_offset);
    const int vbase = (int)template_mesh_.vertices.size();
    bone_ranges_.emplace_back(vbase, vbase + (int)sub.vertices.size());
    for (const auto& v : sub.vertices) {
      const Vec3 world = joints[bi] + frame * v;
      template_mesh_.vertices.push_back(world);
      owner_bone_.push_back((int)bi);
      local_offset_.push_back(world - joints[bi]);
    }
    for (const auto& f : sub.faces)
      template_mesh_.faces.push_back({f[0] + vbase, f[1] + vbase, f[2] + vbase});

    const TriMesh proxy_base = base_capsule_mesh(len, bone.radius, 8, 2, 1);
    const int pbase = (int)proxy_mesh_.vertices.size();
    for (const auto& v : proxy_base.vertices) {
      const Vec3 world = joints[bi] + frame * v;
      proxy_mesh_.vertices.push_back(world);
      proxy_owner_.push_back((int)bi);
      proxy_local_.push_back(world - joints[bi]);
    }
    for (const auto& f : proxy_base.faces)
      proxy_mesh_.faces.push_back({f[0] + pbase, f[1] + pbase, f[2] + pbase});

    TriMesh world_sub = sub;
    for (size_t i = 0; i < sub.vertices.size(); ++i)
      world_sub.vertices[i] = template_mesh_.vertices[vbase + i];
    bone_bvh_.emplace_back(world_sub);

    // Distal bones (no children) contribute a fingertip contact vertex.
    bool has_child = false;
    for (size_t j = bi + 1; j < bones_.size(); ++j)
      if (bones_[j].parent == (int)bi) has_child = true;
    if (!has_child && bi > 0) {
      int best = vbase;
      double best_t = -1e30;
      const Vec3 dir = normalized(bone.tip_offset);
      for (int v = vbase; v < (int)template_mesh_.vertices.size(); ++v) {
        const double t = dot(template_mesh_.vertices[v] - joints[bi], dir);
        if (t > best_t) { best_t = t; best = v; }
      }
      // The apex plus a small cap of vertices around it.
      const Vec3 apex = template_mesh_.vertices[best];
      for (int v = vbase; v < (int)template_mesh_.vertices.size(); ++v)
        if (norm(template_mesh_.vertices[v] - apex) < 0.6 * bone.radius)
          tip_ids_.push_back(v);
    }
  }

  // Smooth skinning weights from distance to each bone's axis segment.
  const double sigma_w = 0.3;
  auto bone_weights = [&](const Vec3& v) {
    std::vector<double> w(bones_.size());
    double sum = 0;
    for (size_t bi = 0; bi < bones_.size(); ++bi) {
      Vec3 a, b;
      double r;
      bone_capsule((int)bi, ones, a, b, r);
      const double d = std::max(capsule_sdf(v, a, b, r), 0.0);
      w[bi] = std::exp(-d * d / (2.0 * sigma_w * sigma_w));
      sum += w[bi];
    }
    for (auto& x : w) x /= sum;
    return w;
  };
  weights_.resize(template_mesh_.vertices.size());
  for (size_t v = 0; v < template_mesh_.vertices.size(); ++v)
    weights_[v] = bone_weights(template_mesh_.vertices[v]);
  proxy_weights_.resize(proxy_mesh_.vertices.size());
  for (size_t v = 0; v < proxy_mesh_.vertices.size(); ++v)
    proxy_weights_[v] = bone_weights(proxy_mesh_.vertices[v]);

  canonical_tree_ = KdTree(template_mesh_.vertices);
}

Skeleton Skeleton::default_hand() {
  std::vector<BoneSpec> bones;
  BoneSpec palm;
  palm.parent = -1;
  palm.rest_offset = {-1.2, 0, 0};
  palm.tip_offset = {0.8, 0, 0};
  palm.radius = 0.5;
  palm.ring_segments = 28;
  palm.cap_rows = 4;
  palm.body_rows = 3;
  bones.push_back(palm);

  for (int side = 0; side < 2; ++side) {
    const double sy = side == 0 ? 1.0 : -1.0;
    BoneSpec proximal;
    proximal.parent = 0;
    proximal.rest_offset = {0.8, 0, 0};  // finger base at the palm tip
    proximal.tip_offset = {0.55, 0.3 * sy, 0};
    proximal.radius = 0.25;
    bones.push_back(proximal);

    BoneSpec distal;
    distal.parent = (int)bones.size() - 1;
    distal.rest_offset = proximal.tip_offset;
    distal.tip_offset = {0.5, 0.12 * sy, 0};
    distal.radius = 0.22;
    bones.push_back(distal);
  }
  return Skeleton(std::move(bones), 4);
}

std::vector<Vec3> Skeleton::shaped_vertices(const std::vector<double>& beta) const {
  const auto joints = joint_positions(beta);
  std::vector<Vec3> out(template_mesh_.vertices.size());
  for (size_t v = 0; v < out.size(); ++v) {
    const int b = owner_bone_[v];
    out[v] = joints[b] + local_offset_[v] * beta[b];
  }
  return out;
}

double Skeleton::template_sdf(const Vec3& p) const {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& bvh : bone_bvh_) best = std::min(best, bvh.signed_distance(p));
  return best;
}

std::vector<ScaledRigid> forward_kinematics(const Skeleton& sk, const HandState& hs) {
  const int n = sk.bone_count();
  if ((int)hs.theta.size() != n || (int)hs.beta.size() != n)
    throw Error("hand state does not match skeleton");
  const auto joints = sk.joint_positions(hs.beta);
  std::vector<ScaledRigid> out(n);
  for (int i = 0; i < n; ++i) {
    ScaledRigid local;
    local.rotation = rotation_from_axis_angle(hs.theta[i]);
    local.translation = joints[i] - local.rotation * joints[i];
    const ScaledRigid parent =
        sk.bones()[i].parent < 0 ? hs.root : out[sk.bones()[i].parent];
    out[i] = parent.compose(local);
  }
  return out;
}

PosedHand pose_hand(const Skeleton& sk, const HandState& hs) {
  PosedHand posed;
  posed.skeleton = &sk;
  posed.bone_tf = forward_kinematics(sk, hs);
  const auto joints = sk.joint_positions(hs.beta);
  posed.joints.resize(joints.size());
  for (size_t i = 0; i < joints.size(); ++i) posed.joints[i] = apply(posed.bone_tf[i], joints[i]);

  posed.mesh = sk.template_mesh();
  posed.mesh.vertices = sk.shaped_vertices(hs.beta);
  const auto& weights = sk.template_weights();
  for (size_t v = 0; v < posed.mesh.vertices.size(); ++v)
    posed.mesh.vertices[v] = forward_lbs(posed.bone_tf, weights[v], posed.mesh.vertices[v]);
  posed.vertex_tree = KdTree(posed.mesh.vertices);
  return posed;
}

namespace {

std::vector<double> knn_weights(const Skeleton& sk, const KdTree& tree,
                                const std::vector<Vec3>& verts, const Vec3& p) {
  const int n = sk.bone_count();
  if (n == 1) return {1.0};
  const auto& tw = sk.template_weights();
  const auto ids = tree.knn(p, std::min(sk.k_nearest(), (int)verts.size()));
  std::vector<double> w(n, 0.0);
  double sum = 0;
  for (int id : ids) {
    const double inv = 1.0 / (norm(verts[id] - p) + 1e-6);
    for (int b = 0; b < n; ++b) w[b] += inv * tw[id][b];
    sum += inv;
  }
  for (auto& x : w) x /= sum;
  return w;
}

}  // namespace

std::vector<double> skin_weights(const Skeleton& sk, const Vec3& p) {
  return knn_weights(sk, sk.canonical_vertex_tree(), sk.template_mesh().vertices, p);
}

std::vector<double> skin_weights(const PosedHand& posed, const Vec3& p_obs) {
  return knn_weights(*posed.skeleton, posed.vertex_tree, posed.mesh.vertices, p_obs);
}

Vec3 forward_lbs(const std::vector<ScaledRigid>& bone_tf, const std::vector<double>& w,
                 const Vec3& p) {
  Vec3 out{0, 0, 0};
  for (size_t i = 0; i < bone_tf.size(); ++i)
    if (w[i] != 0.0) out += apply(bone_tf[i], p) * w[i];
  return out;
}

BlendedAffine blend_transforms(const std::vector<ScaledRigid>& bone_tf,
                               const std::vector<double>& w) {
  BlendedAffine blend;
  blend.linear = Mat3{};
  for (auto& m : blend.linear.m) m = 0.0;
  blend.translation = {0, 0, 0};
  for (size_t i = 0; i < bone_tf.size(); ++i) {
    if (w[i] == 0.0) continue;
    for (int k = 0; k < 9; ++k) blend.linear.m[k] += w[i] * bone_tf[i].rotation.m[k];
    blend.translation += bone_tf[i].translation * w[i];
  }
  return blend;
}

Vec3 invert_blended(const BlendedAffine& blend, const Vec3& p_obs) {
  const Mat3& a = blend.linear;
  const double det = a.det();
  if (std::abs(det) < 1e-12) throw SingularBlend();
  Mat3 inv;
  inv(0, 0) = (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) / det;
  inv(0, 1) = (a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2)) / det;
  inv(0, 2) = (a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1)) / det;
  inv(1, 0) = (a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2)) / det;
  inv(1, 1) = (a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0)) / det;
  inv(1, 2) = (a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2)) / det;
  inv(2, 0) = (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0)) / det;
  inv(2, 1) = (a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1)) / det;
  inv(2, 2) = (a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)) / det;
  return inv * (p_obs - blend.translation);
}

Vec3 inverse_lbs(const PosedHand& posed, const Vec3& p_obs) {
  const auto w = skin_weights(posed, p_obs);
  return invert_blended(blend_transforms(posed.bone_tf, w), p_obs);
}

Vec3 inverse_lbs(const Skeleton& sk, const HandState& hs, const Vec3& p_obs) {
  return inverse_lbs(pose_hand(sk, hs), p_obs);
}

}  // namespace holdfield

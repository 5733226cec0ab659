#pragma once

#include <limits>
#include <memory>
#include <vector>

#include "holdfield/trimesh.hpp"

namespace holdfield {

// Balanced kd-tree over a fixed point set. Nearest-neighbor and k-NN queries.
class KdTree {
 public:
  KdTree() = default;
  explicit KdTree(std::vector<Vec3> points);

  bool empty() const { return points_.empty(); }
  size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }

  // Index of the nearest point and its squared distance.
  int nearest(const Vec3& q, double* sq_dist = nullptr) const;
  // k nearest indices, closest first.
  std::vector<int> knn(const Vec3& q, int k) const;

 private:
  struct Node {
    int axis = -1;       // -1 marks a leaf
    double split = 0.0;
    int left = -1, right = -1;
    int begin = 0, end = 0;  // leaf range into order_
  };
  int build(int begin, int end, int depth);
  void search(int node, const Vec3& q, int k, std::vector<std::pair<double, int>>& heap) const;

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// Axis-aligned bounding box tree over mesh triangles. Supports closest-point
// queries with angle-weighted pseudonormal signs and segment distances.
class MeshBvh {
 public:
  MeshBvh() = default;
  explicit MeshBvh(const TriMesh& mesh);

  bool empty() const { return tris_.empty(); }

  // Unsigned distance; optionally reports the closest surface point.
  double distance(const Vec3& q, Vec3* closest = nullptr) const;
  // Signed distance, negative inside. Requires a closed manifold mesh.
  double signed_distance(const Vec3& q) const;
  // Minimum distance between a segment [a, b] and the surface.
  double segment_distance(const Vec3& a, const Vec3& b) const;

 private:
  struct Box {
    Vec3 lo{1e30, 1e30, 1e30}, hi{-1e30, -1e30, -1e30};
    void grow(const Vec3& p);
    double sq_dist(const Vec3& p) const;
    double sq_dist_segment(const Vec3& a, const Vec3& b) const;
  };
  struct Node {
    Box box;
    int left = -1, right = -1;
    int begin = 0, end = 0;
  };
  struct Tri {
    Vec3 a, b, c;
    Vec3 face_normal;
    Vec3 vertex_normal[3];  // angle-weighted pseudonormals
    Vec3 edge_normal[3];    // ab, bc, ca
  };

  int build(int begin, int end);
  void query_point(int node, const Vec3& q, double& best_sq, int& best_tri, Vec3& best_pt) const;
  void query_segment(int node, const Vec3& a, const Vec3& b, double& best_sq) const;

  std::vector<Tri> tris_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

// Closest point on triangle (a, b, c) to p, with barycentric region id:
// 0 face, 1..3 edge ab/bc/ca, 4..6 vertex a/b/c.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c,
                               int* region = nullptr);
double segment_triangle_distance(const Vec3& p, const Vec3& q, const Vec3& a, const Vec3& b,
                                 const Vec3& c);
double segment_segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1);

}  // namespace holdfield

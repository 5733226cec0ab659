#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "holdfield/geometry.hpp"

namespace holdfield {

struct DegenerateMesh : Error {
  explicit DegenerateMesh(const std::string& msg = "mesh has no usable faces") : Error(msg) {}
};

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<Vec3> normals;  // optional, per vertex
  std::vector<Vec3> colors;   // optional, per vertex

  bool empty() const { return vertices.empty() || faces.empty(); }
  Vec3 face_normal(int f) const;
  double face_area(int f) const;
  double surface_area() const;
  Vec3 centroid() const;
  // Drops faces with area below eps and out-of-range indices.
  void remove_degenerate_faces(double eps = 1e-14);
  void apply_transform(const ScaledRigid& t);
  void translate(const Vec3& d);
};

// Deterministic area-weighted surface sampling.
std::vector<Vec3> sample_surface(const TriMesh& mesh, int count, uint64_t seed);

// One round of Loop subdivision (1:4 face split, valence-weighted smoothing).
TriMesh loop_subdivide(const TriMesh& mesh);

// Grid-clustering decimation; vertices within one cell collapse to their mean.
TriMesh cluster_decimate(const TriMesh& mesh, double cell_size);

// Largest face-connected component (by surface area); drops floaters.
TriMesh largest_component(const TriMesh& mesh);

void save_obj(const TriMesh& mesh, const std::string& path);
TriMesh load_obj(const std::string& path);

}  // namespace holdfield

#include <filesystem>
#include <random>

#include "doctest.h"
#include "holdfield/spatial.hpp"
#include "holdfield/trimesh.hpp"

using namespace holdfield;

namespace {

TriMesh unit_cube() {
  TriMesh m;
  m.vertices = {{-1, -1, -1}, {1, -1, -1}, {1, 1, -1}, {-1, 1, -1},
                {-1, -1, 1},  {1, -1, 1},  {1, 1, 1},  {-1, 1, 1}};
  const int quads[6][4] = {{0, 3, 2, 1}, {4, 5, 6, 7}, {0, 1, 5, 4},
                           {2, 3, 7, 6}, {1, 2, 6, 5}, {3, 0, 4, 7}};
  for (const auto& q : quads) {
    m.faces.push_back({q[0], q[1], q[2]});
    m.faces.push_back({q[0], q[2], q[3]});
  }
  return m;
}

}  // namespace

TEST_CASE("kd-tree matches brute force") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Vec3> pts(500);
  for (auto& p : pts) p = {gauss(rng), gauss(rng), gauss(rng)};
  const KdTree tree(pts);
  for (int q = 0; q < 100; ++q) {
    const Vec3 query{gauss(rng), gauss(rng), gauss(rng)};
    double best = 1e30;
    int best_i = -1;
    for (size_t i = 0; i < pts.size(); ++i) {
      const double d2 = norm2(pts[i] - query);
      if (d2 < best) { best = d2; best_i = (int)i; }
    }
    double d2;
    CHECK(tree.nearest(query, &d2) == best_i);
    CHECK(d2 == doctest::Approx(best));
    const auto knn = tree.knn(query, 5);
    CHECK((int)knn.size() == 5);
    CHECK(knn[0] == best_i);
    for (size_t k = 1; k < knn.size(); ++k)
      CHECK(norm2(pts[knn[k - 1]] - query) <= norm2(pts[knn[k]] - query) + 1e-15);
  }
}

TEST_CASE("mesh bvh distance and sign") {
  const TriMesh cube = unit_cube();
  const MeshBvh bvh(cube);
  CHECK(bvh.signed_distance({0, 0, 0}) == doctest::Approx(-1.0));
  CHECK(bvh.signed_distance({2, 0, 0}) == doctest::Approx(1.0));
  CHECK(bvh.signed_distance({0, 0, 0.5}) == doctest::Approx(-0.5));
  CHECK(std::abs(bvh.signed_distance({1, 0, 0})) < 1e-12);

  // Unsigned distance vs brute force over faces.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> gauss(0.0, 1.5);
  for (int i = 0; i < 200; ++i) {
    const Vec3 q{gauss(rng), gauss(rng), gauss(rng)};
    double brute = 1e30;
    for (const auto& f : cube.faces) {
      const Vec3 cp = closest_point_on_triangle(q, cube.vertices[f[0]], cube.vertices[f[1]],
                                                cube.vertices[f[2]]);
      brute = std::min(brute, norm(cp - q));
    }
    CHECK(bvh.distance(q) == doctest::Approx(brute).epsilon(1e-10));
  }
}

TEST_CASE("segment distance to mesh") {
  const TriMesh cube = unit_cube();
  const MeshBvh bvh(cube);
  // Segment passing through the cube touches it.
  CHECK(bvh.segment_distance({-3, 0, 0}, {3, 0, 0}) == doctest::Approx(0.0));
  // Parallel segment at height 2 sits 1 above the top face.
  CHECK(bvh.segment_distance({-0.5, -0.5, 2}, {0.5, 0.5, 2}) == doctest::Approx(1.0));
  // Far segment.
  CHECK(bvh.segment_distance({5, 5, 5}, {6, 6, 6}) ==
        doctest::Approx(norm(Vec3{4, 4, 4})).epsilon(1e-9));
}

TEST_CASE("loop subdivision counts and smoothing") {
  const TriMesh cube = unit_cube();
  const TriMesh sub = loop_subdivide(cube);
  CHECK(sub.faces.size() == 4 * cube.faces.size());
  // V' = V + E; the cube has 18 edges.
  CHECK(sub.vertices.size() == cube.vertices.size() + 18);
  // Loop smoothing pulls vertices inward.
  for (const auto& v : sub.vertices) CHECK(norm(v) < norm(Vec3{1, 1, 1}) + 1e-12);
}

TEST_CASE("surface sampling is area weighted") {
  TriMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {10, 0, 1}, {12, 0, 1}, {10, 2, 1}};
  m.faces = {{0, 1, 2}, {3, 4, 5}};  // areas 0.5 and 2.0
  const auto pts = sample_surface(m, 5000, 99);
  int big = 0;
  for (const auto& p : pts) big += p.z > 0.5 ? 1 : 0;
  CHECK(big > 5000 * 0.74);
  CHECK(big < 5000 * 0.86);
}

TEST_CASE("obj round trip") {
  const TriMesh cube = unit_cube();
  const std::string path = (std::filesystem::temp_directory_path() / "hf_cube.obj").string();
  save_obj(cube, path);
  const TriMesh back = load_obj(path);
  REQUIRE(back.vertices.size() == cube.vertices.size());
  REQUIRE(back.faces.size() == cube.faces.size());
  for (size_t i = 0; i < cube.vertices.size(); ++i)
    CHECK(norm(back.vertices[i] - cube.vertices[i]) == 0.0);
  for (size_t i = 0; i < cube.faces.size(); ++i) CHECK(back.faces[i] == cube.faces[i]);
}

TEST_CASE("largest component drops floaters") {
  TriMesh m = unit_cube();
  const int base = (int)m.vertices.size();
  m.vertices.push_back({5, 5, 5});
  m.vertices.push_back({5.1, 5, 5});
  m.vertices.push_back({5, 5.1, 5});
  m.faces.push_back({base, base + 1, base + 2});
  const TriMesh main = largest_component(m);
  CHECK(main.faces.size() == 12);
  CHECK(main.vertices.size() == 8);
}

TEST_CASE("cluster decimate keeps shape") {
  const TriMesh cube = unit_cube();
  const TriMesh sub = loop_subdivide(loop_subdivide(cube));
  const TriMesh dec = cluster_decimate(sub, 0.5);
  CHECK(dec.vertices.size() < sub.vertices.size());
  CHECK(!dec.faces.empty());
}

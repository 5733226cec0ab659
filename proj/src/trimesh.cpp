#include "holdfield/trimesh.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>

namespace holdfield {

Vec3 TriMesh::face_normal(int f) const {
  const auto& t = faces[f];
  const Vec3 n = cross(vertices[t[1]] - vertices[t[0]], vertices[t[2]] - vertices[t[0]]);
  const double l = norm(n);
  return l > 0 ? n / l : Vec3{0, 0, 1};
}

double TriMesh::face_area(int f) const {
  const auto& t = faces[f];
  return 0.5 * norm(cross(vertices[t[1]] - vertices[t[0]], vertices[t[2]] - vertices[t[0]]));
}

double TriMesh::surface_area() const {
  double a = 0;
  for (int f = 0; f < (int)faces.size(); ++f) a += face_area(f);
  return a;
}

Vec3 TriMesh::centroid() const {
  Vec3 c{0, 0, 0};
  for (const auto& v : vertices) c += v;
  return vertices.empty() ? c : c / (double)vertices.size();
}

void TriMesh::remove_degenerate_faces(double eps) {
  std::vector<std::array<int, 3>> kept;
  kept.reserve(faces.size());
  const int n = (int)vertices.size();
  for (int f = 0; f < (int)faces.size(); ++f) {
    const auto& t = faces[f];
    if (t[0] < 0 || t[1] < 0 || t[2] < 0 || t[0] >= n || t[1] >= n || t[2] >= n) continue;
    if (face_area(f) <= eps) continue;
    kept.push_back(t);
  }
  faces = std::move(kept);
}

void TriMesh::apply_transform(const ScaledRigid& t) {
  for (auto& v : vertices) v = apply(t, v);
  for (auto& n : normals) n = t.rotation * n;
}

void TriMesh::translate(const Vec3& d) {
  for (auto& v : vertices) v += d;
}

std::vector<Vec3> sample_surface(const TriMesh& mesh, int count, uint64_t seed) {
  std::vector<Vec3> out;
  if (mesh.empty() || count <= 0) return out;
  std::vector<double> cdf(mesh.faces.size());
  double acc = 0;
  for (size_t f = 0; f < mesh.faces.size(); ++f) {
    acc += mesh.face_area((int)f);
    cdf[f] = acc;
  }
  if (acc <= 0) throw DegenerateMesh("sample_surface: zero total area");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const double pick = uni(rng) * acc;
    const size_t f = std::lower_bound(cdf.begin(), cdf.end(), pick) - cdf.begin();
    const auto& t = mesh.faces[std::min(f, mesh.faces.size() - 1)];
    double u = uni(rng), v = uni(rng);
    if (u + v > 1.0) { u = 1.0 - u; v = 1.0 - v; }
    out.push_back(mesh.vertices[t[0]] * (1.0 - u - v) + mesh.vertices[t[1]] * u +
                  mesh.vertices[t[2]] * v);
  }
  return out;
}

TriMesh loop_subdivide(const TriMesh& mesh) {
  const int nv = (int)mesh.vertices.size();
  std::map<std::pair<int, int>, int> edge_vertex;          // edge -> new vertex id
  std::map<std::pair<int, int>, std::vector<int>> edge_opp;  // edge -> opposite vertices
  std::vector<std::vector<int>> ring(nv);                  // vertex -> neighbor vertices

  auto ekey = [](int a, int b) { return std::make_pair(std::min(a, b), std::max(a, b)); };
  for (const auto& f : mesh.faces) {
    for (int e = 0; e < 3; ++e) {
      const int a = f[e], b = f[(e + 1) % 3], c = f[(e + 2) % 3];
      edge_opp[ekey(a, b)].push_back(c);
      ring[a].push_back(b);
      ring[b].push_back(a);
    }
  }
  for (auto& r : ring) {
    std::sort(r.begin(), r.end());
    r.erase(std::unique(r.begin(), r.end()), r.end());
  }

  TriMesh out;
  out.vertices.resize(nv);
  // Even (original) vertices: valence-weighted smoothing.
  for (int v = 0; v < nv; ++v) {
    const int n = (int)ring[v].size();
    if (n < 3) {
      out.vertices[v] = mesh.vertices[v];
      continue;
    }
    const double beta =
        (n == 3) ? 3.0 / 16.0 : (1.0 / n) * (5.0 / 8.0 - std::pow(3.0 / 8.0 + 0.25 * std::cos(2.0 * M_PI / n), 2));
    Vec3 sum{0, 0, 0};
    for (int u : ring[v]) sum += mesh.vertices[u];
    out.vertices[v] = mesh.vertices[v] * (1.0 - n * beta) + sum * beta;
  }
  // Odd (edge) vertices.
  for (auto& [key, opp] : edge_opp) {
    const Vec3 a = mesh.vertices[key.first], b = mesh.vertices[key.second];
    Vec3 p;
    if (opp.size() >= 2)
      p = (a + b) * (3.0 / 8.0) + (mesh.vertices[opp[0]] + mesh.vertices[opp[1]]) * (1.0 / 8.0);
    else
      p = (a + b) * 0.5;  // boundary edge
    edge_vertex[key] = (int)out.vertices.size();
    out.vertices.push_back(p);
  }
  for (const auto& f : mesh.faces) {
    const int e01 = edge_vertex[ekey(f[0], f[1])];
    const int e12 = edge_vertex[ekey(f[1], f[2])];
    const int e20 = edge_vertex[ekey(f[2], f[0])];
    out.faces.push_back({f[0], e01, e20});
    out.faces.push_back({f[1], e12, e01});
    out.faces.push_back({f[2], e20, e12});
    out.faces.push_back({e01, e12, e20});
  }
  return out;
}

TriMesh cluster_decimate(const TriMesh& mesh, double cell_size) {
  if (mesh.empty() || cell_size <= 0) return mesh;
  std::map<std::array<int64_t, 3>, int> cell_to_vertex;
  std::vector<int> remap(mesh.vertices.size());
  TriMesh out;
  std::vector<Vec3> sums;
  std::vector<int> counts;
  for (size_t v = 0; v < mesh.vertices.size(); ++v) {
    const Vec3& p = mesh.vertices[v];
    const std::array<int64_t, 3> key{(int64_t)std::floor(p.x / cell_size),
                                     (int64_t)std::floor(p.y / cell_size),
                                     (int64_t)std::floor(p.z / cell_size)};
    auto [it, inserted] = cell_to_vertex.emplace(key, (int)sums.size());
    if (inserted) {
      sums.push_back(p);
      counts.push_back(1);
    } else {
      sums[it->second] += p;
      ++counts[it->second];
    }
    remap[v] = it->second;
  }
  out.vertices.resize(sums.size());
  for (size_t i = 0; i < sums.size(); ++i) out.vertices[i] = sums[i] / (double)counts[i];
  for (const auto& f : mesh.faces) {
    const std::array<int, 3> g{remap[f[0]], remap[f[1]], remap[f[2]]};
    if (g[0] != g[1] && g[1] != g[2] && g[0] != g[2]) out.faces.push_back(g);
  }
  out.remove_degenerate_faces();
  return out;
}

TriMesh largest_component(const TriMesh& mesh) {
  if (mesh.empty()) return mesh;
  // Union-find over vertices joined by faces.
  std::vector<int> parent(mesh.vertices.size());
  for (size_t i = 0; i < parent.size(); ++i) parent[i] = (int)i;
  std::function<int(int)> find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& f : mesh.faces) {
    const int a = find(f[0]);
    parent[find(f[1])] = a;
    parent[find(f[2])] = a;
  }
  std::map<int, double> area;
  for (size_t f = 0; f < mesh.faces.size(); ++f)
    area[find(mesh.faces[f][0])] += mesh.face_area((int)f);
  int best = -1;
  double best_area = -1;
  for (const auto& [root, a] : area)
    if (a > best_area) { best_area = a; best = root; }

  TriMesh out;
  std::vector<int> remap(mesh.vertices.size(), -1);
  for (const auto& f : mesh.faces) {
    if (find(f[0]) != best) continue;
    std::array<int, 3> g;
    for (int i = 0; i < 3; ++i) {
      if (remap[f[i]] < 0) {
        remap[f[i]] = (int)out.vertices.size();
        out.vertices.push_back(mesh.vertices[f[i]]);
      }
      g[i] = remap[f[i]];
    }
    out.faces.push_back(g);
  }
  return out;
}

void save_obj(const TriMesh& mesh, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("save_obj: cannot open " + path);
  char buf[256];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", v.x, v.y, v.z);
    os << buf;
  }
  for (const auto& f : mesh.faces) {
    std::snprintf(buf, sizeof buf, "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
    os << buf;
  }
  if (!os) throw Error("save_obj: write failed for " + path);
}

TriMesh load_obj(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("load_obj: cannot open " + path);
  TriMesh mesh;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 v;
      ls >> v.x >> v.y >> v.z;
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::array<int, 3> f{};
      for (int i = 0; i < 3; ++i) {
        std::string tok;
        ls >> tok;
        f[i] = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      mesh.faces.push_back(f);
    }
  }
  return mesh;
}

}  // namespace holdfield

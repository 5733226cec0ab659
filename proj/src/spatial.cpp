#include "holdfield/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace holdfield {

// ---------------------------------------------------------------------------
// KdTree
// ---------------------------------------------------------------------------

KdTree::KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0);
  if (!points_.empty()) root_ = build(0, (int)points_.size(), 0);
}

int KdTree::build(int begin, int end, int depth) {
  Node node;
  if (end - begin <= 8) {
    node.begin = begin;
    node.end = end;
    nodes_.push_back(node);
    return (int)nodes_.size() - 1;
  }
  const int axis = depth % 3;
  const int mid = (begin + end) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) { return points_[a][axis] < points_[b][axis]; });
  node.axis = axis;
  node.split = points_[order_[mid]][axis];
  const int self = (int)nodes_.size();
  nodes_.push_back(node);
  const int l = build(begin, mid, depth + 1);
  const int r = build(mid, end, depth + 1);
  nodes_[self].left = l;
  nodes_[self].right = r;
  return self;
}

void KdTree::search(int ni, const Vec3& q, int k,
                    std::vector<std::pair<double, int>>& heap) const {
  const Node& node = nodes_[ni];
  if (node.axis < 0) {
    for (int i = node.begin; i < node.end; ++i) {
      const int idx = order_[i];
      const double d2 = norm2(points_[idx] - q);
      if ((int)heap.size() < k) {
        heap.emplace_back(d2, idx);
        std::push_heap(heap.begin(), heap.end());
      } else if (d2 < heap.front().first) {
        std::pop_heap(heap.begin(), heap.end());
        heap.back() = {d2, idx};
        std::push_heap(heap.begin(), heap.end());
      }
    }
    return;
  }
  const double delta = q[node.axis] - node.split;
  const int first = delta < 0 ? node.left : node.right;
  const int second = delta < 0 ? node.right : node.left;
  search(first, q, k, heap);
  if ((int)heap.size() < k || delta * delta < heap.front().first) search(second, q, k, heap);
}

int KdTree::nearest(const Vec3& q, double* sq_dist) const {
  if (empty()) return -1;
  std::vector<std::pair<double, int>> heap;
  heap.reserve(2);
  search(root_, q, 1, heap);
  if (sq_dist) *sq_dist = heap.front().first;
  return heap.front().second;
}

std::vector<int> KdTree::knn(const Vec3& q, int k) const {
  std::vector<std::pair<double, int>> heap;
  heap.reserve(k + 1);
  if (!empty()) search(root_, q, k, heap);
  std::sort_heap(heap.begin(), heap.end());
  std::vector<int> out(heap.size());
  for (size_t i = 0; i < heap.size(); ++i) out[i] = heap[i].second;
  return out;
}

// ---------------------------------------------------------------------------
// Closest point / distance primitives
// ---------------------------------------------------------------------------

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c,
                               int* region) {
  // Ericson, Real-Time Collision Detection, 5.1.5.
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = dot(ab, ap), d2 = dot(ac, ap);
  auto set_region = [&](int r) { if (region) *region = r; };
  if (d1 <= 0 && d2 <= 0) { set_region(4); return a; }

  const Vec3 bp = p - b;
  const double d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0 && d4 <= d3) { set_region(5); return b; }

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) {
    set_region(1);
    return a + ab * (d1 / (d1 - d3));
  }

  const Vec3 cp = p - c;
  const double d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0 && d5 <= d6) { set_region(6); return c; }

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) {
    set_region(3);
    return a + ac * (d2 / (d2 - d6));
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    set_region(2);
    return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
  }

  const double denom = 1.0 / (va + vb + vc);
  set_region(0);
  return a + ab * (vb * denom) + ac * (vc * denom);
}

double segment_segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1) {
  const Vec3 d1 = p1 - p0, d2 = q1 - q0, r = p0 - q0;
  const double a = dot(d1, d1), e = dot(d2, d2), f = dot(d2, r);
  double s = 0, t = 0;
  if (a <= 1e-30 && e <= 1e-30) return norm(p0 - q0);
  if (a <= 1e-30) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = dot(d1, r);
    if (e <= 1e-30) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = dot(d1, d2);
      const double denom = a * e - b * b;
      if (denom > 1e-30) s = std::clamp((b * f - c * e) / denom, 0.0, 1.0);
      t = (b * s + f) / e;
      if (t < 0) { t = 0; s = std::clamp(-c / a, 0.0, 1.0); }
      else if (t > 1) { t = 1; s = std::clamp((b - c) / a, 0.0, 1.0); }
    }
  }
  return norm((p0 + d1 * s) - (q0 + d2 * t));
}

double segment_triangle_distance(const Vec3& p, const Vec3& q, const Vec3& a, const Vec3& b,
                                 const Vec3& c) {
  // Segment-plane crossing inside the triangle means contact.
  const Vec3 n = cross(b - a, c - a);
  const double dp = dot(p - a, n), dq = dot(q - a, n);
  if (dp * dq <= 0 && norm2(n) > 1e-30) {
    const double t = dp / (dp - dq + (dp == dq ? 1e-300 : 0.0));
    const Vec3 x = p + (q - p) * std::clamp(t, 0.0, 1.0);
    const Vec3 cp = closest_point_on_triangle(x, a, b, c);
    if (norm2(cp - x) < 1e-24) return 0.0;
  }
  double best = std::min(norm(closest_point_on_triangle(p, a, b, c) - p),
                         norm(closest_point_on_triangle(q, a, b, c) - q));
  best = std::min(best, segment_segment_distance(p, q, a, b));
  best = std::min(best, segment_segment_distance(p, q, b, c));
  best = std::min(best, segment_segment_distance(p, q, c, a));
  return best;
}

// ---------------------------------------------------------------------------
// MeshBvh
// ---------------------------------------------------------------------------

void MeshBvh::Box::grow(const Vec3& p) {
  lo.x = std::min(lo.x, p.x); lo.y = std::min(lo.y, p.y); lo.z = std::min(lo.z, p.z);
  hi.x = std::max(hi.x, p.x); hi.y = std::max(hi.y, p.y); hi.z = std::max(hi.z, p.z);
}

double MeshBvh::Box::sq_dist(const Vec3& p) const {
  double d2 = 0;
  for (int i = 0; i < 3; ++i) {
    const double d = std::max({lo[i] - p[i], 0.0, p[i] - hi[i]});
    d2 += d * d;
  }
  return d2;
}

double MeshBvh::Box::sq_dist_segment(const Vec3& a, const Vec3& b) const {
  // Conservative: distance from segment to box, sampled via interval projection.
  // Lower bound through per-axis interval separation.
  double d2 = 0;
  for (int i = 0; i < 3; ++i) {
    const double smin = std::min(a[i], b[i]), smax = std::max(a[i], b[i]);
    double d = 0;
    if (smax < lo[i]) d = lo[i] - smax;
    else if (smin > hi[i]) d = smin - hi[i];
    d2 += d * d;
  }
  return d2;
}

MeshBvh::MeshBvh(const TriMesh& mesh) {
  const int nf = (int)mesh.faces.size();
  if (nf == 0) return;
  tris_.resize(nf);

  // Angle-weighted pseudonormals for sign determination.
  std::vector<Vec3> vnorm(mesh.vertices.size(), Vec3{0, 0, 0});
  std::map<std::pair<int, int>, Vec3> enorm;
  auto ekey = [](int a, int b) { return std::make_pair(std::min(a, b), std::max(a, b)); };
  for (int f = 0; f < nf; ++f) {
    const auto& t = mesh.faces[f];
    const Vec3 n = mesh.face_normal(f);
    for (int e = 0; e < 3; ++e) {
      const int i0 = t[e], i1 = t[(e + 1) % 3], i2 = t[(e + 2) % 3];
      const Vec3 e1 = normalized(mesh.vertices[i1] - mesh.vertices[i0]);
      const Vec3 e2 = normalized(mesh.vertices[i2] - mesh.vertices[i0]);
      const double angle = std::acos(std::clamp(dot(e1, e2), -1.0, 1.0));
      vnorm[i0] += n * angle;
      enorm[ekey(i0, i1)] += n;
    }
  }
  for (int f = 0; f < nf; ++f) {
    const auto& t = mesh.faces[f];
    Tri& tri = tris_[f];
    tri.a = mesh.vertices[t[0]];
    tri.b = mesh.vertices[t[1]];
    tri.c = mesh.vertices[t[2]];
    tri.face_normal = mesh.face_normal(f);
    for (int v = 0; v < 3; ++v) tri.vertex_normal[v] = vnorm[t[v]];
    tri.edge_normal[0] = enorm[ekey(t[0], t[1])];
    tri.edge_normal[1] = enorm[ekey(t[1], t[2])];
    tri.edge_normal[2] = enorm[ekey(t[2], t[0])];
  }

  order_.resize(nf);
  std::iota(order_.begin(), order_.end(), 0);
  root_ = build(0, nf);
}

int MeshBvh::build(int begin, int end) {
  Node node;
  for (int i = begin; i < end; ++i) {
    const Tri& t = tris_[order_[i]];
    node.box.grow(t.a);
    node.box.grow(t.b);
    node.box.grow(t.c);
  }
  const int self = (int)nodes_.size();
  nodes_.push_back(node);
  if (end - begin <= 4) {
    nodes_[self].begin = begin;
    nodes_[self].end = end;
    return self;
  }
  const Vec3 ext = node.box.hi - node.box.lo;
  const int axis = ext.x >= ext.y && ext.x >= ext.z ? 0 : (ext.y >= ext.z ? 1 : 2);
  const int mid = (begin + end) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int lhs, int rhs) {
                     const Tri& lt = tris_[lhs];
                     const Tri& rt = tris_[rhs];
                     return (lt.a[axis] + lt.b[axis] + lt.c[axis]) <
                            (rt.a[axis] + rt.b[axis] + rt.c[axis]);
                   });
  const int l = build(begin, mid);
  const int r = build(mid, end);
  nodes_[self].left = l;
  nodes_[self].right = r;
  return self;
}

void MeshBvh::query_point(int ni, const Vec3& q, double& best_sq, int& best_tri,
                          Vec3& best_pt) const {
  const Node& node = nodes_[ni];
  if (node.box.sq_dist(q) >= best_sq) return;
  if (node.left < 0) {
    for (int i = node.begin; i < node.end; ++i) {
      const int ti = order_[i];
      const Tri& t = tris_[ti];
      const Vec3 cp = closest_point_on_triangle(q, t.a, t.b, t.c);
      const double d2 = norm2(cp - q);
      if (d2 < best_sq) {
        best_sq = d2;
        best_tri = ti;
        best_pt = cp;
      }
    }
    return;
  }
  const double dl = nodes_[node.left].box.sq_dist(q);
  const double dr = nodes_[node.right].box.sq_dist(q);
  if (dl < dr) {
    query_point(node.left, q, best_sq, best_tri, best_pt);
    query_point(node.right, q, best_sq, best_tri, best_pt);
  } else {
    query_point(node.right, q, best_sq, best_tri, best_pt);
    query_point(node.left, q, best_sq, best_tri, best_pt);
  }
}

double MeshBvh::distance(const Vec3& q, Vec3* closest) const {
  if (empty()) return std::numeric_limits<double>::infinity();
  double best_sq = std::numeric_limits<double>::infinity();
  int best_tri = -1;
  Vec3 best_pt;
  query_point(root_, q, best_sq, best_tri, best_pt);
  if (closest) *closest = best_pt;
  return std::sqrt(best_sq);
}

double MeshBvh::signed_distance(const Vec3& q) const {
  if (empty()) return std::numeric_limits<double>::infinity();
  double best_sq = std::numeric_limits<double>::infinity();
  int best_tri = -1;
  Vec3 best_pt;
  query_point(root_, q, best_sq, best_tri, best_pt);
  const Tri& t = tris_[best_tri];

  // Pick the pseudonormal for the closest feature.
  int region = 0;
  closest_point_on_triangle(q, t.a, t.b, t.c, &region);
  Vec3 n;
  switch (region) {
    case 0: n = t.face_normal; break;
    case 1: n = t.edge_normal[0]; break;
    case 2: n = t.edge_normal[1]; break;
    case 3: n = t.edge_normal[2]; break;
    default: n = t.vertex_normal[region - 4]; break;
  }
  const double d = std::sqrt(best_sq);
  return dot(q - best_pt, n) >= 0 ? d : -d;
}

void MeshBvh::query_segment(int ni, const Vec3& a, const Vec3& b, double& best_sq) const {
  const Node& node = nodes_[ni];
  if (node.box.sq_dist_segment(a, b) >= best_sq) return;
  if (node.left < 0) {
    for (int i = node.begin; i < node.end; ++i) {
      const Tri& t = tris_[order_[i]];
      const double d = segment_triangle_distance(a, b, t.a, t.b, t.c);
      best_sq = std::min(best_sq, d * d);
      if (best_sq == 0.0) return;
    }
    return;
  }
  query_segment(node.left, a, b, best_sq);
  if (best_sq > 0.0) query_segment(node.right, a, b, best_sq);
}

double MeshBvh::segment_distance(const Vec3& a, const Vec3& b) const {
  if (empty()) return std::numeric_limits<double>::infinity();
  double best_sq = std::numeric_limits<double>::infinity();
  query_segment(root_, a, b, best_sq);
  return std::sqrt(best_sq);
}

}  // namespace holdfield

#include "holdfield/meshmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <thread>
#include <unordered_map>

#include "holdfield/mc_tables.hpp"
#include "json.hpp"

namespace holdfield {

// ---------------------------------------------------------------------------
// marching cubes
// ---------------------------------------------------------------------------

TriMesh marching_cubes(const std::function<double(const Vec3&)>& field, int resolution,
                       const Vec3& lo, const Vec3& hi, int workers) {
  const int n = resolution;
  const int nv = n + 1;
  const Vec3 cell{(hi.x - lo.x) / n, (hi.y - lo.y) / n, (hi.z - lo.z) / n};

  std::vector<double> grid((size_t)nv * nv * nv);
  auto gidx = [nv](int i, int j, int k) { return ((size_t)k * nv + j) * nv + i; };

  if (workers <= 0) {
    workers = (int)std::thread::hardware_concurrency();
    if (const char* env = std::getenv("HOLDFIELD_THREADS")) workers = std::max(1, atoi(env));
  }
  workers = std::clamp(workers, 1, nv);
  {
    std::vector<std::thread> pool;
    std::atomic<int> next_k{0};
    auto fill = [&]() {
      int k;
      while ((k = next_k.fetch_add(1)) < nv)
        for (int j = 0; j < nv; ++j)
          for (int i = 0; i < nv; ++i)
            grid[gidx(i, j, k)] = field({lo.x + i * cell.x, lo.y + j * cell.y, lo.z + k * cell.z});
    };
    for (int w = 1; w < workers; ++w) pool.emplace_back(fill);
    fill();
    for (auto& t : pool) t.join();
  }

  bool has_pos = false, has_neg = false;
  for (double v : grid) {
    has_pos |= v > 0;
    has_neg |= v <= 0;
    if (has_pos && has_neg) break;
  }
  if (!has_pos || !has_neg) throw EmptyLevelSet();

  // Bourke corner order relative to (i, j, k).
  static const int corner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                   {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
  static const int edge_ends[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                       {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

  TriMesh mesh;
  std::unordered_map<uint64_t, int> edge_vertex;
  auto vertex_on_edge = [&](int i, int j, int k, int e) {
    const int* a = corner[edge_ends[e][0]];
    const int* b = corner[edge_ends[e][1]];
    const int ia = i + a[0], ja = j + a[1], ka = k + a[2];
    const int ib = i + b[0], jb = j + b[1], kb = k + b[2];
    // Canonical undirected key across cells.
    const uint64_t ga = gidx(ia, ja, ka), gb = gidx(ib, jb, kb);
    const uint64_t key = std::min(ga, gb) * (uint64_t)grid.size() + std::max(ga, gb);
    const auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    const double va = grid[ga], vb = grid[gb];
    double t = (0.0 - va) / (vb - va);
    t = std::clamp(t, 0.0, 1.0);
    const Vec3 pa{lo.x + ia * cell.x, lo.y + ja * cell.y, lo.z + ka * cell.z};
    const Vec3 pb{lo.x + ib * cell.x, lo.y + jb * cell.y, lo.z + kb * cell.z};
    const int id = (int)mesh.vertices.size();
    mesh.vertices.push_back(pa + (pb - pa) * t);
    edge_vertex.emplace(key, id);
    return id;
  };

  for (int k = 0; k < n; ++k)
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        int cube = 0;
        for (int c = 0; c < 8; ++c)
          if (grid[gidx(i + corner[c][0], j + corner[c][1], k + corner[c][2])] < 0.0)
            cube |= 1 << c;
        if (mc::kEdgeTable[cube] == 0) continue;
        int verts[12];
        for (int e = 0; e < 12; ++e)
          if (mc::kEdgeTable[cube] & (1 << e)) verts[e] = vertex_on_edge(i, j, k, e);
        for (int t = 0; mc::kTriTable[cube][t] != -1; t += 3)
          mesh.faces.push_back({verts[mc::kTriTable[cube][t]], verts[mc::kTriTable[cube][t + 1]],
                                verts[mc::kTriTable[cube][t + 2]]});
      }
  mesh.remove_degenerate_faces();
  if (mesh.empty()) throw EmptyLevelSet("level set produced no faces");
  return mesh;
}

// ---------------------------------------------------------------------------
// Umeyama / ICP
// ---------------------------------------------------------------------------

namespace {

// Jacobi eigen-decomposition of a symmetric 3x3 matrix: A = V diag(d) V^T.
void symmetric_eigen3(Mat3 a, Mat3& v, Vec3& d) {
  v = Mat3::identity();
  for (int sweep = 0; sweep < 32; ++sweep) {
    double off = std::abs(a(0, 1)) + std::abs(a(0, 2)) + std::abs(a(1, 2));
    if (off < 1e-15) break;
    for (int p = 0; p < 2; ++p)
      for (int q = p + 1; q < 3; ++q) {
        if (std::abs(a(p, q)) < 1e-18) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        Mat3 r = Mat3::identity();
        r(p, p) = c; r(q, q) = c; r(p, q) = s; r(q, p) = -s;
        a = r.transposed() * a * r;
        v = v * r;
      }
  }
  d = {a(0, 0), a(1, 1), a(2, 2)};
}

// Singular value decomposition a = u diag(s) v^T for 3x3 matrices.
void svd3(const Mat3& a, Mat3& u, Vec3& s, Mat3& v) {
  Vec3 d;
  symmetric_eigen3(a.transposed() * a, v, d);
  // Sort descending.
  int order[3] = {0, 1, 2};
  std::sort(order, order + 3, [&](int x, int y) { return d[x] > d[y]; });
  Mat3 vs;
  Vec3 ds;
  for (int c = 0; c < 3; ++c) {
    for (int r = 0; r < 3; ++r) vs(r, c) = v(r, order[c]);
    ds[c] = std::max(d[order[c]], 0.0);
  }
  v = vs;
  s = {std::sqrt(ds.x), std::sqrt(ds.y), std::sqrt(ds.z)};
  // u columns = A v / s, re-orthonormalized for tiny singular values.
  Vec3 cols[3];
  for (int c = 0; c < 3; ++c) {
    const Vec3 av = a * Vec3{v(0, c), v(1, c), v(2, c)};
    cols[c] = s[c] > 1e-12 ? av / s[c] : Vec3{0, 0, 0};
  }
  if (s.z <= 1e-12 || norm(cols[2]) < 0.5) cols[2] = cross(cols[0], cols[1]);
  if (s.y <= 1e-12 || norm(cols[1]) < 0.5) cols[1] = cross(cols[2], cols[0]);
  for (int c = 0; c < 3; ++c) {
    cols[c] = normalized(cols[c]);
    for (int r = 0; r < 3; ++r) u(r, c) = cols[c][r];
  }
}

}  // namespace

ScaledRigid umeyama(const std::vector<Vec3>& from, const std::vector<Vec3>& to,
                    bool allow_scale) {
  if (from.size() != to.size() || from.empty()) throw Error("umeyama: bad correspondences");
  const double n = (double)from.size();
  Vec3 mu_x{0, 0, 0}, mu_y{0, 0, 0};
  for (size_t i = 0; i < from.size(); ++i) {
    mu_x += from[i];
    mu_y += to[i];
  }
  mu_x = mu_x / n;
  mu_y = mu_y / n;
  Mat3 cov;
  for (auto& m : cov.m) m = 0;
  double var_x = 0;
  for (size_t i = 0; i < from.size(); ++i) {
    const Vec3 dx = from[i] - mu_x;
    const Vec3 dy = to[i] - mu_y;
    var_x += norm2(dx);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) cov(r, c) += dy[r] * dx[c];
  }
  for (auto& m : cov.m) m /= n;
  var_x /= n;

  Mat3 u, v;
  Vec3 s;
  svd3(cov, u, s, v);
  Vec3 sign{1, 1, 1};
  if (u.det() * v.det() < 0) sign.z = -1;
  Mat3 d = Mat3::identity();
  d(2, 2) = sign.z;
  ScaledRigid out;
  out.rotation = u * d * v.transposed();
  out.scale = allow_scale && var_x > 1e-30
                  ? (s.x * sign.x + s.y * sign.y + s.z * sign.z) / var_x
                  : 1.0;
  if (out.scale <= 1e-12) out.scale = 1e-12;
  out.translation = mu_y - out.rotation * mu_x * out.scale;
  return out;
}

IcpResult icp_align(const TriMesh& source, const TriMesh& target, bool allow_scale, int restarts,
                    int max_iterations, double tol) {
  if (source.empty() || target.empty()) throw Error("icp_align: empty mesh");
  const KdTree target_tree(target.vertices);

  // Subsample source vertices deterministically.
  std::vector<Vec3> src = source.vertices;
  const size_t max_points = 3000;
  if (src.size() > max_points) {
    std::vector<Vec3> sub;
    const double stride = (double)src.size() / max_points;
    for (size_t i = 0; i < max_points; ++i) sub.push_back(src[(size_t)(i * stride)]);
    src = std::move(sub);
  }

  // Centroid / spread matching as the common seed.
  Vec3 src_c{0, 0, 0}, tgt_c{0, 0, 0};
  for (const auto& p : src) src_c += p;
  src_c = src_c / (double)src.size();
  for (const auto& p : target.vertices) tgt_c += p;
  tgt_c = tgt_c / (double)target.vertices.size();
  double src_r = 0, tgt_r = 0;
  for (const auto& p : src) src_r += norm(p - src_c);
  src_r /= (double)src.size();
  for (const auto& p : target.vertices) tgt_r += norm(p - tgt_c);
  tgt_r /= (double)target.vertices.size();
  const double seed_scale = allow_scale && src_r > 1e-12 ? tgt_r / src_r : 1.0;

  std::mt19937_64 rng(20240229);
  std::normal_distribution<double> gauss(0.0, 1.0);
  IcpResult best;
  best.rms = std::numeric_limits<double>::infinity();

  for (int attempt = 0; attempt <= restarts; ++attempt) {
    ScaledRigid current;
    current.scale = seed_scale;
    if (attempt > 0) {
      Vec3 axis{gauss(rng), gauss(rng), gauss(rng)};
      const double angle = std::uniform_real_distribution<double>(0.0, M_PI)(rng);
      current.rotation = rotation_from_axis_angle(normalized(axis) * angle);
    }
    current.translation = tgt_c - current.rotation * src_c * current.scale;

    double rms = std::numeric_limits<double>::infinity();
    int iter = 0;
    bool converged = false;
    for (; iter < max_iterations; ++iter) {
      std::vector<Vec3> moved(src.size()), matched(src.size());
      double acc = 0;
      for (size_t i = 0; i < src.size(); ++i) {
        moved[i] = apply(current, src[i]);
        double d2;
        const int j = target_tree.nearest(moved[i], &d2);
        matched[i] = target.vertices[j];
        acc += d2;
      }
      rms = std::sqrt(acc / (double)src.size());
      const ScaledRigid update = umeyama(moved, matched, allow_scale);
      current = update.compose(current);
      const double delta = norm(update.translation) +
                           norm(axis_angle_from_rotation(update.rotation)) +
                           std::abs(update.scale - 1.0);
      if (delta < tol) {
        converged = true;
        break;
      }
    }
    if (rms < best.rms) {
      best.transform = current;
      best.rms = rms;
      best.converged = converged;
      best.iterations = iter;
    }
  }
  best.aligned = source;
  best.aligned.apply_transform(best.transform);
  return best;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

namespace {

double mean_sq_nn(const std::vector<Vec3>& from, const KdTree& to) {
  double acc = 0;
  for (const auto& p : from) {
    double d2;
    to.nearest(p, &d2);
    acc += d2;
  }
  return acc / (double)from.size();
}

double frac_within(const std::vector<Vec3>& from, const KdTree& to, double threshold) {
  const double t2 = threshold * threshold;
  size_t hits = 0;
  for (const auto& p : from) {
    double d2;
    to.nearest(p, &d2);
    if (d2 <= t2) ++hits;
  }
  return (double)hits / (double)from.size();
}

}  // namespace

double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  const KdTree ta(a), tb(b);
  return 0.5 * (mean_sq_nn(a, tb) + mean_sq_nn(b, ta));
}

double fscore(const std::vector<Vec3>& a, const std::vector<Vec3>& b, double threshold) {
  const KdTree ta(a), tb(b);
  const double precision = frac_within(a, tb, threshold);
  const double recall = frac_within(b, ta, threshold);
  if (precision + recall <= 0.0) return 0.0;
  return 100.0 * 2.0 * precision * recall / (precision + recall);
}

double recall_percent(const std::vector<Vec3>& pred, const std::vector<Vec3>& reference,
                      double threshold) {
  const KdTree tp(pred);
  return 100.0 * frac_within(reference, tp, threshold);
}

double chamfer_mesh(const TriMesh& a, const TriMesh& b, int samples) {
  return chamfer(sample_surface(a, samples, kMetricSampleSeed),
                 sample_surface(b, samples, kMetricSampleSeed));
}

double fscore_mesh(const TriMesh& a, const TriMesh& b, double threshold, int samples) {
  return fscore(sample_surface(a, samples, kMetricSampleSeed),
                sample_surface(b, samples, kMetricSampleSeed), threshold);
}

double mpjpe(const std::vector<Vec3>& predicted, const std::vector<Vec3>& truth,
             int root_index) {
  if (predicted.size() != truth.size() || predicted.empty())
    throw Error("mpjpe: joint count mismatch");
  const Vec3 pr = predicted[root_index], tr = truth[root_index];
  double acc = 0;
  for (size_t i = 0; i < predicted.size(); ++i)
    acc += norm((predicted[i] - pr) - (truth[i] - tr));
  return 10.0 * acc / (double)predicted.size();  // cm -> mm
}

double cd_h(const std::vector<TriMesh>& pred_objects, const std::vector<TriMesh>& gt_objects,
            const std::vector<Vec3>& pred_roots, const std::vector<Vec3>& gt_roots, int samples) {
  if (pred_objects.size() != gt_objects.size() || pred_objects.size() != pred_roots.size() ||
      pred_objects.size() != gt_roots.size() || pred_objects.empty())
    throw Error("cd_h: frame count mismatch");
  double acc = 0;
  for (size_t f = 0; f < pred_objects.size(); ++f) {
    auto pred = sample_surface(pred_objects[f], samples, kMetricSampleSeed + f);
    auto gt = sample_surface(gt_objects[f], samples, kMetricSampleSeed + f);
    for (auto& p : pred) p -= pred_roots[f];
    for (auto& p : gt) p -= gt_roots[f];
    acc += chamfer(pred, gt);
  }
  return acc / (double)pred_objects.size();
}

void save_metric_report(const MetricReport& report, const std::string& path) {
  nlohmann::json j;
  j["header"] = {{"cd_definition", MetricReport::cd_definition()}};
  j["mpjpe_mm"] = report.mpjpe_mm;
  j["cd_cm2"] = report.cd_cm2;
  j["f5_pct"] = report.f5_pct;
  j["f10_pct"] = report.f10_pct;
  j["cdh_cm2"] = report.cdh_cm2;
  j["per_frame_mpjpe"] = report.per_frame_mpjpe;
  j["per_frame_cdh"] = report.per_frame_cdh;
  std::ofstream os(path);
  if (!os) throw Error("save_metric_report: cannot open " + path);
  os << j.dump(2) << "\n";
}

}  // namespace holdfield

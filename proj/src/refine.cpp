#include "holdfield/refine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

namespace holdfield {

// ---------------------------------------------------------------------------
// spec-level operations (plain path)
// ---------------------------------------------------------------------------

double loss_contact(const TriMesh& hand_posed, const TriMesh& object_posed,
                    const ContactSpec& spec) {
  if (hand_posed.empty() || object_posed.vertices.empty())
    throw Error("loss_contact: empty mesh");
  const KdTree tree(object_posed.vertices);
  double acc = 0;
  for (int id : spec.tip_vertex_ids) {
    double d2;
    tree.nearest(hand_posed.vertices[id], &d2);
    acc += std::sqrt(d2);
  }
  return acc;
}

namespace {

// Distance from p to segment [a, b] in 2D with the clamped closest parameter.
struct SegDist {
  double d;
  double t;
};

SegDist point_segment_2d(double px, double py, double ax, double ay, double bx, double by) {
  const double ex = bx - ax, ey = by - ay;
  const double len2 = ex * ex + ey * ey;
  double t = len2 > 1e-30 ? ((px - ax) * ex + (py - ay) * ey) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * ex, qy = ay + t * ey;
  return {std::hypot(px - qx, py - qy), t};
}

bool point_in_triangle_2d(double px, double py, const double* a, const double* b,
                          const double* c) {
  auto side = [&](const double* p0, const double* p1) {
    return (p1[0] - p0[0]) * (py - p0[1]) - (p1[1] - p0[1]) * (px - p0[0]);
  };
  const double s0 = side(a, b), s1 = side(b, c), s2 = side(c, a);
  const bool has_neg = s0 < 0 || s1 < 0 || s2 < 0;
  const bool has_pos = s0 > 0 || s1 > 0 || s2 > 0;
  return !(has_neg && has_pos);
}

inline double sigmoid_d(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

// Shared rasterization core: accumulates log(1 - s_f) per pixel.
// Vertices in normalized [0,1] image coordinates.
void accumulate_log_buffer(std::span<const double> uv,
                           const std::vector<std::array<int, 3>>& faces, int resolution,
                           double sharpness, std::vector<double>& log_acc) {
  log_acc.assign((size_t)resolution * resolution, 0.0);
  const double margin = 12.0 * sharpness;
  for (const auto& f : faces) {
    const double* a = &uv[2 * f[0]];
    const double* b = &uv[2 * f[1]];
    const double* c = &uv[2 * f[2]];
    const double lo_x = std::min({a[0], b[0], c[0]}) - margin;
    const double hi_x = std::max({a[0], b[0], c[0]}) + margin;
    const double lo_y = std::min({a[1], b[1], c[1]}) - margin;
    const double hi_y = std::max({a[1], b[1], c[1]}) + margin;
    const int x0 = std::max(0, (int)std::floor(lo_x * resolution));
    const int x1 = std::min(resolution - 1, (int)std::ceil(hi_x * resolution));
    const int y0 = std::max(0, (int)std::floor(lo_y * resolution));
    const int y1 = std::min(resolution - 1, (int)std::ceil(hi_y * resolution));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double px = (x + 0.5) / resolution, py = (y + 0.5) / resolution;
        const double d0 = point_segment_2d(px, py, a[0], a[1], b[0], b[1]).d;
        const double d1 = point_segment_2d(px, py, b[0], b[1], c[0], c[1]).d;
        const double d2 = point_segment_2d(px, py, c[0], c[1], a[0], a[1]).d;
        double d = std::min({d0, d1, d2});
        if (!point_in_triangle_2d(px, py, a, b, c)) d = -d;
        if (d < -margin) continue;  // saturated: no contribution either pass
        const double s = std::min(sigmoid_d(d / sharpness), 1.0 - 1e-12);
        log_acc[(size_t)y * resolution + x] += std::log1p(-s);
      }
  }
}

}  // namespace

GrayImage soft_rasterize(const TriMesh& mesh, const Camera& camera, double sharpness,
                         int resolution) {
  if (mesh.empty()) throw DegenerateMesh("soft_rasterize: empty mesh");
  bool any_area = false;
  for (size_t f = 0; f < mesh.faces.size() && !any_area; ++f)
    any_area = mesh.face_area((int)f) > 1e-14;
  if (!any_area) throw DegenerateMesh("soft_rasterize: all faces degenerate");

  std::vector<double> uv(2 * mesh.vertices.size());
  for (size_t v = 0; v < mesh.vertices.size(); ++v) {
    const Pixel px = project(camera, mesh.vertices[v]);
    uv[2 * v] = px.u / camera.width;
    uv[2 * v + 1] = px.v / camera.height;
  }
  std::vector<double> log_acc;
  accumulate_log_buffer(uv, mesh.faces, resolution, sharpness, log_acc);
  GrayImage img;
  img.width = img.height = resolution;
  img.values.resize(log_acc.size());
  for (size_t i = 0; i < log_acc.size(); ++i) img.values[i] = 1.0 - std::exp(log_acc[i]);
  return img;
}

namespace {

uint8_t sample_label_nearest(const std::vector<uint8_t>& labels, int lw, int lh, int x, int y,
                             int resolution) {
  const int lx = std::min(lw - 1, x * lw / resolution);
  const int ly = std::min(lh - 1, y * lh / resolution);
  return labels[(size_t)ly * lw + lx];
}

}  // namespace

double loss_mask(const GrayImage& hand_sil, const GrayImage& object_sil,
                 const std::vector<uint8_t>& labels, int label_width, int label_height) {
  if (hand_sil.width != object_sil.width || hand_sil.height != object_sil.height)
    throw Error("loss_mask: resolution mismatch");
  const int res = hand_sil.width;
  double acc_h = 0, acc_o = 0;
  int n_h = 0, n_o = 0;
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      const uint8_t label = sample_label_nearest(labels, label_width, label_height, x, y, res);
      if (label == 255) continue;
      if (label != 2) {  // pixels not claimed by the object judge the hand
        acc_h += std::abs(hand_sil.at(x, y) - (label == 1 ? 1.0 : 0.0));
        ++n_h;
      }
      if (label != 1) {
        acc_o += std::abs(object_sil.at(x, y) - (label == 2 ? 1.0 : 0.0));
        ++n_o;
      }
    }
  return (n_h ? acc_h / n_h : 0.0) + (n_o ? acc_o / n_o : 0.0);
}

double loss_reproj(const std::vector<Vec3>& points, const std::vector<Pixel>& targets,
                   const Camera& camera) {
  if (points.size() != targets.size() || points.empty())
    throw Error("loss_reproj: correspondence mismatch");
  double acc = 0;
  for (size_t i = 0; i < points.size(); ++i) {
    const Pixel px = project(camera, points[i]);
    acc += std::hypot(px.u - targets[i].u, px.v - targets[i].v);
  }
  return acc / (double)points.size();
}

// ---------------------------------------------------------------------------
// tape silhouette loss
// ---------------------------------------------------------------------------

namespace {

struct SilhouetteLossNode : FatNode {
  std::vector<int> uv_ids;
  std::vector<double> uv;
  std::vector<std::array<int, 3>> faces;
  std::vector<double> target;
  std::vector<uint8_t> valid;
  int resolution = 128;
  double sharpness = 0.01;
  std::vector<double> log_acc;
  int valid_count = 0;
  int out_loss = -1;

  double forward() {
    accumulate_log_buffer(uv, faces, resolution, sharpness, log_acc);
    double acc = 0;
    valid_count = 0;
    for (size_t i = 0; i < log_acc.size(); ++i) {
      if (!valid[i]) continue;
      acc += std::abs(1.0 - std::exp(log_acc[i]) - target[i]);
      ++valid_count;
    }
    return valid_count ? acc / valid_count : 0.0;
  }

  void backward(Tape& tape) override {
    const double g = tape.adj(out_loss);
    if (g == 0.0 || valid_count == 0) return;
    const double margin = 12.0 * sharpness;
    for (const auto& f : faces) {
      const double* a = &uv[2 * f[0]];
      const double* b = &uv[2 * f[1]];
      const double* c = &uv[2 * f[2]];
      const double lo_x = std::min({a[0], b[0], c[0]}) - margin;
      const double hi_x = std::max({a[0], b[0], c[0]}) + margin;
      const double lo_y = std::min({a[1], b[1], c[1]}) - margin;
      const double hi_y = std::max({a[1], b[1], c[1]}) + margin;
      const int x0 = std::max(0, (int)std::floor(lo_x * resolution));
      const int x1 = std::min(resolution - 1, (int)std::ceil(hi_x * resolution));
      const int y0 = std::max(0, (int)std::floor(lo_y * resolution));
      const int y1 = std::min(resolution - 1, (int)std::ceil(hi_y * resolution));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const size_t pix = (size_t)y * resolution + x;
          if (!valid[pix]) continue;
          const double px = (x + 0.5) / resolution, py = (y + 0.5) / resolution;
          const SegDist s0 = point_segment_2d(px, py, a[0], a[1], b[0], b[1]);
          const SegDist s1 = point_segment_2d(px, py, b[0], b[1], c[0], c[1]);
          const SegDist s2 = point_segment_2d(px, py, c[0], c[1], a[0], a[1]);
          int edge = 0;
          double d = s0.d;
          if (s1.d < d) { d = s1.d; edge = 1; }
          if (s2.d < d) { d = s2.d; edge = 2; }
          if (d < 1e-12) continue;
          const double sign = point_in_triangle_2d(px, py, a, b, c) ? 1.0 : -1.0;
          if (sign * d < -margin) continue;
          const double s = std::min(sigmoid_d(sign * d / sharpness), 1.0 - 1e-12);
          const double prob = 1.0 - std::exp(log_acc[pix]);
          const double dL_dP = g * (prob >= target[pix] ? 1.0 : -1.0) / valid_count;
          // P = 1 - exp(acc) with acc += log(1 - s).
          const double dL_ds = dL_dP * std::exp(log_acc[pix]) / (1.0 - s);
          const double dL_dd = dL_ds * s * (1.0 - s) / sharpness * sign;
          const SegDist& sd = edge == 0 ? s0 : (edge == 1 ? s1 : s2);
          const double* e0 = edge == 0 ? a : (edge == 1 ? b : c);
          const double* e1 = edge == 0 ? b : (edge == 1 ? c : a);
          const int v0 = f[edge], v1 = f[(edge + 1) % 3];
          const double qx = e0[0] + sd.t * (e1[0] - e0[0]);
          const double qy = e0[1] + sd.t * (e1[1] - e0[1]);
          const double ux = (px - qx) / d, uy = (py - qy) / d;
          tape.add_adj(uv_ids[2 * v0], dL_dd * -(1.0 - sd.t) * ux);
          tape.add_adj(uv_ids[2 * v0 + 1], dL_dd * -(1.0 - sd.t) * uy);
          tape.add_adj(uv_ids[2 * v1], dL_dd * -sd.t * ux);
          tape.add_adj(uv_ids[2 * v1 + 1], dL_dd * -sd.t * uy);
        }
    }
  }
};

}  // namespace

Var soft_silhouette_loss_tape(Tape& tape, std::span<const Var> uv,
                              const std::vector<std::array<int, 3>>& faces,
                              const std::vector<double>& target,
                              const std::vector<uint8_t>& valid, int resolution,
                              double sharpness) {
  auto node = std::make_unique<SilhouetteLossNode>();
  node->faces = faces;
  node->target = target;
  node->valid = valid;
  node->resolution = resolution;
  node->sharpness = sharpness;
  node->uv.resize(uv.size());
  node->uv_ids.resize(uv.size());
  for (size_t i = 0; i < uv.size(); ++i) {
    node->uv[i] = uv[i].value();
    node->uv_ids[i] = uv[i].id;
  }
  const double loss = node->forward();
  SilhouetteLossNode* raw = node.get();
  tape.push_fat(std::move(node));
  const Var out = tape.fat_output(loss);
  raw->out_loss = out.id;
  return out;
}

// ---------------------------------------------------------------------------
// stage energies
// ---------------------------------------------------------------------------

namespace {

struct TapeVec3 {
  Var x, y, z;
};

TapeVec3 tape_apply_rigid(const TapeRigid& t, const TapeVec3& p) {
  return {t.r[0] * p.x + t.r[1] * p.y + t.r[2] * p.z + t.t[0],
          t.r[3] * p.x + t.r[4] * p.y + t.r[5] * p.z + t.t[1],
          t.r[6] * p.x + t.r[7] * p.y + t.r[8] * p.z + t.t[2]};
}

// Projection to pixel coordinates with a z floor for stability.
void tape_project(Tape& tape, const Camera& cam, const TapeVec3& p, Var& u, Var& v) {
  const Mat3 rt = cam.cam_to_world.rotation.transposed();
  const Vec3 c = cam.cam_to_world.translation;
  Var dx = p.x - c.x, dy = p.y - c.y, dz = p.z - c.z;
  const Var cx = rt(0, 0) * dx + rt(0, 1) * dy + rt(0, 2) * dz;
  const Var cy = rt(1, 0) * dx + rt(1, 1) * dy + rt(1, 2) * dz;
  Var cz = rt(2, 0) * dx + rt(2, 1) * dy + rt(2, 2) * dz;
  cz = max(cz, 1e-3);
  u = cam.fx * (cx / cz) + cam.cx;
  v = cam.fy * (cy / cz) + cam.cy;
}

struct StageConfig {
  bool align = false;          // align: translations/shape only, cloud contact, no mask
  bool freeze_globals = false; // keep s and beta fixed (gauge-fixing phase)
};

struct FrameEnergy {
  double contact = 0, mask = 0, reproj = 0;
};

// Per-frame energy on its own tape; gradients accumulate into grad_out.
FrameEnergy frame_energy(const RefineProblem& prob, const StageConfig& stage, int frame,
                         const TriMesh& object_proxy, double contact_rest, bool contact_active,
                         std::vector<double>* grad_out) {
  const Skeleton& sk = *prob.skeleton;
  const SceneParams& sp = prob.scene;
  ParamSet& params = *prob.params;
  const RefineFrameData& fd = prob.frames[frame];
  const int n_b = sk.bone_count();

  Tape tape(&params);

  std::vector<Var> theta(3 * n_b);
  for (int i = 0; i < 3 * n_b; ++i)
    theta[i] = tape.constant(params.values[sp.theta_offset(params, frame) + i]);
  std::vector<Var> beta(n_b);
  for (int b = 0; b < n_b; ++b) beta[b] = tape.leaf(sp.beta_offset(params) + b);
  const int rh = sp.rot_h_offset(params, frame), th = sp.t_h_offset(params, frame);
  const int ro = sp.rot_o_offset(params, frame), to = sp.t_o_offset(params, frame);
  const TapeRigid root = tape_rigid_from_params(tape, tape.leaf(rh), tape.leaf(rh + 1),
                                                tape.leaf(rh + 2), tape.leaf(th),
                                                tape.leaf(th + 1), tape.leaf(th + 2));
  const TapeRigid obj_rt = tape_rigid_from_params(tape, tape.leaf(ro), tape.leaf(ro + 1),
                                                  tape.leaf(ro + 2), tape.leaf(to),
                                                  tape.leaf(to + 1), tape.leaf(to + 2));
  const Var obj_scale = exp(tape.leaf(sp.log_s_offset(params)));

  std::vector<std::array<Var, 3>> joints;
  const auto bones = tape_forward_kinematics(tape, sk, theta, beta, root, &joints);

  auto hand_vertex = [&](int owner, const Vec3& local, const std::vector<double>& w) {
    TapeVec3 can{joints[owner][0] + beta[owner] * local.x,
                 joints[owner][1] + beta[owner] * local.y,
                 joints[owner][2] + beta[owner] * local.z};
    Var vx = tape.constant(0), vy = tape.constant(0), vz = tape.constant(0);
    for (int b = 0; b < n_b; ++b) {
      if (w[b] < 1e-8) continue;
      const TapeVec3 moved = tape_apply_rigid(bones[b], can);
      vx = vx + w[b] * moved.x;
      vy = vy + w[b] * moved.y;
      vz = vz + w[b] * moved.z;
    }
    return TapeVec3{vx, vy, vz};
  };

  auto object_vertex = [&](const Vec3& can) {
    const TapeVec3 scaled{obj_scale * can.x, obj_scale * can.y, obj_scale * can.z};
    return tape_apply_rigid(obj_rt, scaled);
  };

  FrameEnergy out;
  Var energy = tape.constant(0.0);

  if (contact_active && prob.hand_enabled && !prob.contact.tip_vertex_ids.empty()) {
    std::vector<TapeVec3> targets;
    if (stage.align) {
      for (const Vec3& p : prob.cloud_canonical) targets.push_back(object_vertex(p));
    } else {
      for (const Vec3& p : object_proxy.vertices) targets.push_back(object_vertex(p));
    }
    Var contact = tape.constant(0.0);
    const auto& owners = sk.owner_bones();
    const auto& locals = sk.local_offsets();
    const auto& weights = sk.template_weights();
    for (int tip : prob.contact.tip_vertex_ids) {
      const TapeVec3 v = hand_vertex(owners[tip], locals[tip], weights[tip]);
      int best = 0;
      double best_d2 = std::numeric_limits<double>::infinity();
      for (size_t j = 0; j < targets.size(); ++j) {
        const double ddx = v.x.value() - targets[j].x.value();
        const double ddy = v.y.value() - targets[j].y.value();
        const double ddz = v.z.value() - targets[j].z.value();
        const double d2 = ddx * ddx + ddy * ddy + ddz * ddz;
        if (d2 < best_d2) { best_d2 = d2; best = (int)j; }
      }
      const Var dx = v.x - targets[best].x;
      const Var dy = v.y - targets[best].y;
      const Var dz = v.z - targets[best].z;
      const Var dist = sqrt(dx * dx + dy * dy + dz * dz + 1e-24);
      // Rest radius absorbs the target sampling density so resting contact is
      // a true fixed point instead of chasing individual vertices.
      contact = contact + max(dist - contact_rest, tape.constant(0.0));
    }
    out.contact = contact.value();
    energy = energy + prob.w_contact * contact;
  }

  if (!stage.align && prob.w_mask > 0) {
    const int res = prob.raster_resolution;
    std::vector<double> target_h((size_t)res * res), target_o((size_t)res * res);
    std::vector<uint8_t> valid_h((size_t)res * res), valid_o((size_t)res * res);
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const uint8_t label =
            sample_label_nearest(fd.labels, fd.camera.width, fd.camera.height, x, y, res);
        const size_t i = (size_t)y * res + x;
        valid_h[i] = label != 255 && label != 2;
        valid_o[i] = label != 255 && label != 1;
        target_h[i] = label == 1 ? 1.0 : 0.0;
        target_o[i] = label == 2 ? 1.0 : 0.0;
      }

    if (prob.hand_enabled) {
      const auto& owners = sk.proxy_owner_bones();
      const auto& locals = sk.proxy_local_offsets();
      const auto& weights = sk.proxy_weights();
      std::vector<Var> uv(2 * sk.proxy_mesh().vertices.size());
      for (size_t v = 0; v < sk.proxy_mesh().vertices.size(); ++v) {
        const TapeVec3 world = hand_vertex(owners[v], locals[v], weights[v]);
        Var u, vv;
        tape_project(tape, fd.camera, world, u, vv);
        uv[2 * v] = u / (double)fd.camera.width;
        uv[2 * v + 1] = vv / (double)fd.camera.height;
      }
      const Var mh = soft_silhouette_loss_tape(tape, uv, sk.proxy_mesh().faces, target_h,
                                               valid_h, res, prob.raster_sharpness);
      out.mask += mh.value();
      energy = energy + prob.w_mask * mh;
    }
    {
      std::vector<Var> uv(2 * object_proxy.vertices.size());
      for (size_t v = 0; v < object_proxy.vertices.size(); ++v) {
        const TapeVec3 world = object_vertex(object_proxy.vertices[v]);
        Var u, vv;
        tape_project(tape, fd.camera, world, u, vv);
        uv[2 * v] = u / (double)fd.camera.width;
        uv[2 * v + 1] = vv / (double)fd.camera.height;
      }
      const Var mo = soft_silhouette_loss_tape(tape, uv, object_proxy.faces, target_o, valid_o,
                                               res, prob.raster_sharpness);
      out.mask += mo.value();
      energy = energy + prob.w_mask * mo;
    }
  }

  {
    Var reproj = tape.constant(0.0);
    int count = 0;
    for (int j = 0; prob.hand_enabled && j < n_b && j < (int)fd.joints2d.size(); ++j) {
      const TapeVec3 joint =
          tape_apply_rigid(bones[j], {joints[j][0], joints[j][1], joints[j][2]});
      Var u, v;
      tape_project(tape, fd.camera, joint, u, v);
      const Var du = u - fd.joints2d[j].u;
      const Var dv = v - fd.joints2d[j].v;
      reproj = reproj + sqrt(du * du + dv * dv + 1e-12);
      ++count;
    }
    for (size_t i = 0; i < fd.cloud2d.size() && i < prob.cloud_canonical.size(); ++i) {
      const TapeVec3 p = object_vertex(prob.cloud_canonical[i]);
      Var u, v;
      tape_project(tape, fd.camera, p, u, v);
      const Var du = u - fd.cloud2d[i].u;
      const Var dv = v - fd.cloud2d[i].v;
      reproj = reproj + sqrt(du * du + dv * dv + 1e-12);
      ++count;
    }
    if (count > 0) {
      // Plain sum over observations, matching the contact term's scale.
      out.reproj = reproj.value();
      energy = energy + prob.w_reproj * reproj;
    }
  }

  if (grad_out) {
    tape.backward(energy);
    const auto& g = tape.param_grad();
    for (size_t i = 0; i < g.size(); ++i) (*grad_out)[i] += g[i];
  }
  return out;
}

struct EnergyEval {
  double total = 0, contact = 0, mask = 0, reproj = 0;
};

EnergyEval stage_energy(const RefineProblem& prob, const StageConfig& stage,
                        const TriMesh& object_proxy, double contact_rest,
                        const std::vector<uint8_t>& contact_active,
                        std::vector<double>* grad_out) {
  EnergyEval out;
  const int n_frames = (int)prob.frames.size();
  std::vector<FrameEnergy> fe(n_frames);
  std::vector<std::vector<double>> grads;
  if (grad_out) grads.assign(n_frames, std::vector<double>(prob.params->size(), 0.0));

  int workers = (int)std::thread::hardware_concurrency();
  if (const char* env = std::getenv("HOLDFIELD_THREADS")) workers = std::max(1, atoi(env));
  workers = std::clamp(workers, 1, std::max(1, n_frames));
  std::atomic<int> next{0};
  auto run = [&]() {
    int f;
    while ((f = next.fetch_add(1)) < n_frames)
      fe[f] = frame_energy(prob, stage, f, object_proxy, contact_rest, contact_active[f] != 0,
                           grad_out ? &grads[f] : nullptr);
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();

  for (int f = 0; f < n_frames; ++f) {
    out.contact += fe[f].contact;
    out.mask += fe[f].mask;
    out.reproj += fe[f].reproj;
  }
  out.total = prob.w_contact * out.contact + prob.w_mask * out.mask + prob.w_reproj * out.reproj;
  if (grad_out)
    for (int f = 0; f < n_frames; ++f)
      for (size_t i = 0; i < grad_out->size(); ++i) (*grad_out)[i] += grads[f][i];
  return out;
}

// Covering-radius estimate of the contact target set: tips within this
// distance of a target count as touching, so resting contact is a fixed
// point at any target sampling density.
double rest_radius_for(const std::vector<Vec3>& points) {
  if (points.size() < 2) return 0.0;
  const KdTree tree(points);
  std::vector<double> nn;
  nn.reserve(points.size());
  for (const auto& p : points) {
    const auto ids = tree.knn(p, 2);
    if (ids.size() >= 2) nn.push_back(norm(points[ids[1]] - p));
  }
  std::sort(nn.begin(), nn.end());
  return nn.empty() ? 0.0 : 2.0 * nn[nn.size() / 2];
}

RefineResult run_stage(RefineProblem& prob, const StageConfig& stage) {
  ParamSet& params = *prob.params;
  const SceneParams& sp = prob.scene;
  const int n_frames = (int)prob.frames.size();
  const int n_b = prob.skeleton->bone_count();

  std::vector<uint8_t> opt(params.size(), 0);
  for (int f = 0; f < n_frames; ++f) {
    for (int i = 0; i < 3; ++i) {
      if (prob.hand_enabled) opt[sp.t_h_offset(params, f) + i] = 1;
      opt[sp.t_o_offset(params, f) + i] = 1;
      if (!stage.align) {
        if (prob.hand_enabled) opt[sp.rot_h_offset(params, f) + i] = 1;
        opt[sp.rot_o_offset(params, f) + i] = 1;
      }
    }
  }
  if (!stage.freeze_globals) {
    for (int b = 0; b < n_b; ++b) opt[sp.beta_offset(params) + b] = 1;
    opt[sp.log_s_offset(params)] = 1;
  }

  TriMesh object_proxy = prob.object_mesh_canonical;
  if (!stage.align && !object_proxy.empty() && (int)object_proxy.vertices.size() > 3000) {
    double lo = 1e30, hi = -1e30;
    for (const auto& v : object_proxy.vertices) {
      lo = std::min({lo, v.x, v.y, v.z});
      hi = std::max({hi, v.x, v.y, v.z});
    }
    object_proxy = cluster_decimate(object_proxy, (hi - lo) / 24.0);
  }

  std::vector<uint8_t> contact_active(n_frames, 1);
  double contact_rest = 0.0;
  for (int f = 0; f < n_frames; ++f) {
    const ObjectState obj = sp.object_state(params, f);
    std::vector<Vec3> targets_world;
    if (stage.align)
      for (const auto& p : prob.cloud_canonical) targets_world.push_back(apply(obj.to_world, p));
    else
      for (const auto& p : object_proxy.vertices) targets_world.push_back(apply(obj.to_world, p));
    if (targets_world.empty()) {
      contact_active[f] = 0;
      continue;
    }
    if (f == 0) contact_rest = rest_radius_for(targets_world);
    if (!stage.align && prob.hand_enabled) {
      const PosedHand posed = pose_hand(*prob.skeleton, sp.hand_state(params, f));
      const KdTree tree(targets_world);
      double best = 1e30;
      for (int tip : prob.contact.tip_vertex_ids) {
        double d2;
        tree.nearest(posed.mesh.vertices[tip], &d2);
        best = std::min(best, std::sqrt(d2));
      }
      contact_active[f] = best < prob.contact_gate ? 1 : 0;
    }
  }

  RefineResult result;
  std::vector<double> grad(params.size(), 0.0);
  EnergyEval current =
      stage_energy(prob, stage, object_proxy, contact_rest, contact_active, &grad);
  result.energies.push_back(current.total);

  // L-BFGS (two-loop recursion) over the optimized coordinates with Armijo
  // backtracking: monotone by construction and fast across the mixed-unit
  // energy terms.
  std::vector<int> opt_idx;
  for (size_t i = 0; i < opt.size(); ++i)
    if (opt[i]) opt_idx.push_back((int)i);
  const int n_opt = (int)opt_idx.size();
  auto gather = [&](const std::vector<double>& full) {
    std::vector<double> out(n_opt);
    for (int i = 0; i < n_opt; ++i) out[i] = full[opt_idx[i]];
    return out;
  };

  const int history = 8;
  std::vector<std::vector<double>> s_hist, y_hist;
  std::vector<double> rho_hist;
  std::vector<double> g = gather(grad);
  std::vector<double> x = gather(params.values);

  for (int iter = 0; iter < prob.max_iterations; ++iter) {
    double gnorm2 = 0;
    for (double v : g) gnorm2 += v * v;
    if (gnorm2 < 1e-18) {
      result.converged = true;
      break;
    }

    // Two-loop recursion.
    std::vector<double> d = g;
    std::vector<double> alpha(s_hist.size());
    for (int k = (int)s_hist.size() - 1; k >= 0; --k) {
      double dot_sd = 0;
      for (int i = 0; i < n_opt; ++i) dot_sd += s_hist[k][i] * d[i];
      alpha[k] = rho_hist[k] * dot_sd;
      for (int i = 0; i < n_opt; ++i) d[i] -= alpha[k] * y_hist[k][i];
    }
    double h0 = 1.0;
    if (!s_hist.empty()) {
      double sy = 0, yy = 0;
      for (int i = 0; i < n_opt; ++i) {
        sy += s_hist.back()[i] * y_hist.back()[i];
        yy += y_hist.back()[i] * y_hist.back()[i];
      }
      if (yy > 0) h0 = sy / yy;
    } else {
      h0 = 0.1 / std::sqrt(gnorm2);  // conservative first step
    }
    for (auto& v : d) v *= h0;
    for (size_t k = 0; k < s_hist.size(); ++k) {
      double dot_yd = 0;
      for (int i = 0; i < n_opt; ++i) dot_yd += y_hist[k][i] * d[i];
      const double beta_k = rho_hist[k] * dot_yd;
      for (int i = 0; i < n_opt; ++i) d[i] += s_hist[k][i] * (alpha[k] - beta_k);
    }
    double slope = 0;
    for (int i = 0; i < n_opt; ++i) slope += d[i] * g[i];
    if (slope <= 0) {  // lost curvature: restart from scaled steepest descent
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      const double scale = 0.1 / std::sqrt(gnorm2);
      slope = 0;
      for (int i = 0; i < n_opt; ++i) {
        d[i] = g[i] * scale;
        slope += d[i] * g[i];
      }
    }

    const std::vector<double> saved = params.values;
    double d_max = 0;
    for (double v : d) d_max = std::max(d_max, std::abs(v));
    double step = d_max > 1.0 ? 1.0 / d_max : 1.0;  // at most one unit per coordinate
    bool accepted = false;
    for (int bt = 0; bt < 30; ++bt) {
      for (int i = 0; i < n_opt; ++i) params.values[opt_idx[i]] = x[i] - step * d[i];
      for (int b = 0; b < n_b; ++b) {
        double& v = params.values[sp.beta_offset(params) + b];
        v = std::clamp(v, 0.5, 2.0);
      }
      const EnergyEval trial =
          stage_energy(prob, stage, object_proxy, contact_rest, contact_active, nullptr);
      if (trial.total <= current.total - 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      params.values = saved;
      result.converged = true;  // no descent along any remembered curvature
      break;
    }

    std::fill(grad.begin(), grad.end(), 0.0);
    const EnergyEval next =
        stage_energy(prob, stage, object_proxy, contact_rest, contact_active, &grad);
    const std::vector<double> g_new = gather(grad);
    const std::vector<double> x_new = gather(params.values);
    std::vector<double> s_vec(n_opt), y_vec(n_opt);
    double sy = 0;
    for (int i = 0; i < n_opt; ++i) {
      s_vec[i] = x_new[i] - x[i];
      y_vec[i] = g_new[i] - g[i];
      sy += s_vec[i] * y_vec[i];
    }
    if (sy > 1e-12) {
      s_hist.push_back(std::move(s_vec));
      y_hist.push_back(std::move(y_vec));
      rho_hist.push_back(1.0 / sy);
      if ((int)s_hist.size() > history) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
    }
    x = x_new;
    g = g_new;

    const double decrease = current.total - next.total;
    current = next;
    result.energies.push_back(current.total);
    result.iterations = iter + 1;
    if (decrease >= 0 && decrease < 1e-10 * std::max(1.0, std::abs(current.total))) {
      result.converged = true;
      break;
    }
  }
  result.contact = current.contact;
  result.mask = current.mask;
  result.reproj = current.reproj;
  return result;
}

}  // namespace

double refine_energy_probe(RefineProblem& problem, bool align_stage, std::vector<double>* grad) {
  StageConfig stage;
  stage.align = align_stage;
  TriMesh object_proxy = problem.object_mesh_canonical;
  std::vector<uint8_t> contact_active(problem.frames.size(), 1);
  double contact_rest = 0.0;
  const SceneParams& sp = problem.scene;
  for (size_t f = 0; f < problem.frames.size() && contact_rest == 0.0; ++f) {
    const ObjectState obj = sp.object_state(*problem.params, (int)f);
    std::vector<Vec3> targets;
    if (stage.align)
      for (const auto& p : problem.cloud_canonical) targets.push_back(apply(obj.to_world, p));
    else
      for (const auto& p : object_proxy.vertices) targets.push_back(apply(obj.to_world, p));
    if (!targets.empty()) contact_rest = rest_radius_for(targets);
  }
  if (grad) grad->assign(problem.params->size(), 0.0);
  const EnergyEval e =
      stage_energy(problem, stage, object_proxy, contact_rest, contact_active, grad);
  return e.total;
}

namespace {

// Compact L-BFGS with Armijo backtracking over an arbitrary coordinate set.
// eval(grad_or_null) returns the energy at the current parameter values.
double lbfgs_over(ParamSet& params, const std::vector<int>& idx,
                  const std::function<double(std::vector<double>*)>& eval, int iterations,
                  const std::function<void()>& project) {
  const int n = (int)idx.size();
  std::vector<double> full_grad;
  auto gather = [&](const std::vector<double>& full) {
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) out[i] = full[idx[i]];
    return out;
  };
  full_grad.clear();
  double current = eval(&full_grad);
  std::vector<double> g = gather(full_grad);
  std::vector<double> x = gather(params.values);
  std::vector<std::vector<double>> s_hist, y_hist;
  std::vector<double> rho_hist;

  for (int iter = 0; iter < iterations; ++iter) {
    double gnorm2 = 0;
    for (double v : g) gnorm2 += v * v;
    if (gnorm2 < 1e-18) break;
    std::vector<double> d = g;
    std::vector<double> alpha(s_hist.size());
    for (int k = (int)s_hist.size() - 1; k >= 0; --k) {
      double dot_sd = 0;
      for (int i = 0; i < n; ++i) dot_sd += s_hist[k][i] * d[i];
      alpha[k] = rho_hist[k] * dot_sd;
      for (int i = 0; i < n; ++i) d[i] -= alpha[k] * y_hist[k][i];
    }
    double h0 = 0.1 / std::sqrt(gnorm2);
    if (!s_hist.empty()) {
      double sy = 0, yy = 0;
      for (int i = 0; i < n; ++i) {
        sy += s_hist.back()[i] * y_hist.back()[i];
        yy += y_hist.back()[i] * y_hist.back()[i];
      }
      if (yy > 0) h0 = sy / yy;
    }
    for (auto& v : d) v *= h0;
    for (size_t k = 0; k < s_hist.size(); ++k) {
      double dot_yd = 0;
      for (int i = 0; i < n; ++i) dot_yd += y_hist[k][i] * d[i];
      const double beta_k = rho_hist[k] * dot_yd;
      for (int i = 0; i < n; ++i) d[i] += s_hist[k][i] * (alpha[k] - beta_k);
    }
    double slope = 0;
    for (int i = 0; i < n; ++i) slope += d[i] * g[i];
    if (slope <= 0) {
      s_hist.clear(); y_hist.clear(); rho_hist.clear();
      const double scale = 0.1 / std::sqrt(gnorm2);
      slope = 0;
      for (int i = 0; i < n; ++i) {
        d[i] = g[i] * scale;
        slope += d[i] * g[i];
      }
    }
    double d_max = 0;
    for (double v : d) d_max = std::max(d_max, std::abs(v));
    double step = d_max > 1.0 ? 1.0 / d_max : 1.0;
    const std::vector<double> saved = params.values;
    bool accepted = false;
    double trial = current;
    for (int bt = 0; bt < 30; ++bt) {
      for (int i = 0; i < n; ++i) params.values[idx[i]] = x[i] - step * d[i];
      if (project) project();
      trial = eval(nullptr);
      if (trial <= current - 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      params.values = saved;
      break;
    }
    full_grad.clear();
    const double next = eval(&full_grad);
    const std::vector<double> g_new = gather(full_grad);
    const std::vector<double> x_new = gather(params.values);
    std::vector<double> s_vec(n), y_vec(n);
    double sy = 0;
    for (int i = 0; i < n; ++i) {
      s_vec[i] = x_new[i] - x[i];
      y_vec[i] = g_new[i] - g[i];
      sy += s_vec[i] * y_vec[i];
    }
    if (sy > 1e-12) {
      s_hist.push_back(std::move(s_vec));
      y_hist.push_back(std::move(y_vec));
      rho_hist.push_back(1.0 / sy);
      if (s_hist.size() > 8) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
    }
    x = x_new;
    g = g_new;
    const double decrease = current - next;
    current = next;
    if (decrease >= 0 && decrease < 1e-10 * std::max(1.0, std::abs(current))) break;
  }
  return current;
}

// Independent per-frame pose solves; valid while the shared globals stay
// fixed. Runs frames in parallel.
void solve_frames_independently(RefineProblem& prob, const StageConfig& stage,
                                const TriMesh& object_proxy, double contact_rest,
                                const std::vector<uint8_t>& contact_active, int iterations) {
  const SceneParams& sp = prob.scene;
  ParamSet& params = *prob.params;
  const int n_frames = (int)prob.frames.size();
  int workers = (int)std::thread::hardware_concurrency();
  if (const char* env = std::getenv("HOLDFIELD_THREADS")) workers = std::max(1, atoi(env));
  workers = std::clamp(workers, 1, std::max(1, n_frames));
  std::atomic<int> next{0};
  auto solve_one = [&](int f) {
    std::vector<int> idx;
    for (int i = 0; i < 3; ++i) {
      if (prob.hand_enabled) idx.push_back(sp.t_h_offset(params, f) + i);
      idx.push_back(sp.t_o_offset(params, f) + i);
      if (!stage.align) {
        if (prob.hand_enabled) idx.push_back(sp.rot_h_offset(params, f) + i);
        idx.push_back(sp.rot_o_offset(params, f) + i);
      }
    }
    auto eval = [&](std::vector<double>* grad) -> double {
      std::vector<double> g;
      if (grad) g.assign(params.size(), 0.0);
      const FrameEnergy fe = frame_energy(prob, stage, f, object_proxy, contact_rest,
                                          contact_active[f] != 0, grad ? &g : nullptr);
      if (grad) *grad = std::move(g);
      return prob.w_contact * fe.contact + prob.w_mask * fe.mask + prob.w_reproj * fe.reproj;
    };
    lbfgs_over(params, idx, eval, iterations, nullptr);
  };
  auto run = [&]() {
    int f;
    while ((f = next.fetch_add(1)) < n_frames) solve_one(f);
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
}

}  // namespace

RefineResult align_init(RefineProblem& problem) {
  // Joint pass first: the global scale must settle against contact and the
  // 2D evidence before per-frame translations are polished independently,
  // otherwise per-frame depth shifts absorb the scale error.
  StageConfig joint;
  joint.align = true;
  const int total = problem.max_iterations;
  problem.max_iterations = std::max((2 * total) / 3, 10);
  RefineResult out = run_stage(problem, joint);
  problem.max_iterations = total;

  StageConfig per_frame;
  per_frame.align = true;
  per_frame.freeze_globals = true;
  {
    const SceneParams& sp = problem.scene;
    std::vector<uint8_t> contact_active(problem.frames.size(), 1);
    double contact_rest = 0.0;
    for (size_t f = 0; f < problem.frames.size() && contact_rest == 0.0; ++f) {
      const ObjectState obj = sp.object_state(*problem.params, (int)f);
      std::vector<Vec3> targets;
      for (const auto& p : problem.cloud_canonical) targets.push_back(apply(obj.to_world, p));
      if (!targets.empty()) contact_rest = rest_radius_for(targets);
    }
    solve_frames_independently(problem, per_frame, TriMesh{}, contact_rest, contact_active,
                               total / 3);
  }
  out.iterations += total / 3;
  return out;
}

RefineResult refine_poses(RefineProblem& problem) {
  // Phase one: per-frame pose solves with the global scale and shape frozen,
  // which removes the depth/scale gauge freedom and decouples the frames.
  StageConfig fixed_gauge;
  fixed_gauge.align = false;
  fixed_gauge.freeze_globals = true;
  {
    TriMesh object_proxy = problem.object_mesh_canonical;
    if (!object_proxy.empty()) {
      double lo = 1e30, hi = -1e30;
      for (const auto& v : object_proxy.vertices) {
        lo = std::min({lo, v.x, v.y, v.z});
        hi = std::max({hi, v.x, v.y, v.z});
      }
      double cell = (hi - lo) / 16.0;
      while ((int)object_proxy.faces.size() > 600 && cell < (hi - lo)) {
        object_proxy = cluster_decimate(problem.object_mesh_canonical, cell);
        cell *= 1.4;
      }
    }
    const SceneParams& sp = problem.scene;
    std::vector<uint8_t> contact_active(problem.frames.size(), 1);
    double contact_rest = 0.0;
    for (size_t f = 0; f < problem.frames.size(); ++f) {
      const ObjectState obj = sp.object_state(*problem.params, (int)f);
      std::vector<Vec3> targets;
      for (const auto& p : object_proxy.vertices) targets.push_back(apply(obj.to_world, p));
      if (targets.empty()) {
        contact_active[f] = 0;
        continue;
      }
      if (contact_rest == 0.0) contact_rest = rest_radius_for(targets);
      if (problem.hand_enabled) {
        const PosedHand posed =
            pose_hand(*problem.skeleton, sp.hand_state(*problem.params, (int)f));
        const KdTree tree(targets);
        double best = 1e30;
        for (int tip : problem.contact.tip_vertex_ids) {
          double d2;
          tree.nearest(posed.mesh.vertices[tip], &d2);
          best = std::min(best, std::sqrt(d2));
        }
        contact_active[f] = best < problem.contact_gate ? 1 : 0;
      } else {
        contact_active[f] = 0;
      }
    }
    solve_frames_independently(problem, fixed_gauge, object_proxy, contact_rest, contact_active,
                               (2 * problem.max_iterations) / 3);
  }

  // Phase two: joint polish over everything including scale and shape.
  StageConfig full;
  full.align = false;
  const int total = problem.max_iterations;
  problem.max_iterations = std::max(total / 3, 10);
  RefineResult out = run_stage(problem, full);
  problem.max_iterations = total;
  out.iterations += (2 * total) / 3;
  return out;
}

}  // namespace holdfield

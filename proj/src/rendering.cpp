#include "holdfield/rendering.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>
#include <thread>

namespace holdfield {

// ---------------------------------------------------------------------------
// sample_ray
// ---------------------------------------------------------------------------

std::vector<double> sample_ray(const Ray& ray, const std::function<double(double)>& sigma_at,
                               const SamplerConfig& config, double phase, uint64_t seed) {
  const int n = config.count;
  const double span = ray.far - ray.near;
  std::vector<double> depths;
  depths.reserve(n);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto stratum = [&](int i, int total) {
    const double jitter = config.jitter ? uni(rng) : phase;
    return ray.near + span * (i + jitter) / total;
  };

  if (config.mode == SamplerMode::Stratified) {
    for (int i = 0; i < n; ++i) depths.push_back(stratum(i, n));
    return depths;
  }

  const int init = std::min(config.init_count, n);
  for (int i = 0; i < init; ++i) depths.push_back(stratum(i, init));
  std::vector<double> sigma(depths.size());
  for (size_t i = 0; i < depths.size(); ++i) sigma[i] = sigma_at(depths[i]);

  const int remaining = n - (int)depths.size();
  const int per_round = remaining > 0 ? (remaining + config.rounds - 1) / config.rounds : 0;
  for (int round = 0; round < config.rounds && (int)depths.size() < n; ++round) {
    const int budget = std::min(per_round, n - (int)depths.size());
    // Score each gap: opacity-error bound = sigma variation x length.
    struct Gap {
      double score, width;
      int index;
    };
    std::vector<Gap> gaps;
    for (size_t i = 0; i + 1 < depths.size(); ++i) {
      const double width = depths[i + 1] - depths[i];
      gaps.push_back({std::abs(sigma[i + 1] - sigma[i]) * width, width, (int)i});
    }
    std::sort(gaps.begin(), gaps.end(), [](const Gap& a, const Gap& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.width != b.width) return a.width > b.width;
      return a.index < b.index;
    });
    std::vector<double> new_depths;
    for (int k = 0; k < budget && k < (int)gaps.size(); ++k)
      new_depths.push_back(0.5 * (depths[gaps[k].index] + depths[gaps[k].index + 1]));
    for (double t : new_depths) {
      const auto it = std::upper_bound(depths.begin(), depths.end(), t);
      const size_t pos = it - depths.begin();
      depths.insert(it, t);
      sigma.insert(sigma.begin() + pos, sigma_at(t));
    }
  }
  // Top up on widest gaps if the rounds under-filled.
  while ((int)depths.size() < n) {
    size_t widest = 0;
    for (size_t i = 0; i + 1 < depths.size(); ++i)
      if (depths[i + 1] - depths[i] > depths[widest + 1] - depths[widest]) widest = i;
    const double t = 0.5 * (depths[widest] + depths[widest + 1]);
    depths.insert(depths.begin() + widest + 1, t);
    sigma.insert(sigma.begin() + widest + 1, sigma_at(t));
  }
  // Enforce strict monotonicity against duplicate insertions.
  for (size_t i = 1; i < depths.size(); ++i)
    if (depths[i] <= depths[i - 1])
      depths[i] = std::nextafter(depths[i - 1], std::numeric_limits<double>::infinity());
  return depths;
}

// ---------------------------------------------------------------------------
// render_pixel (plain path)
// ---------------------------------------------------------------------------

namespace {

EntitySamples<double> gather_entity(const RenderScene& scene, const Ray& ray, int entity,
                                    const EntityField& field, double near, double far,
                                    double phase, uint64_t seed) {
  EntitySamples<double> out;
  out.entity = entity;
  Ray bounded = ray;
  bounded.near = near;
  bounded.far = far;
  auto sigma_at = [&](double t) {
    const FieldSample s = field.eval(ray.at(t));
    return sdf_to_density(s.d, scene.density.alpha1, scene.density.alpha2);
  };
  out.t = sample_ray(bounded, sigma_at, scene.sampler, phase, seed);
  out.sigma.reserve(out.t.size());
  out.color.reserve(out.t.size());
  for (double t : out.t) {
    const FieldSample s = field.eval(ray.at(t));
    out.sigma.push_back(sdf_to_density(s.d, scene.density.alpha1, scene.density.alpha2));
    out.color.push_back({s.c.x, s.c.y, s.c.z});
  }
  return out;
}

}  // namespace

RenderOutput render_pixel(const RenderScene& scene, const Ray& pixel_ray, RaySamples* dump,
                          uint64_t sample_seed) {
  RenderOutput out;
  const int dropped_before = scene.drop_counter->load();

  double t0 = 0, t1 = -1;
  const bool hits_fg = intersect_sphere(pixel_ray, scene.fg_center, scene.r_bg, t0, t1) &&
                       t1 > pixel_ray.near;
  const double fg_near = hits_fg ? std::max(t0, pixel_ray.near) : 0.0;
  const double fg_far = hits_fg ? t1 : 0.0;

  std::vector<EntitySamples<double>> fg_lists;
  if (hits_fg) {
    if (scene.hand)
      fg_lists.push_back(gather_entity(scene, pixel_ray, 0, *scene.hand, fg_near, fg_far,
                                       1.0 / 3.0, sample_seed * 2 + 1));
    if (scene.object)
      fg_lists.push_back(gather_entity(scene, pixel_ray, 1, *scene.object, fg_near, fg_far,
                                       2.0 / 3.0, sample_seed * 2 + 2));
  }

  std::vector<const EntitySamples<double>*> refs;
  for (const auto& l : fg_lists) refs.push_back(&l);
  CompositeResult<double> fg{{0, 0, 0}, 0, {0, 0, 0}, {0, 0, 0}, 0, 1};
  if (!refs.empty()) fg = composite<double>(refs, fg_far);

  if (dump) {
    struct Ref {
      double t;
      int list, idx;
    };
    std::vector<Ref> merged;
    for (int li = 0; li < (int)fg_lists.size(); ++li)
      for (int i = 0; i < (int)fg_lists[li].t.size(); ++i)
        merged.push_back({fg_lists[li].t[i], li, i});
    std::stable_sort(merged.begin(), merged.end(),
                     [](const Ref& a, const Ref& b) { return a.t < b.t; });
    for (size_t i = 0; i < merged.size(); ++i) {
      dump->t.push_back(merged[i].t);
      dump->sigma.push_back(fg_lists[merged[i].list].sigma[merged[i].idx]);
      dump->delta.push_back(
          std::max((i + 1 < merged.size() ? merged[i + 1].t : fg_far) - merged[i].t, 1e-9));
      dump->entity.push_back(fg_lists[merged[i].list].entity);
    }
  }

  // Background: from the sphere exit out to 10 R_bg, opaque terminal sample.
  Vec3 bg_color{0, 0, 0};
  double bg_mass = 0.0;
  double bg_depth = 0.0;
  if (scene.background) {
    const double bg_near = hits_fg ? t1 : pixel_ray.near;
    const double bg_far = 10.0 * scene.r_bg;
    EntitySamples<double> bg;
    bg.entity = 2;
    if (bg_far > bg_near) {
      const int nb = std::max(scene.sampler.background_count, 2);
      for (int i = 0; i < nb; ++i)
        bg.t.push_back(bg_near + (bg_far - bg_near) * (i + 0.5) / nb);
      for (double t : bg.t) {
        const FieldSample s = scene.background->eval(pixel_ray.at(t), pixel_ray.direction);
        bg.sigma.push_back(sdf_to_density(s.d, scene.density.alpha1, scene.density.alpha2));
        bg.color.push_back({s.c.x, s.c.y, s.c.z});
      }
      // Terminal opaque sample pinned at the far sphere.
      const double delta_last = std::max((bg_far - bg_near) / nb, 1e-9);
      bg.t.push_back(bg_far);
      bg.sigma.push_back(kOpaqueBackgroundSigmaDelta / delta_last);
      const FieldSample s = scene.background->eval(
          pixel_ray.at(bg_far - 1e-9), pixel_ray.direction);
      bg.color.push_back({s.c.x, s.c.y, s.c.z});
      std::vector<const EntitySamples<double>*> bg_refs{&bg};
      const CompositeResult<double> bgres = composite<double>(bg_refs, bg_far + delta_last);
      bg_color = {bgres.color[0], bgres.color[1], bgres.color[2]};
      bg_mass = bgres.weight_sum;
      bg_depth = bgres.depth;
    }
  }

  out.fg_color = {fg.color[0], fg.color[1], fg.color[2]};
  out.m_f = fg.weight_sum;
  const double bg_visibility = 1.0 - out.m_f;
  out.color = out.fg_color + bg_color * bg_visibility;
  if (scene.amodal == AmodalMode::Independent) {
    out.m_h = fg.independent[0];
    out.m_o = fg.independent[1];
  } else {
    out.m_h = fg.per_entity[0];
    out.m_o = fg.per_entity[1];
  }
  out.class_probs = {fg.per_entity[0], fg.per_entity[1], bg_visibility * bg_mass};
  out.depth = fg.depth + bg_visibility * bg_depth;
  out.dropped_samples = scene.drop_counter->load() - dropped_before;
  return out;
}

ImageChannels render_image(const RenderScene& scene, const Camera& camera,
                           const std::vector<int>* pixels, int workers) {
  ImageChannels img;
  img.width = camera.width;
  img.height = camera.height;
  std::vector<int> all;
  if (!pixels) {
    all.resize((size_t)camera.width * camera.height);
    for (size_t i = 0; i < all.size(); ++i) all[i] = (int)i;
    pixels = &all;
  }
  const size_t n = pixels->size();
  img.color.resize(n);
  img.m_f.resize(n);
  img.m_h.resize(n);
  img.m_o.resize(n);
  img.depth.resize(n);
  img.class_probs.resize(n);

  if (workers <= 0) {
    workers = (int)std::thread::hardware_concurrency();
    if (const char* env = std::getenv("HOLDFIELD_THREADS")) workers = std::max(1, atoi(env));
  }
  workers = std::max(1, std::min<int>(workers, (int)n));

  const int dropped_before = scene.drop_counter->load();
  std::atomic<size_t> cursor{0};
  auto worker_fn = [&]() {
    while (true) {
      const size_t chunk = 64;
      const size_t begin = cursor.fetch_add(chunk);
      if (begin >= n) break;
      const size_t end = std::min(begin + chunk, n);
      for (size_t i = begin; i < end; ++i) {
        const int pix = (*pixels)[i];
        const Pixel px{pix % camera.width + 0.5, pix / camera.width + 0.5};
        const Ray ray = cast_ray(camera, px);
        const RenderOutput ro = render_pixel(scene, ray, nullptr, (uint64_t)pix);
        img.color[i] = ro.color;
        img.m_f[i] = ro.m_f;
        img.m_h[i] = ro.m_h;
        img.m_o[i] = ro.m_o;
        img.depth[i] = ro.depth;
        img.class_probs[i] = ro.class_probs;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(worker_fn);
  worker_fn();
  for (auto& t : pool) t.join();
  img.dropped_samples = scene.drop_counter->load() - dropped_before;
  return img;
}

// ---------------------------------------------------------------------------
// neural scene binding
// ---------------------------------------------------------------------------

RenderScene bind_neural_scene(const NeuralScene& neural, const SamplerConfig& sampler,
                              AmodalMode amodal) {
  RenderScene scene;
  scene.sampler = sampler;
  scene.density = neural.density;
  scene.r_bg = neural.r_bg;
  scene.amodal = amodal;

  if (neural.hand_enabled && neural.posed) {
    const NeuralScene n = neural;  // copy of PODs and pointers
    auto drops = scene.drop_counter;
    scene.hand = EntityField{[n, drops](const Vec3& x) -> FieldSample {
      try {
        const Vec3 canonical = inverse_lbs(*n.posed, x);
        return eval_hand(n.f_h, *n.params, canonical);
      } catch (const SingularBlend&) {
        ++*drops;
        return FieldSample{1e3, {0, 0, 0}};
      }
    }};
  }
  {
    const NeuralScene n = neural;
    scene.object = EntityField{[n](const Vec3& x) -> FieldSample {
      const Vec3 canonical = inverse_apply(n.object.to_world, x);
      return eval_object(n.f_o, *n.params, canonical, n.object.latent.data());
    }};
  }
  {
    const NeuralScene n = neural;
    scene.background = BackgroundFieldFn{[n](const Vec3& x, const Vec3& v) -> FieldSample {
      return eval_background(n.f_b, *n.params, x, v, n.z_background.data(), n.r_bg);
    }};
  }
  return scene;
}

// ---------------------------------------------------------------------------
// tape-path rigid building blocks
// ---------------------------------------------------------------------------

namespace {

// sin(theta)/theta and (1 - cos(theta))/theta^2 as smooth functions of
// u = theta^2, stable through zero.
Var rot_coeff_a(Var u) {
  const double uv = scalar_value(u);
  if (uv < 1e-12) return u.tape->unary(1.0 - uv / 6.0, u, -1.0 / 6.0);
  const double th = std::sqrt(uv);
  const double val = std::sin(th) / th;
  const double d = (th * std::cos(th) - std::sin(th)) / (2.0 * uv * th);
  return u.tape->unary(val, u, d);
}
Var rot_coeff_b(Var u) {
  const double uv = scalar_value(u);
  if (uv < 1e-12) return u.tape->unary(0.5 - uv / 24.0, u, -1.0 / 24.0);
  const double th = std::sqrt(uv);
  const double val = (1.0 - std::cos(th)) / uv;
  const double d = (th * std::sin(th) - 2.0 * (1.0 - std::cos(th))) / (2.0 * uv * uv);
  return u.tape->unary(val, u, d);
}

}  // namespace

TapeRigid tape_rigid_from_params(Tape& tape, Var ax, Var ay, Var az, Var tx, Var ty, Var tz) {
  const Var u = ax * ax + ay * ay + az * az;
  const Var a = rot_coeff_a(u);
  const Var b = rot_coeff_b(u);
  TapeRigid out;
  out.r[0] = 1.0 + b * (ax * ax - u);
  out.r[1] = b * (ax * ay) - a * az;
  out.r[2] = b * (ax * az) + a * ay;
  out.r[3] = b * (ax * ay) + a * az;
  out.r[4] = 1.0 + b * (ay * ay - u);
  out.r[5] = b * (ay * az) - a * ax;
  out.r[6] = b * (ax * az) - a * ay;
  out.r[7] = b * (ay * az) + a * ax;
  out.r[8] = 1.0 + b * (az * az - u);
  out.t[0] = tx;
  out.t[1] = ty;
  out.t[2] = tz;
  return out;
}

TapeRigid tape_compose(const TapeRigid& outer, const TapeRigid& inner) {
  TapeRigid out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      out.r[3 * i + j] = outer.r[3 * i + 0] * inner.r[0 + j] +
                         outer.r[3 * i + 1] * inner.r[3 + j] +
                         outer.r[3 * i + 2] * inner.r[6 + j];
  for (int i = 0; i < 3; ++i)
    out.t[i] = outer.r[3 * i + 0] * inner.t[0] + outer.r[3 * i + 1] * inner.t[1] +
               outer.r[3 * i + 2] * inner.t[2] + outer.t[i];
  return out;
}

std::vector<std::array<Var, 3>> tape_joint_positions(Tape& tape, const Skeleton& sk,
                                                     std::span<const Var> beta) {
  const int n = sk.bone_count();
  std::vector<std::array<Var, 3>> joints(n);
  for (int i = 0; i < n; ++i) {
    const Vec3 off = sk.bones()[i].rest_offset;
    for (int c = 0; c < 3; ++c) {
      const Var scaled = beta[i] * off[c];
      joints[i][c] =
          sk.bones()[i].parent < 0 ? scaled : joints[sk.bones()[i].parent][c] + scaled;
    }
  }
  return joints;
}

std::vector<TapeRigid> tape_forward_kinematics(Tape& tape, const Skeleton& sk,
                                               std::span<const Var> theta,
                                               std::span<const Var> beta, const TapeRigid& root,
                                               std::vector<std::array<Var, 3>>* joints_out) {
  const int n = sk.bone_count();
  auto joints = tape_joint_positions(tape, sk, beta);
  std::vector<TapeRigid> out(n);
  for (int i = 0; i < n; ++i) {
    const Var zero = tape.constant(0.0);
    TapeRigid local = tape_rigid_from_params(tape, theta[3 * i + 0], theta[3 * i + 1],
                                             theta[3 * i + 2], zero, zero, zero);
    // translation = j - R j keeps the joint fixed under its own rotation.
    for (int r = 0; r < 3; ++r)
      local.t[r] = joints[i][r] - (local.r[3 * r + 0] * joints[i][0] +
                                   local.r[3 * r + 1] * joints[i][1] +
                                   local.r[3 * r + 2] * joints[i][2]);
    const TapeRigid& parent = sk.bones()[i].parent < 0 ? root : out[sk.bones()[i].parent];
    out[i] = tape_compose(parent, local);
  }
  if (joints_out) *joints_out = std::move(joints);
  return out;
}

namespace {

struct BlendInverseNode : FatNode {
  std::vector<int> bone_ids;  // 12 per bone: r0..r8, t0..t2
  std::vector<double> weights;
  Vec3 x_obs;
  double a_inv[9];
  double y[3];
  int out_y[3] = {-1, -1, -1};

  void backward(Tape& tape) override {
    const double gy[3] = {tape.adj(out_y[0]), tape.adj(out_y[1]), tape.adj(out_y[2])};
    // g = A^-T gy
    double g[3];
    for (int i = 0; i < 3; ++i)
      g[i] = a_inv[0 + i] * gy[0] + a_inv[3 + i] * gy[1] + a_inv[6 + i] * gy[2];
    for (size_t b = 0; b < weights.size(); ++b) {
      const double w = weights[b];
      if (w == 0.0) continue;
      const int* ids = bone_ids.data() + 12 * b;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) tape.add_adj(ids[3 * i + j], -w * g[i] * y[j]);
      for (int i = 0; i < 3; ++i) tape.add_adj(ids[9 + i], -w * g[i]);
    }
  }
};

}  // namespace

std::array<Var, 3> tape_blend_inverse(Tape& tape, std::span<const TapeRigid> bones,
                                      const std::vector<double>& weights, const Vec3& x_obs) {
  auto node = std::make_unique<BlendInverseNode>();
  node->weights = weights;
  node->x_obs = x_obs;
  double a[9] = {0}, b[3] = {0};
  for (size_t bi = 0; bi < bones.size(); ++bi) {
    const double w = weights[bi];
    for (int k = 0; k < 9; ++k) {
      node->bone_ids.push_back(bones[bi].r[k].id);
      a[k] += w * bones[bi].r[k].value();
    }
    for (int k = 0; k < 3; ++k) {
      node->bone_ids.push_back(bones[bi].t[k].id);
      b[k] += w * bones[bi].t[k].value();
    }
  }
  const double det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
                     a[2] * (a[3] * a[7] - a[4] * a[6]);
  if (std::abs(det) < 1e-12) throw SingularBlend();
  const double inv_det = 1.0 / det;
  node->a_inv[0] = (a[4] * a[8] - a[5] * a[7]) * inv_det;
  node->a_inv[1] = (a[2] * a[7] - a[1] * a[8]) * inv_det;
  node->a_inv[2] = (a[1] * a[5] - a[2] * a[4]) * inv_det;
  node->a_inv[3] = (a[5] * a[6] - a[3] * a[8]) * inv_det;
  node->a_inv[4] = (a[0] * a[8] - a[2] * a[6]) * inv_det;
  node->a_inv[5] = (a[2] * a[3] - a[0] * a[5]) * inv_det;
  node->a_inv[6] = (a[3] * a[7] - a[4] * a[6]) * inv_det;
  node->a_inv[7] = (a[1] * a[6] - a[0] * a[7]) * inv_det;
  node->a_inv[8] = (a[0] * a[4] - a[1] * a[3]) * inv_det;
  const double u[3] = {x_obs.x - b[0], x_obs.y - b[1], x_obs.z - b[2]};
  for (int i = 0; i < 3; ++i)
    node->y[i] = node->a_inv[3 * i + 0] * u[0] + node->a_inv[3 * i + 1] * u[1] +
                 node->a_inv[3 * i + 2] * u[2];

  BlendInverseNode* raw = node.get();
  tape.push_fat(std::move(node));
  std::array<Var, 3> out;
  for (int i = 0; i < 3; ++i) {
    out[i] = tape.fat_output(raw->y[i]);
    raw->out_y[i] = out[i].id;
  }
  return out;
}

std::array<Var, 3> tape_rigid_inverse_apply(Tape& tape, const TapeRigid& rot_trans, Var scale,
                                            const Vec3& x_obs) {
  const Var inv_s = 1.0 / scale;
  Var d[3];
  for (int i = 0; i < 3; ++i) d[i] = tape.constant(x_obs[i]) - rot_trans.t[i];
  std::array<Var, 3> out;
  for (int i = 0; i < 3; ++i)
    out[i] = (rot_trans.r[0 + i] * d[0] + rot_trans.r[3 + i] * d[1] + rot_trans.r[6 + i] * d[2]) *
             inv_s;
  return out;
}

}  // namespace holdfield

#include "holdfield/losses.hpp"

#include <random>

namespace holdfield {

FarRaySets build_far_ray_sets(std::span<const Ray> rays, const MeshBvh* hand_mesh,
                              const MeshBvh* object_mesh, double tau_far) {
  FarRaySets out;
  for (size_t i = 0; i < rays.size(); ++i) {
    const Vec3 a = rays[i].at(rays[i].near);
    const Vec3 b = rays[i].at(rays[i].far);
    if (hand_mesh && !hand_mesh->empty() && hand_mesh->segment_distance(a, b) > tau_far)
      out.far_hand.push_back((int)i);
    if (object_mesh && !object_mesh->empty() && object_mesh->segment_distance(a, b) > tau_far)
      out.far_object.push_back((int)i);
  }
  return out;
}

std::vector<Vec3> sample_prior_points(int count, const Vec3& box_lo, const Vec3& box_hi,
                                      const TriMesh* shell_surface, double shell_sigma,
                                      uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Vec3> out;
  out.reserve(count);
  const int n_shell = shell_surface && !shell_surface->empty() ? count / 2 : 0;
  const int n_box = count - n_shell;
  for (int i = 0; i < n_box; ++i)
    out.push_back({box_lo.x + uni(rng) * (box_hi.x - box_lo.x),
                   box_lo.y + uni(rng) * (box_hi.y - box_lo.y),
                   box_lo.z + uni(rng) * (box_hi.z - box_lo.z)});
  if (n_shell > 0) {
    const auto surface = sample_surface(*shell_surface, n_shell, seed ^ 0x51ed2700e116ull);
    for (const Vec3& s : surface)
      out.push_back(s + Vec3{gauss(rng), gauss(rng), gauss(rng)} * shell_sigma);
  }
  return out;
}

double loss_sdf(const TrainableField& f, const ParamSet& params, const Skeleton& sk,
                std::span<const Vec3> points) {
  double acc = 0;
  for (const Vec3& x : points) acc += std::abs(eval_hand(f, params, x).d - sk.template_sdf(x));
  return acc / (double)points.size();
}

Var loss_sdf_tape(Tape& tape, const TrainableField& f, const Skeleton& sk,
                  std::span<const Vec3> points) {
  Var acc = tape.constant(0.0);
  for (const Vec3& x : points) {
    const Var xs[3] = {tape.constant(x.x), tape.constant(x.y), tape.constant(x.z)};
    const TapeFieldSample s = eval_mlp_tape(tape, f.arch, f.offset, xs, {}, {});
    acc = acc + abs(s.d - sk.template_sdf(x));
  }
  return acc / (double)points.size();
}

double loss_eikonal(const TrainableField& f, const ParamSet& params,
                    std::span<const Vec3> points) {
  double acc = 0;
  for (const Vec3& x : points) {
    const double in[3] = {x.x, x.y, x.z};
    double g[3];
    eval_mlp_distance_grad(f.arch, params.values.data() + f.offset, in, g);
    const double gn = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
    acc += (gn - 1.0) * (gn - 1.0);
  }
  return acc / (double)points.size();
}

Var loss_eikonal_tape(Tape& tape, const TrainableField& f, std::span<const Vec3> points) {
  Var acc = tape.constant(0.0);
  for (const Vec3& x : points) {
    const Var xs[3] = {tape.constant(x.x), tape.constant(x.y), tape.constant(x.z)};
    const TapeDistGrad dg = eval_mlp_distance_grad_tape(tape, f.arch, f.offset, xs);
    const Var gn = sqrt(dg.g[0] * dg.g[0] + dg.g[1] * dg.g[1] + dg.g[2] * dg.g[2] + 1e-18);
    const Var r = gn - 1.0;
    acc = acc + r * r;
  }
  return acc / (double)points.size();
}

}  // namespace holdfield

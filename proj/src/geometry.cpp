#include "holdfield/geometry.hpp"

#include <algorithm>

namespace holdfield {

Mat3 rotation_from_axis_angle(const Vec3& aa) {
  const double theta2 = norm2(aa);
  Mat3 r;
  if (theta2 < 1e-24) {
    // First-order expansion keeps the map smooth through zero.
    r(0, 1) = -aa.z; r(0, 2) = aa.y;
    r(1, 0) = aa.z;  r(1, 2) = -aa.x;
    r(2, 0) = -aa.y; r(2, 1) = aa.x;
    return r;
  }
  const double theta = std::sqrt(theta2);
  const Vec3 n = aa / theta;
  const double c = std::cos(theta), s = std::sin(theta), ic = 1.0 - c;
  r(0, 0) = c + n.x * n.x * ic;
  r(0, 1) = n.x * n.y * ic - n.z * s;
  r(0, 2) = n.x * n.z * ic + n.y * s;
  r(1, 0) = n.y * n.x * ic + n.z * s;
  r(1, 1) = c + n.y * n.y * ic;
  r(1, 2) = n.y * n.z * ic - n.x * s;
  r(2, 0) = n.z * n.x * ic - n.y * s;
  r(2, 1) = n.z * n.y * ic + n.x * s;
  r(2, 2) = c + n.z * n.z * ic;
  return r;
}

Vec3 axis_angle_from_rotation(const Mat3& r) {
  const double tr = r(0, 0) + r(1, 1) + r(2, 2);
  const double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
  const double theta = std::acos(c);
  if (theta < 1e-12) return {0, 0, 0};
  if (theta > M_PI - 1e-6) {
    // Near-pi: extract the axis from the symmetric part R + I.
    Vec3 axis;
    double xx = (r(0, 0) + 1.0) / 2.0, yy = (r(1, 1) + 1.0) / 2.0, zz = (r(2, 2) + 1.0) / 2.0;
    xx = std::max(xx, 0.0); yy = std::max(yy, 0.0); zz = std::max(zz, 0.0);
    if (xx >= yy && xx >= zz) {
      axis.x = std::sqrt(xx);
      axis.y = (r(0, 1) + r(1, 0)) / (4.0 * axis.x);
      axis.z = (r(0, 2) + r(2, 0)) / (4.0 * axis.x);
    } else if (yy >= zz) {
      axis.y = std::sqrt(yy);
      axis.x = (r(0, 1) + r(1, 0)) / (4.0 * axis.y);
      axis.z = (r(1, 2) + r(2, 1)) / (4.0 * axis.y);
    } else {
      axis.z = std::sqrt(zz);
      axis.x = (r(0, 2) + r(2, 0)) / (4.0 * axis.z);
      axis.y = (r(1, 2) + r(2, 1)) / (4.0 * axis.z);
    }
    return normalized(axis) * theta;
  }
  const double s = 2.0 * std::sin(theta);
  Vec3 axis{(r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
  return axis * theta;
}

bool ScaledRigid::valid(double tol) const {
  if (!(scale > 0.0) || !std::isfinite(scale) || !finite(translation)) return false;
  const Mat3 rtr = rotation.transposed() * rotation;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double want = (i == j) ? 1.0 : 0.0;
      if (std::abs(rtr(i, j) - want) > tol) return false;
    }
  return std::abs(rotation.det() - 1.0) <= tol;
}

ScaledRigid ScaledRigid::inverse() const {
  ScaledRigid inv;
  inv.rotation = rotation.transposed();
  inv.scale = 1.0 / scale;
  inv.translation = inv.rotation * translation * (-inv.scale);
  return inv;
}

ScaledRigid ScaledRigid::compose(const ScaledRigid& inner) const {
  ScaledRigid out;
  out.rotation = rotation * inner.rotation;
  out.scale = scale * inner.scale;
  out.translation = apply(*this, inner.translation);
  return out;
}

Vec3 apply(const ScaledRigid& t, const Vec3& p) {
  return t.rotation * p * t.scale + t.translation;
}

Vec3 inverse_apply(const ScaledRigid& t, const Vec3& p_obs) {
  return t.rotation.transposed() * (p_obs - t.translation) / t.scale;
}

bool Camera::valid() const {
  return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 && cx < width && cy >= 0 &&
         cy < height && cam_to_world.valid(1e-9) && std::abs(cam_to_world.scale - 1.0) < 1e-12;
}

Pixel project(const Camera& cam, const Vec3& p_world) {
  const Vec3 pc = inverse_apply(cam.cam_to_world, p_world);
  if (pc.z <= 0.0) throw BehindCamera();
  return {cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy};
}

Ray cast_ray(const Camera& cam, const Pixel& px, double near, double far) {
  if (px.u < 0 || px.u >= cam.width || px.v < 0 || px.v >= cam.height)
    throw OutOfBounds("pixel (" + std::to_string(px.u) + "," + std::to_string(px.v) +
                      ") outside " + std::to_string(cam.width) + "x" + std::to_string(cam.height));
  const Vec3 dir_cam{(px.u - cam.cx) / cam.fx, (px.v - cam.cy) / cam.fy, 1.0};
  Ray ray;
  ray.origin = cam.center();
  ray.direction = normalized(cam.cam_to_world.rotation * dir_cam);
  ray.near = near;
  ray.far = far;
  return ray;
}

bool intersect_sphere(const Ray& ray, const Vec3& center, double radius, double& t0, double& t1) {
  const Vec3 oc = ray.origin - center;
  const double b = dot(oc, ray.direction);
  const double c = norm2(oc) - radius * radius;
  const double disc = b * b - c;
  if (disc < 0.0) return false;
  const double sq = std::sqrt(disc);
  t0 = -b - sq;
  t1 = -b + sq;
  return true;
}

}  // namespace holdfield

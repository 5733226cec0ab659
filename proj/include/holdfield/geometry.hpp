#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

// Core spatial types shared by all modules. Conventions, stated once:
// right-handed coordinates, cameras look down +z, 1 scene unit = 1 cm.

namespace holdfield {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct BehindCamera : Error {
  explicit BehindCamera(const std::string& msg = "point behind camera") : Error(msg) {}
};
struct OutOfBounds : Error {
  explicit OutOfBounds(const std::string& msg = "pixel outside image") : Error(msg) {}
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }
inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm2(const Vec3& v) { return dot(v, v); }
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline Vec3 normalized(const Vec3& v) { return v / norm(v); }
inline bool finite(const Vec3& v) {
  return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
}

// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return Mat3{}; }

  double operator()(int r, int c) const { return m[3 * r + c]; }
  double& operator()(int r, int c) { return m[3 * r + c]; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

// Rodrigues formula; zero vector maps to the identity.
Mat3 rotation_from_axis_angle(const Vec3& axis_angle);
// Inverse of rotation_from_axis_angle, angle in [0, pi].
Vec3 axis_angle_from_rotation(const Mat3& r);

// x' = scale * R * x + t. Rotation stored orthonormal; the optimizer-facing
// parametrization is axis-angle, converted on read.
struct ScaledRigid {
  Mat3 rotation;
  Vec3 translation;
  double scale = 1.0;

  static ScaledRigid identity() { return {}; }

  bool valid(double tol = 1e-9) const;
  ScaledRigid inverse() const;
  ScaledRigid compose(const ScaledRigid& inner) const;  // this ∘ inner
};

Vec3 apply(const ScaledRigid& t, const Vec3& p);
Vec3 inverse_apply(const ScaledRigid& t, const Vec3& p_obs);

struct Pixel {
  double u = 0.0, v = 0.0;
};

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit
  double near = 0.0;
  double far = 1.0;

  Vec3 at(double t) const { return origin + direction * t; }
};

// Pinhole camera. Extrinsics map camera space to world space (camera-to-world).
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;
  ScaledRigid cam_to_world;  // scale must be 1

  bool valid() const;
  Vec3 center() const { return cam_to_world.translation; }
  Vec3 forward() const {
    return {cam_to_world.rotation(0, 2), cam_to_world.rotation(1, 2), cam_to_world.rotation(2, 2)};
  }
};

Pixel project(const Camera& cam, const Vec3& p_world);
Ray cast_ray(const Camera& cam, const Pixel& px, double near = 1e-4, double far = 1e4);

// Ray / sphere intersection; returns false when the ray misses.
bool intersect_sphere(const Ray& ray, const Vec3& center, double radius, double& t0, double& t1);

}  // namespace holdfield

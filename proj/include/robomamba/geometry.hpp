#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>

namespace robomamba {

using Vec3 = std::array<double, 3>;
// Row-major 3x3.
using Mat3 = std::array<double, 9>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline Vec3 operator-(const Vec3& a) { return {-a[0], -a[1], -a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) { return (1.0 / norm(a)) * a; }

inline Mat3 identity3() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

inline Mat3 from_columns(const Vec3& x, const Vec3& y, const Vec3& z) {
  return {x[0], y[0], z[0], x[1], y[1], z[1], x[2], y[2], z[2]};
}
inline Vec3 column(const Mat3& m, std::size_t j) { return {m[j], m[3 + j], m[6 + j]}; }

inline Mat3 operator*(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
  return c;
}
inline Vec3 operator*(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}
inline Mat3 transpose(const Mat3& m) { return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}; }
inline double det(const Mat3& m) { return dot(column(m, 0), cross(column(m, 1), column(m, 2))); }

// Rodrigues rotation by angle about a unit axis.
inline Mat3 axis_angle(const Vec3& axis, double angle) {
  const Vec3 k = normalized(axis);
  const double c = std::cos(angle), s = std::sin(angle), t = 1 - c;
  return {t * k[0] * k[0] + c,        t * k[0] * k[1] - s * k[2], t * k[0] * k[2] + s * k[1],
          t * k[0] * k[1] + s * k[2], t * k[1] * k[1] + c,        t * k[1] * k[2] - s * k[0],
          t * k[0] * k[2] - s * k[1], t * k[1] * k[2] + s * k[0], t * k[2] * k[2] + c};
}

// max |R^T R - I| entry.
inline double orthonormality_error(const Mat3& r) {
  const Mat3 g = transpose(r) * r;
  const Mat3 i = identity3();
  double worst = 0;
  for (std::size_t k = 0; k < 9; ++k) worst = std::max(worst, std::abs(g[k] - i[k]));
  return worst;
}

// Pinhole camera at the origin looking along +Z, x right, y down.
struct Intrinsics {
  std::size_t width = 32;
  std::size_t height = 32;
  double fx = 0, fy = 0, cx = 0, cy = 0;

  static Intrinsics from_fov(std::size_t width, std::size_t height, double fov_x_deg) {
    Intrinsics k;
    k.width = width;
    k.height = height;
    k.fx = 0.5 * double(width) / std::tan(0.5 * fov_x_deg * std::numbers::pi / 180.0);
    k.fy = k.fx;
    k.cx = 0.5 * double(width);
    k.cy = 0.5 * double(height);
    return k;
  }
  bool valid() const { return fx > 0 && fy > 0 && width > 0 && height > 0; }
};

}  // namespace robomamba

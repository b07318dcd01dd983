#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

namespace edgs {

using Vec3 = std::array<double, 3>;
using Vec4 = std::array<double, 4>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
  const double n = norm(a);
  return {a[0] / n, a[1] / n, a[2] / n};
}

inline Vec3 matvec(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}
inline Vec3 matTvec(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2], m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
          m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
inline Mat3 quat_to_rot(const Vec4& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

/// Pinhole camera, world-to-camera convention: p_cam = R p_world + t, image
/// u = fx x/z + cx, v = fy y/z + cy. Depth is camera-space z.
struct CameraFrame {
  Mat3 rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 translation{0, 0, 0};
  double fx = 100, fy = 100, cx = 32, cy = 32;
  std::size_t width = 64, height = 64;
  double t = 0.0;

  Vec3 to_camera(const Vec3& p) const { return matvec(rotation, p) + translation; }
  Vec3 center() const { return matTvec(rotation, {-translation[0], -translation[1], -translation[2]}); }
};

/// Row-major H x W x 3 image, values nominally in [0,1].
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<double> px;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), px(w * h * 3, 0.0) {}
  double& at(std::size_t y, std::size_t x, std::size_t c) {
    return px[(y * width + x) * 3 + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c) const {
    return px[(y * width + x) * 3 + c];
  }
};

/// 10 log10(1 / MSE) over all channels; +inf when images are identical.
double psnr(const Image& a, const Image& b);

}  // namespace edgs

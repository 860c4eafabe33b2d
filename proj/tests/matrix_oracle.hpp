#pragma once

// Plain-array homogeneous transform arithmetic, kept independent of the
// Eigen-based pose code it is used to check.

#include <array>
#include <cmath>
#include <numbers>

#include "probeguide/pose.hpp"

namespace oracle {

using Mat4 = std::array<std::array<double, 4>, 4>;

inline Mat4 identity() {
  Mat4 m{};
  for (int i = 0; i < 4; ++i) m[i][i] = 1.0;
  return m;
}

inline Mat4 multiply(const Mat4& a, const Mat4& b) {
  Mat4 c{};
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  }
  return c;
}

inline Mat4 rot_z(double deg) {
  const double r = deg * std::numbers::pi / 180.0;
  Mat4 m = identity();
  m[0][0] = std::cos(r);
  m[0][1] = -std::sin(r);
  m[1][0] = std::sin(r);
  m[1][1] = std::cos(r);
  return m;
}

inline Mat4 rot_y(double deg) {
  const double r = deg * std::numbers::pi / 180.0;
  Mat4 m = identity();
  m[0][0] = std::cos(r);
  m[0][2] = std::sin(r);
  m[2][0] = -std::sin(r);
  m[2][2] = std::cos(r);
  return m;
}

inline Mat4 rot_x(double deg) {
  const double r = deg * std::numbers::pi / 180.0;
  Mat4 m = identity();
  m[1][1] = std::cos(r);
  m[1][2] = -std::sin(r);
  m[2][1] = std::sin(r);
  m[2][2] = std::cos(r);
  return m;
}

/// Intrinsic Z-Y'-X'' rotation followed by translation.
inline Mat4 from_pose(const probeguide::Pose& p) {
  Mat4 m = multiply(multiply(rot_z(p.yaw), rot_y(p.pitch)), rot_x(p.roll));
  m[0][3] = p.x;
  m[1][3] = p.y;
  m[2][3] = p.z;
  return m;
}

/// General 4x4 inverse by Gauss-Jordan elimination with partial pivoting.
inline Mat4 invert(Mat4 a) {
  Mat4 inv = identity();
  for (int col = 0; col < 4; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 4; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    }
    std::swap(a[col], a[pivot]);
    std::swap(inv[col], inv[pivot]);
    const double d = a[col][col];
    for (int k = 0; k < 4; ++k) {
      a[col][k] /= d;
      inv[col][k] /= d;
    }
    for (int r = 0; r < 4; ++r) {
      if (r == col) continue;
      const double f = a[r][col];
      for (int k = 0; k < 4; ++k) {
        a[r][k] -= f * a[col][k];
        inv[r][k] -= f * inv[col][k];
      }
    }
  }
  return inv;
}

inline double max_abs_diff(const Mat4& a, const Mat4& b) {
  double m = 0.0;
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  }
  return m;
}

}  // namespace oracle

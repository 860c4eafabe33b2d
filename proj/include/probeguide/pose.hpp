#pragma once

#include <array>

#include <Eigen/Core>

namespace probeguide {

/// 6-DOF probe pose: translation in millimetres, intrinsic Z-Y'-X'' Euler
/// angles (yaw, pitch, roll) in degrees, each wrapped to (-180, 180].
///
/// A movement between two probe states is also a Pose, read as a rigid
/// transform that is applied on the left.
struct Pose {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;

  static Pose identity() { return {}; }
  static Pose translation(double x, double y, double z) { return {x, y, z, 0.0, 0.0, 0.0}; }

  std::array<double, 6> as_array() const { return {x, y, z, yaw, pitch, roll}; }
  static Pose from_array(const std::array<double, 6>& a) { return {a[0], a[1], a[2], a[3], a[4], a[5]}; }

  bool operator==(const Pose&) const = default;
};

/// 4x4 homogeneous rigid transform with an orthonormal rotation block.
class RigidMatrix {
 public:
  RigidMatrix() : m_(Eigen::Matrix4d::Identity()) {}
  explicit RigidMatrix(const Eigen::Matrix4d& m) : m_(m) {}
  RigidMatrix(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation);

  static RigidMatrix from_pose(const Pose& p);

  /// Converts back to Euler form. At gimbal lock roll is set to zero and the
  /// remaining rotation folded into yaw.
  Pose to_pose() const;

  Eigen::Matrix3d rotation() const { return m_.topLeftCorner<3, 3>(); }
  Eigen::Vector3d translation() const { return m_.topRightCorner<3, 1>(); }
  const Eigen::Matrix4d& matrix() const { return m_; }

  RigidMatrix operator*(const RigidMatrix& other) const { return RigidMatrix(Eigen::Matrix4d(m_ * other.m_)); }
  RigidMatrix inverse() const;

  /// Max deviation of R*R^T from identity and of det(R) from one.
  double orthonormality_error() const;

 private:
  Eigen::Matrix4d m_;
};

/// Wraps an angle in degrees into (-180, 180].
double wrap_degrees(double deg);

/// Rotation matrix for intrinsic yaw-pitch-roll, R = Rz(yaw) * Ry(pitch) * Rx(roll).
Eigen::Matrix3d rotation_from_euler(double yaw_deg, double pitch_deg, double roll_deg);

/// Pitch magnitude at or above which Euler extraction is treated as near gimbal lock.
inline constexpr double kGimbalWarnPitchDeg = 89.0;

bool near_gimbal(const Pose& p);

/// Applies q first, then p: M(p) * M(q).
Pose compose(const Pose& p, const Pose& q);

struct ComposeResult {
  Pose pose;
  bool near_gimbal = false;
};

ComposeResult compose_with_diagnostics(const Pose& p, const Pose& q);

Pose inverse(const Pose& p);

/// Relative movement p_{j->i} = p_i * p_j^{-1}, so compose(relative(pi, pj), pj) == pi.
Pose relative(const Pose& p_i, const Pose& p_j);

/// Movement that takes the current pose onto the target plane pose.
inline Pose guidance_target(const Pose& p_star, const Pose& p_t) { return relative(p_star, p_t); }

struct PoseError {
  double trans_mae = 0.0;  // mm
  double rot_mae = 0.0;    // degrees
};

/// Mean absolute translation and wrapped rotation difference between two movements.
PoseError pose_error(const Pose& a, const Pose& b);

/// Geodesic magnitudes of a rigid transform.
double translation_norm(const Pose& p);
double rotation_angle_deg(const Pose& p);

/// se(3) logarithm as (rho, omega) with omega in radians; exp is its inverse.
Eigen::Matrix<double, 6, 1> se3_log(const RigidMatrix& m);
RigidMatrix se3_exp(const Eigen::Matrix<double, 6, 1>& xi);

/// Pose on the geodesic from a (s = 0) to b (s = 1).
Pose interpolate(const Pose& a, const Pose& b, double s);

}  // namespace probeguide

#include "probeguide/pose.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

namespace probeguide {
namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d s;
  s << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return s;
}

}  // namespace

double wrap_degrees(double deg) {
  double w = std::fmod(deg, 360.0);
  if (w > 180.0) w -= 360.0;
  if (w <= -180.0) w += 360.0;
  return w;
}

Eigen::Matrix3d rotation_from_euler(double yaw_deg, double pitch_deg, double roll_deg) {
  return (Eigen::AngleAxisd(yaw_deg * kDeg, Eigen::Vector3d::UnitZ()) *
          Eigen::AngleAxisd(pitch_deg * kDeg, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(roll_deg * kDeg, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

RigidMatrix::RigidMatrix(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation)
    : m_(Eigen::Matrix4d::Identity()) {
  m_.topLeftCorner<3, 3>() = rotation;
  m_.topRightCorner<3, 1>() = translation;
}

RigidMatrix RigidMatrix::from_pose(const Pose& p) {
  return RigidMatrix(rotation_from_euler(p.yaw, p.pitch, p.roll), Eigen::Vector3d(p.x, p.y, p.z));
}

Pose RigidMatrix::to_pose() const {
  const Eigen::Matrix3d r = rotation();
  Pose p;
  p.x = m_(0, 3);
  p.y = m_(1, 3);
  p.z = m_(2, 3);

  const double sp = std::clamp(-r(2, 0), -1.0, 1.0);
  const double cp = std::hypot(r(0, 0), r(1, 0));
  if (cp > 1e-12) {
    p.pitch = std::atan2(sp, cp) / kDeg;
    p.yaw = std::atan2(r(1, 0), r(0, 0)) / kDeg;
    p.roll = std::atan2(r(2, 1), r(2, 2)) / kDeg;
  } else {
    // R = Rz(yaw) * Ry(+-90): roll is unobservable, so it is pinned to zero.
    p.pitch = sp > 0.0 ? 90.0 : -90.0;
    p.roll = 0.0;
    p.yaw = std::atan2(-r(0, 1), r(1, 1)) / kDeg;
  }
  p.yaw = wrap_degrees(p.yaw);
  p.pitch = wrap_degrees(p.pitch);
  p.roll = wrap_degrees(p.roll);
  return p;
}

RigidMatrix RigidMatrix::inverse() const {
  const Eigen::Matrix3d rt = rotation().transpose();
  return RigidMatrix(rt, -rt * translation());
}

double RigidMatrix::orthonormality_error() const {
  const Eigen::Matrix3d r = rotation();
  const double ortho = (r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return std::max(ortho, std::abs(r.determinant() - 1.0));
}

bool near_gimbal(const Pose& p) { return std::abs(p.pitch) >= kGimbalWarnPitchDeg; }

Pose compose(const Pose& p, const Pose& q) {
  return (RigidMatrix::from_pose(p) * RigidMatrix::from_pose(q)).to_pose();
}

ComposeResult compose_with_diagnostics(const Pose& p, const Pose& q) {
  ComposeResult r;
  r.pose = compose(p, q);
  r.near_gimbal = near_gimbal(r.pose);
  return r;
}

Pose inverse(const Pose& p) { return RigidMatrix::from_pose(p).inverse().to_pose(); }

Pose relative(const Pose& p_i, const Pose& p_j) {
  if (p_i == p_j) return Pose::identity();
  return (RigidMatrix::from_pose(p_i) * RigidMatrix::from_pose(p_j).inverse()).to_pose();
}

PoseError pose_error(const Pose& a, const Pose& b) {
  PoseError e;
  e.trans_mae = (std::abs(a.x - b.x) + std::abs(a.y - b.y) + std::abs(a.z - b.z)) / 3.0;
  const auto ang = [](double u, double v) { return std::abs(wrap_degrees(u - v)); };
  e.rot_mae = (ang(a.yaw, b.yaw) + ang(a.pitch, b.pitch) + ang(a.roll, b.roll)) / 3.0;
  return e;
}

double translation_norm(const Pose& p) { return std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z); }

double rotation_angle_deg(const Pose& p) {
  const Eigen::Matrix3d r = rotation_from_euler(p.yaw, p.pitch, p.roll);
  return Eigen::AngleAxisd(r).angle() / kDeg;
}

Eigen::Matrix<double, 6, 1> se3_log(const RigidMatrix& m) {
  const Eigen::AngleAxisd aa(m.rotation());
  const double theta = aa.angle();
  const Eigen::Vector3d omega = aa.axis() * theta;
  const Eigen::Matrix3d w = skew(omega);
  Eigen::Matrix3d v_inv = Eigen::Matrix3d::Identity() - 0.5 * w;
  if (theta > 1e-9) {
    const double half = 0.5 * theta;
    const double coef = (1.0 - half * std::cos(half) / std::sin(half)) / (theta * theta);
    v_inv += coef * w * w;
  } else {
    v_inv += (1.0 / 12.0) * w * w;
  }
  Eigen::Matrix<double, 6, 1> xi;
  xi.head<3>() = v_inv * m.translation();
  xi.tail<3>() = omega;
  return xi;
}

RigidMatrix se3_exp(const Eigen::Matrix<double, 6, 1>& xi) {
  const Eigen::Vector3d rho = xi.head<3>();
  const Eigen::Vector3d omega = xi.tail<3>();
  const double theta = omega.norm();
  const Eigen::Matrix3d w = skew(omega);
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d v = Eigen::Matrix3d::Identity();
  if (theta > 1e-9) {
    r = Eigen::AngleAxisd(theta, omega / theta).toRotationMatrix();
    v += (1.0 - std::cos(theta)) / (theta * theta) * w + (theta - std::sin(theta)) / (theta * theta * theta) * w * w;
  } else {
    r += w;
    v += 0.5 * w;
  }
  return RigidMatrix(r, v * rho);
}

Pose interpolate(const Pose& a, const Pose& b, double s) {
  if (s <= 0.0) return a;
  if (s >= 1.0) return b;
  const RigidMatrix ma = RigidMatrix::from_pose(a);
  const RigidMatrix delta = RigidMatrix::from_pose(b) * ma.inverse();
  return (se3_exp(s * se3_log(delta)) * ma).to_pose();
}

}  // namespace probeguide

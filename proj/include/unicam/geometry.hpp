#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <cmath>
#include <stdexcept>

namespace unicam {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Scene point in meters.
using Point3 = Vec3;
/// Continuous image coordinates in pixels.
using Pixel = Vec2;
/// se(3) tangent vector, rotational part first: (wx, wy, wz, vx, vy, vz).
using Twist = Vec6;

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  // clang-format off
  s <<     0, -v.z(),  v.y(),
       v.z(),      0, -v.x(),
      -v.y(),  v.x(),      0;
  // clang-format on
  return s;
}

/// Rigid-body transform. Rotation is stored as a matrix; the constructor
/// rejects inputs that are not orthonormal with unit determinant (1e-9).
class SE3 {
 public:
  SE3() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  SE3(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    const double ortho_err =
        (rotation_.transpose() * rotation_ - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!(ortho_err < 1e-9) || !(std::abs(rotation_.determinant() - 1.0) < 1e-9)) {
      throw std::invalid_argument("SE3: rotation is not a proper orthonormal matrix");
    }
    if (!translation_.allFinite()) {
      throw std::invalid_argument("SE3: non-finite translation");
    }
  }

  static SE3 identity() { return SE3(); }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  /// Applies R*p + t.
  Vec3 operator*(const Vec3& point) const { return rotation_ * point + translation_; }

  /// Group composition: (this * other)(p) = this(other(p)).
  SE3 operator*(const SE3& other) const {
    SE3 out;
    out.rotation_ = rotation_ * other.rotation_;
    out.translation_ = rotation_ * other.translation_ + translation_;
    return out;
  }

  SE3 inverse() const {
    SE3 out;
    out.rotation_ = rotation_.transpose();
    out.translation_ = -(rotation_.transpose() * translation_);
    return out;
  }

  /// Re-projects the rotation onto SO(3) via polar decomposition. Used by the
  /// solvers every 50 updates to stop drift from accumulated products.
  SE3 orthonormalized() const {
    Eigen::JacobiSVD<Mat3> svd(rotation_, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
      Mat3 u = svd.matrixU();
      u.col(2) *= -1;
      r = u * svd.matrixV().transpose();
    }
    SE3 out;
    out.rotation_ = r;
    out.translation_ = translation_;
    return out;
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation_;
    m.topRightCorner<3, 1>() = translation_;
    return m;
  }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

using PoseSE3 = SE3;

namespace detail {

// sin(t)/t, (1-cos(t))/t^2, (t-sin(t))/t^3 with series fallbacks so that the
// map stays exact down to (and well below) 1e-8 rad.
inline void rotation_coeffs(double theta, double& a, double& b, double& c) {
  const double t2 = theta * theta;
  if (theta < 1e-4) {
    a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / t2;
    c = (theta - std::sin(theta)) / (t2 * theta);
  }
}

}  // namespace detail

/// Exponential map se(3) -> SE(3). se3_exp(0) is the identity.
inline SE3 se3_exp(const Twist& xi) {
  if (!xi.allFinite()) {
    throw std::invalid_argument("se3_exp: non-finite twist");
  }
  const Vec3 omega = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  const double theta = omega.norm();
  double a, b, c;
  detail::rotation_coeffs(theta, a, b, c);
  const Mat3 w = skew(omega);
  const Mat3 w2 = w * w;
  const Mat3 rotation = Mat3::Identity() + a * w + b * w2;
  const Mat3 v_map = Mat3::Identity() + b * w + c * w2;
  return SE3(rotation, v_map * v);
}

/// Logarithm map, inverse of se3_exp for rotation angles below pi.
/// Throws std::domain_error within 1e-9 of pi where the map is singular.
inline Twist se3_log(const SE3& pose) {
  const Eigen::AngleAxisd aa(pose.rotation());
  const double theta = aa.angle();
  if (theta > M_PI - 1e-9) {
    throw std::domain_error("se3_log: rotation angle within 1e-9 of pi (near-singular)");
  }
  const Vec3 omega = theta * aa.axis();
  const Mat3 w = skew(omega);
  const Mat3 w2 = w * w;
  double d;  // coefficient of w^2 in V^{-1}
  if (theta < 1e-4) {
    const double t2 = theta * theta;
    d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  } else {
    d = (1.0 - theta * std::sin(theta) / (2.0 * (1.0 - std::cos(theta)))) / (theta * theta);
  }
  const Mat3 v_inv = Mat3::Identity() - 0.5 * w + d * w2;
  Twist xi;
  xi.head<3>() = omega;
  xi.tail<3>() = v_inv * pose.translation();
  return xi;
}

inline Vec3 transform_point(const SE3& pose, const Vec3& point) { return pose * point; }

inline SE3 compose(const SE3& a, const SE3& b) { return a * b; }

inline SE3 inverse(const SE3& pose) { return pose.inverse(); }

}  // namespace unicam

#pragma once

// Rigid-body geometry: unit quaternions, SE(3) transforms, Slerp, and the
// 6D continuous rotation parameterization used by the pose-correction solver.
// All angles in radians, lengths in meters, times in seconds.

#include <Eigen/Dense>

namespace dust {

using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;
using Mat3 = Eigen::Matrix3d;
using Mat2 = Eigen::Matrix2d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

/// Unit quaternion (w, x, y, z), canonicalized to w >= 0.
/// q and -q denote the same rotation; every constructor normalizes.
struct UnitQuaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  UnitQuaternion() = default;
  UnitQuaternion(double w_, double x_, double y_, double z_);

  static UnitQuaternion identity() { return {}; }
  static UnitQuaternion from_axis_angle(const Vec3& axis, double angle);
  /// Rotation vector omega = axis * angle; safe near zero.
  static UnitQuaternion from_rotation_vector(const Vec3& omega);
  static UnitQuaternion from_matrix(const Mat3& r);

  Mat3 to_matrix() const;
  Vec3 rotate(const Vec3& p) const;
  UnitQuaternion conjugate() const { return {w, -x, -y, -z}; }
  UnitQuaternion operator*(const UnitQuaternion& o) const;

  double dot(const UnitQuaternion& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }
  /// Rotation angle in [0, pi] between the two represented rotations.
  double angle_to(const UnitQuaternion& o) const;
  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
};

/// Spherical linear interpolation along the shortest arc, t in [0, 1].
/// Throws if either input deviates from unit norm by more than 1e-6.
UnitQuaternion slerp(const UnitQuaternion& q0, const UnitQuaternion& q1, double t);

inline Vec3 lerp_vec3(const Vec3& p0, const Vec3& p1, double w) { return p0 + w * (p1 - p0); }

/// SE(3) element; rotation stored as unit quaternion, matrix views on demand.
struct RigidTransform {
  UnitQuaternion rotation;
  Vec3 translation = Vec3::Zero();

  RigidTransform() = default;
  RigidTransform(const UnitQuaternion& q, const Vec3& t) : rotation(q), translation(t) {}

  static RigidTransform identity() { return {}; }
  Mat3 rotation_matrix() const { return rotation.to_matrix(); }
};

RigidTransform se3_compose(const RigidTransform& a, const RigidTransform& b);
Vec3 se3_apply(const RigidTransform& t, const Vec3& p);
RigidTransform se3_inverse(const RigidTransform& t);

/// Left-multiplicative tangent step: rotation by exp([omega]x), translation += dt.
/// tangent = (dt, omega) stacked as a 6-vector.
RigidTransform se3_perturb(const RigidTransform& t, const Vec6& tangent);

/// First two columns of a rotation matrix, prior to Gram-Schmidt.
struct Rotation6D {
  Vec3 a1, a2;
};

/// Gram-Schmidt orthonormalization; throws on degenerate input
/// (|a1| < 1e-9 or a1, a2 within 1e-9 of parallel).
Mat3 rot6d_to_matrix(const Rotation6D& r);
Rotation6D matrix_to_rot6d(const Mat3& r);

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

}  // namespace dust

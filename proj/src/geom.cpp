#include "dust/geom.hpp"

#include <cmath>
#include <stdexcept>

namespace dust {

namespace {

void canonicalize(double& w, double& x, double& y, double& z) {
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (n < 1e-12) throw std::invalid_argument("quaternion norm too small to normalize");
  double s = 1.0 / n;
  if (w < 0.0) s = -s;  // pick the w >= 0 representative
  w *= s;
  x *= s;
  y *= s;
  z *= s;
}

}  // namespace

UnitQuaternion::UnitQuaternion(double w_, double x_, double y_, double z_) : w(w_), x(x_), y(y_), z(z_) {
  canonicalize(w, x, y, z);
}

UnitQuaternion UnitQuaternion::from_axis_angle(const Vec3& axis, double angle) {
  const double n = axis.norm();
  if (n < 1e-12) throw std::invalid_argument("axis norm too small");
  const Vec3 u = axis / n;
  const double h = 0.5 * angle;
  const double s = std::sin(h);
  return {std::cos(h), u.x() * s, u.y() * s, u.z() * s};
}

UnitQuaternion UnitQuaternion::from_rotation_vector(const Vec3& omega) {
  const double angle = omega.norm();
  if (angle < 1e-12) {
    // first-order: q = (1, omega/2), normalized by the constructor
    return {1.0, 0.5 * omega.x(), 0.5 * omega.y(), 0.5 * omega.z()};
  }
  return from_axis_angle(omega, angle);
}

UnitQuaternion UnitQuaternion::from_matrix(const Mat3& r) {
  Eigen::Quaterniond q(r);
  return {q.w(), q.x(), q.y(), q.z()};
}

Mat3 UnitQuaternion::to_matrix() const {
  Mat3 m;
  const double xx = x * x, yy = y * y, zz = z * z;
  const double xy = x * y, xz = x * z, yz = y * z;
  const double wx = w * x, wy = w * y, wz = w * z;
  m << 1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
       2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
       2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy);
  return m;
}

Vec3 UnitQuaternion::rotate(const Vec3& p) const {
  // q p q^-1 expanded via two cross products
  const Vec3 u(x, y, z);
  const Vec3 t = 2.0 * u.cross(p);
  return p + w * t + u.cross(t);
}

UnitQuaternion UnitQuaternion::operator*(const UnitQuaternion& o) const {
  return {w * o.w - x * o.x - y * o.y - z * o.z,
          w * o.x + x * o.w + y * o.z - z * o.y,
          w * o.y - x * o.z + y * o.w + z * o.x,
          w * o.z + x * o.y - y * o.x + z * o.w};
}

double UnitQuaternion::angle_to(const UnitQuaternion& o) const {
  // atan2 form stays accurate near zero where acos(dot) loses digits
  const UnitQuaternion rel = conjugate() * o;
  const double vec = std::sqrt(rel.x * rel.x + rel.y * rel.y + rel.z * rel.z);
  return 2.0 * std::atan2(vec, std::abs(rel.w));
}

UnitQuaternion slerp(const UnitQuaternion& q0, const UnitQuaternion& q1, double t) {
  if (std::abs(q0.norm() - 1.0) > 1e-6 || std::abs(q1.norm() - 1.0) > 1e-6)
    throw std::invalid_argument("slerp requires unit quaternions");
  if (t < 0.0 || t > 1.0) throw std::invalid_argument("slerp weight outside [0,1]");

  double d = q0.dot(q1);
  double sw = 1.0;
  if (d < 0.0) {  // shortest arc
    d = -d;
    sw = -1.0;
  }
  if (d > 1.0 - 1e-10) {
    // endpoints (nearly) coincide as rotations: normalized lerp is exact
    // to first order and deterministic for the exactly-antipodal input.
    return UnitQuaternion(q0.w + t * (sw * q1.w - q0.w), q0.x + t * (sw * q1.x - q0.x),
                          q0.y + t * (sw * q1.y - q0.y), q0.z + t * (sw * q1.z - q0.z));
  }
  const double omega = std::acos(d);
  const double so = std::sin(omega);
  const double c0 = std::sin((1.0 - t) * omega) / so;
  const double c1 = sw * std::sin(t * omega) / so;
  return UnitQuaternion(c0 * q0.w + c1 * q1.w, c0 * q0.x + c1 * q1.x, c0 * q0.y + c1 * q1.y,
                        c0 * q0.z + c1 * q1.z);
}

RigidTransform se3_compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation * b.rotation, a.rotation.rotate(b.translation) + a.translation};
}

Vec3 se3_apply(const RigidTransform& t, const Vec3& p) { return t.rotation.rotate(p) + t.translation; }

RigidTransform se3_inverse(const RigidTransform& t) {
  const UnitQuaternion qi = t.rotation.conjugate();
  return {qi, -qi.rotate(t.translation)};
}

RigidTransform se3_perturb(const RigidTransform& t, const Vec6& tangent) {
  const Vec3 dt = tangent.head<3>();
  const Vec3 omega = tangent.tail<3>();
  return {UnitQuaternion::from_rotation_vector(omega) * t.rotation, t.translation + dt};
}

Mat3 rot6d_to_matrix(const Rotation6D& r) {
  const double n1 = r.a1.norm();
  if (n1 < 1e-9) throw std::invalid_argument("rot6d: first column norm below 1e-9");
  const Vec3 b1 = r.a1 / n1;
  const Vec3 v2 = r.a2 - b1.dot(r.a2) * b1;
  const double n2 = v2.norm();
  const double n2_in = r.a2.norm();
  if (n2_in < 1e-9 || n2 < 1e-9 * n2_in)
    throw std::invalid_argument("rot6d: columns are degenerate (parallel or zero)");
  const Vec3 b2 = v2 / n2;
  Mat3 m;
  m.col(0) = b1;
  m.col(1) = b2;
  m.col(2) = b1.cross(b2);
  return m;
}

Rotation6D matrix_to_rot6d(const Mat3& r) { return {r.col(0), r.col(1)}; }

}  // namespace dust

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dust/geom.hpp"
#include "dust/rng.hpp"

using namespace dust;

namespace {

// independent axis-angle rotation matrix (Rodrigues), the oracle for slerp
Mat3 axis_angle_matrix(const Vec3& axis, double angle) {
  const Vec3 u = axis.normalized();
  const Mat3 k = skew(u);
  return Mat3::Identity() + std::sin(angle) * k + (1.0 - std::cos(angle)) * k * k;
}

}  // namespace

TEST_CASE("quaternion constructors normalize and canonicalize") {
  const UnitQuaternion q(2.0, 0.0, 0.0, 0.0);
  CHECK(q.w == doctest::Approx(1.0).epsilon(1e-12));
  const UnitQuaternion neg(-0.5, 0.5, 0.5, 0.5);
  CHECK(neg.w >= 0.0);  // -q is the same rotation
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const UnitQuaternion r = rng.random_rotation();
    CHECK(std::abs(r.norm() - 1.0) <= 1e-9);
    CHECK(r.w >= 0.0);
  }
}

TEST_CASE("slerp endpoints and equal inputs") {
  Rng rng(3);
  const UnitQuaternion q0 = rng.random_rotation();
  const UnitQuaternion q1 = rng.random_rotation();
  CHECK(slerp(q0, q1, 0.0).angle_to(q0) <= 1e-12);
  CHECK(slerp(q0, q1, 1.0).angle_to(q1) <= 1e-12);
  CHECK(slerp(q0, q0, 0.37).angle_to(q0) <= 1e-12);
}

TEST_CASE("slerp halfway between identity and a 90 degree turn") {
  const UnitQuaternion q90 = UnitQuaternion::from_axis_angle(Vec3(0, 0, 1), M_PI / 2);
  const UnitQuaternion half = slerp(UnitQuaternion::identity(), q90, 0.5);
  const Mat3 expected = axis_angle_matrix(Vec3(0, 0, 1), M_PI / 4);
  CHECK((half.to_matrix() - expected).norm() <= 1e-12);
}

TEST_CASE("slerp rejects sub-unit inputs") {
  UnitQuaternion bad;
  bad.w = 0.5;  // bypass the normalizing constructor
  CHECK_THROWS_AS(slerp(bad, UnitQuaternion::identity(), 0.5), std::invalid_argument);
}

TEST_CASE("slerp angular speed is constant") {
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const UnitQuaternion q0 = rng.random_rotation();
    const UnitQuaternion q1 = rng.random_rotation();
    const double full = q0.angle_to(q1);
    for (double w = 0.1; w < 0.95; w += 0.1) {
      const UnitQuaternion qi = slerp(q0, q1, w);
      CHECK(qi.angle_to(q0) == doctest::Approx(w * full).epsilon(0).scale(1).epsilon(1e-7));
    }
  }
}

TEST_CASE("slerp handles an exactly antipodal pair deterministically") {
  const UnitQuaternion q = UnitQuaternion::from_axis_angle(Vec3(1, 0, 0), 0.7);
  UnitQuaternion anti;
  anti.w = -q.w;
  anti.x = -q.x;
  anti.y = -q.y;
  anti.z = -q.z;  // same rotation, opposite sign
  const UnitQuaternion mid = slerp(q, anti, 0.5);
  CHECK(mid.angle_to(q) <= 1e-9);
}

TEST_CASE("lerp_vec3 examples") {
  CHECK((lerp_vec3(Vec3(0, 0, 0), Vec3(2, 0, 0), 0.5) - Vec3(1, 0, 0)).norm() <= 1e-15);
  const Vec3 p(0.3, -1.0, 2.0);
  CHECK((lerp_vec3(p, p, 0.8) - p).norm() <= 1e-15);
  CHECK((lerp_vec3(Vec3(1, 2, 3), Vec3(3, 2, 1), 0.25) - Vec3(1.5, 2, 2.5)).norm() <= 1e-15);
}

TEST_CASE("se3 apply and inverse") {
  Rng rng(5);
  const Vec3 p(0.4, 1.0, -2.0);
  CHECK((se3_apply(RigidTransform::identity(), p) - p).norm() <= 1e-15);

  const RigidTransform rot90{UnitQuaternion::from_axis_angle(Vec3(0, 0, 1), M_PI / 2),
                             Vec3::Zero()};
  CHECK((se3_apply(rot90, Vec3(1, 0, 0)) - Vec3(0, 1, 0)).norm() <= 1e-12);

  for (int i = 0; i < 20; ++i) {
    const RigidTransform t{rng.random_rotation(), rng.normal_vec3()};
    const RigidTransform id = se3_compose(t, se3_inverse(t));
    CHECK(id.rotation.angle_to(UnitQuaternion::identity()) <= 1e-9);
    CHECK(id.translation.norm() <= 1e-9);
  }
}

TEST_CASE("se3 group axioms on random triples") {
  Rng rng(13);
  for (int i = 0; i < 30; ++i) {
    const RigidTransform a{rng.random_rotation(), rng.normal_vec3()};
    const RigidTransform b{rng.random_rotation(), rng.normal_vec3()};
    const RigidTransform c{rng.random_rotation(), rng.normal_vec3()};
    const RigidTransform left = se3_compose(se3_compose(a, b), c);
    const RigidTransform right = se3_compose(a, se3_compose(b, c));
    CHECK(left.rotation.angle_to(right.rotation) <= 1e-9);
    CHECK((left.translation - right.translation).norm() <= 1e-9);
    const Vec3 p = rng.normal_vec3();
    CHECK((se3_apply(left, p) - se3_apply(a, se3_apply(b, se3_apply(c, p)))).norm() <= 1e-9);
  }
}

TEST_CASE("rot6d canonical basis and scale invariance") {
  CHECK((rot6d_to_matrix({Vec3(1, 0, 0), Vec3(0, 1, 0)}) - Mat3::Identity()).norm() <= 1e-15);
  CHECK((rot6d_to_matrix({Vec3(2, 0, 0), Vec3(0, 5, 0)}) - Mat3::Identity()).norm() <= 1e-15);
}

TEST_CASE("rot6d round trip and SO(3) membership") {
  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    const Mat3 r = rng.random_rotation().to_matrix();
    const Mat3 back = rot6d_to_matrix(matrix_to_rot6d(r));
    CHECK((back - r).norm() <= 1e-9);
  }
  for (int i = 0; i < 50; ++i) {
    const Rotation6D r6{rng.normal_vec3(), rng.normal_vec3()};
    if (r6.a1.norm() < 1e-6) continue;
    const Mat3 m = rot6d_to_matrix(r6);
    CHECK((m.transpose() * m - Mat3::Identity()).norm() <= 1e-9);
    CHECK(m.determinant() == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("rot6d rejects degenerate input") {
  CHECK_THROWS_AS(rot6d_to_matrix({Vec3::Zero(), Vec3(0, 1, 0)}), std::invalid_argument);
  CHECK_THROWS_AS(rot6d_to_matrix({Vec3(1, 0, 0), Vec3(2, 0, 0)}), std::invalid_argument);
}

TEST_CASE("se3_perturb matches a small rotation composed on the left") {
  const RigidTransform t{UnitQuaternion::from_axis_angle(Vec3(0, 1, 0), 0.3), Vec3(1, 2, 3)};
  Vec6 tangent;
  tangent << 0.1, -0.2, 0.05, 0.0, 0.0, 0.01;
  const RigidTransform p = se3_perturb(t, tangent);
  CHECK((p.translation - (t.translation + Vec3(0.1, -0.2, 0.05))).norm() <= 1e-15);
  const Mat3 expected = axis_angle_matrix(Vec3(0, 0, 1), 0.01) * t.rotation_matrix();
  CHECK((p.rotation_matrix() - expected).norm() <= 1e-12);
}

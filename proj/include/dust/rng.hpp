#pragma once

// Deterministic random helpers. Distributions are implemented here rather
// than taken from <random> so that seeded outputs are identical across
// standard libraries, which the byte-stable output contract relies on.

#include <cmath>
#include <cstdint>

#include "dust/geom.hpp"

namespace dust {

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {
    next_u64();  // avoid the all-zero-ish first draw for tiny seeds
  }

  uint64_t next_u64() {  // splitmix64
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }  // [0,1)

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {  // Box-Muller, one value per call
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  Vec3 normal_vec3() {
    const double a = normal(), b = normal(), c = normal();
    return Vec3(a, b, c);
  }

  Vec3 unit_vec3() {
    Vec3 v;
    do {
      v = normal_vec3();
    } while (v.norm() < 1e-6);
    return v.normalized();
  }

  UnitQuaternion random_rotation() {
    // uniform over SO(3) via normalized 4D gaussian
    const double a = normal(), b = normal(), c = normal(), d = normal();
    return UnitQuaternion(a, b, c, d);
  }

  /// Random symmetric positive definite matrix with eigenvalues in [lo, hi].
  Mat3 random_spd(double lo, double hi) {
    const Mat3 r = random_rotation().to_matrix();
    Vec3 ev(uniform(lo, hi), uniform(lo, hi), uniform(lo, hi));
    return r * ev.asDiagonal() * r.transpose();
  }

 private:
  uint64_t state_;
};

}  // namespace dust

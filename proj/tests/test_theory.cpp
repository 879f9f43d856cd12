#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dust/rng.hpp"
#include "dust/theory.hpp"

using namespace dust;

namespace {

MotionSpec motion_between(const Vec3& v, double dtau) {
  MotionSpec m;
  m.velocity = v;
  m.tau_vehicle = 0.5 * dtau;
  m.tau_infra = -0.5 * dtau;
  m.anchor = 0.0;
  return m;
}

}  // namespace

TEST_CASE("fisher-weighted optimum: symmetry, hand solve and descent oracle") {
  // equal isotropic weights pick the midpoint
  const Vec3 mid = single_timeline_optimum(Mat3::Identity(), Mat3::Identity(), Vec3(2, 0, 0),
                                           Vec3(0, 2, 0));
  CHECK((mid - Vec3(1, 1, 0)).norm() <= 1e-12);

  // A_v = 2I, A_f = I, mu_v = (3,0,0), mu_f = 0 -> (2,0,0)
  const Vec3 weighted = single_timeline_optimum(2.0 * Mat3::Identity(), Mat3::Identity(),
                                                Vec3(3, 0, 0), Vec3(0, 0, 0));
  CHECK((weighted - Vec3(2, 0, 0)).norm() <= 1e-12);

  // dense gradient descent oracle from random starts
  Rng rng(101);
  for (int trial = 0; trial < 5; ++trial) {
    const Mat3 a_v = rng.random_spd(0.2, 3.0);
    const Mat3 a_f = rng.random_spd(0.2, 3.0);
    const Vec3 mu_v = rng.normal_vec3(), mu_f = rng.normal_vec3();
    const Vec3 closed = single_timeline_optimum(a_v, a_f, mu_v, mu_f);

    Eigen::SelfAdjointEigenSolver<Mat3> es(a_v + a_f);
    const double lr = 0.9 / es.eigenvalues().maxCoeff();
    Vec3 best = Vec3::Zero();
    double best_loss = std::numeric_limits<double>::infinity();
    for (int start = 0; start < 20; ++start) {
      Vec3 mu = 3.0 * rng.normal_vec3();
      for (int it = 0; it < 5000; ++it) mu -= lr * (a_v * (mu - mu_v) + a_f * (mu - mu_f));
      const Vec3 dv = mu - mu_v, df = mu - mu_f;
      const double loss = 0.5 * dv.dot(a_v * dv) + 0.5 * df.dot(a_f * df);
      if (loss < best_loss) {
        best_loss = loss;
        best = mu;
      }
    }
    CHECK((closed - best).norm() <= 1e-6);
  }
}

TEST_CASE("singular fisher sum is rejected") {
  CHECK_THROWS_AS(single_timeline_optimum(Mat3::Zero(), Mat3::Zero(), Vec3::Zero(), Vec3::Zero()),
                  std::invalid_argument);
}

TEST_CASE("irreducible bound arithmetic and homogeneity") {
  CHECK(irreducible_bound(motion_between(Vec3(3, 0, 0), 0.0), {1.0, 2.0}) == 0.0);

  // 10 m/s at 70 ms with a unit eigenvalue: 0.1225, misalignment 0.7 m
  const MotionSpec m = motion_between(Vec3(10, 0, 0), 0.07);
  CHECK(irreducible_bound(m, {1.0}) == doctest::Approx(0.1225).epsilon(1e-12));
  CHECK(m.velocity.norm() * std::abs(m.delta_tau()) == doctest::Approx(0.7).epsilon(1e-12));

  const double base = irreducible_bound(motion_between(Vec3(4, 1, 0), 0.05), {0.7});
  CHECK(irreducible_bound(motion_between(Vec3(4, 1, 0), 0.10), {0.7}) ==
        doctest::Approx(4.0 * base).epsilon(1e-12));
  CHECK(irreducible_bound(motion_between(Vec3(8, 2, 0), 0.05), {0.7}) ==
        doctest::Approx(4.0 * base).epsilon(1e-12));
}

TEST_CASE("optimal loss: residual identity, bound and isotropic tightness") {
  Rng rng(103);
  for (int i = 0; i < 100; ++i) {
    const Mat3 a_v = rng.random_spd(0.1, 4.0);
    const Mat3 a_f = rng.random_spd(0.1, 4.0);
    const MotionSpec m = motion_between(rng.uniform(1.0, 12.0) * rng.unit_vec3(),
                                        rng.uniform(0.01, 0.3));
    const OptimalLoss ol = single_timeline_optimal_loss(a_v, a_f, m);
    const Vec3 v_dt = m.velocity * m.delta_tau();
    CHECK((ol.delta_vehicle - ol.delta_infra + v_dt).norm() <= 1e-9);

    Eigen::SelfAdjointEigenSolver<Mat3> ev(a_v), ef(a_f);
    const double lambda = std::min(ev.eigenvalues().minCoeff(), ef.eigenvalues().minCoeff());
    CHECK(ol.loss >= irreducible_bound(m, {lambda}) - 1e-9);
  }

  // isotropic equal fisher: residuals +-v dtau / 2 and loss equals the bound
  const double lambda = 1.7;
  const MotionSpec m = motion_between(Vec3(6, -2, 1), 0.08);
  const OptimalLoss ol = single_timeline_optimal_loss(lambda * Mat3::Identity(),
                                                      lambda * Mat3::Identity(), m);
  const Vec3 v_dt = m.velocity * m.delta_tau();
  CHECK((ol.delta_vehicle + 0.5 * v_dt).norm() <= 1e-12);
  CHECK((ol.delta_infra - 0.5 * v_dt).norm() <= 1e-12);
  const double bound = irreducible_bound(m, {lambda});
  CHECK(std::abs(ol.loss - bound) / bound <= 1e-6);

  CHECK(single_timeline_optimal_loss(lambda * Mat3::Identity(), lambda * Mat3::Identity(),
                                     motion_between(Vec3(6, -2, 1), 0.0))
            .loss == doctest::Approx(0.0));
}

TEST_CASE("gradient cosine: worst case, outside anchors, zero gradient") {
  const Mat3 iso = 0.8 * Mat3::Identity();

  MotionSpec inside;
  inside.velocity = Vec3(9, 1, 0);
  inside.tau_vehicle = 0.03;
  inside.tau_infra = -0.05;  // anchor strictly between captures
  const GradientCosine worst = gradient_cosine(iso, iso, inside, Vec3::Zero());
  REQUIRE(worst.defined);
  CHECK(std::abs(worst.value + 1.0) <= 1e-9);

  MotionSpec outside = inside;
  outside.tau_vehicle = 0.12;
  outside.tau_infra = 0.05;  // both captures after the anchor
  const GradientCosine aligned = gradient_cosine(iso, iso, outside, Vec3::Zero());
  REQUIRE(aligned.defined);
  CHECK(std::abs(aligned.value - 1.0) <= 1e-9);

  MotionSpec zero = inside;
  zero.velocity = Vec3::Zero();  // both targets coincide with mu
  const GradientCosine undef = gradient_cosine(iso, iso, zero, Vec3::Zero());
  CHECK_FALSE(undef.defined);
}

TEST_CASE("empirical pose kernel is block diagonal only with dual timelines") {
  const ToySetup toy = make_toy_setup(16);
  const NTKBlocks dual = empirical_ntk_pose(toy.scene, toy.vehicle, toy.infra, TimelineMode::dual);
  CHECK(dual.vf.norm() <= 1e-8);
  CHECK(dual.fv.norm() <= 1e-8);
  // diagonal blocks are PSD
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(dual.vv);
  CHECK(es.eigenvalues().minCoeff() >= -1e-9);

  const SceneGraph collapsed = collapse_to_single_timeline(toy.scene, toy.anchors);
  const NTKBlocks single =
      empirical_ntk_pose(collapsed, toy.vehicle, toy.infra, TimelineMode::single);
  CHECK(single.vf.norm() > 1e-6);
}

TEST_CASE("the canonical-mean kernel is symmetric PSD and generally coupled") {
  const ToySetup toy = make_toy_setup(12);
  const Eigen::MatrixXd theta = empirical_ntk_canonical(toy.scene, toy.vehicle, toy.infra);
  CHECK((theta - theta.transpose()).norm() <= 1e-9);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(theta);
  CHECK(es.eigenvalues().minCoeff() >= -1e-9);
  // shared canonical parameters couple the two sources
  const int rows_v = 3 * toy.vehicle.camera.width * toy.vehicle.camera.height;
  CHECK(theta.topRightCorner(rows_v, theta.cols() - rows_v).norm() > 0.0);
}

TEST_CASE("degenerate scenes without agent pixels are rejected") {
  ToySetup toy = make_toy_setup(16);
  for (auto& agent : toy.scene.agents) {
    // push every agent far outside both frusta
    for (auto& key : agent.trajectory_vehicle.keys) key.pose.translation += Vec3(0, 0, 500);
    for (auto& key : agent.trajectory_infra.keys) key.pose.translation += Vec3(0, 0, 500);
  }
  CHECK_THROWS_AS(empirical_ntk_pose(toy.scene, toy.vehicle, toy.infra, TimelineMode::dual),
                  std::invalid_argument);
}

TEST_CASE("gradient flow: exponential decay, zero start and decoupling") {
  NTKBlocks blocks;
  blocks.mode = TimelineMode::dual;
  blocks.vv = 2.0 * Eigen::MatrixXd::Identity(3, 3);
  blocks.ff = 0.5 * Eigen::MatrixXd::Identity(2, 2);

  Eigen::VectorXd r0v(3), r0f(2);
  r0v << 1.0, -2.0, 0.5;
  r0f << 0.4, 0.1;
  const double step = 1e-3;
  const FlowResult fr = gradient_flow(blocks, r0v, r0f, 1.0, step);
  CHECK_FALSE(fr.unstable);
  const Eigen::VectorXd expected = std::exp(-2.0) * r0v;
  CHECK((fr.r_vehicle.back() - expected).norm() / r0v.norm() <= 5.0 * step * 2.0);

  const FlowResult zero = gradient_flow(blocks, Eigen::VectorXd::Zero(3), r0f, 1.0, step);
  for (const auto& r : zero.r_vehicle) CHECK(r.norm() == 0.0);

  CHECK(flow_decoupled(blocks, r0v, r0f, 0.5, step));
}

TEST_CASE("gradient flow rejects bad inputs and reports instability") {
  NTKBlocks blocks;
  blocks.mode = TimelineMode::dual;
  blocks.vv = Eigen::MatrixXd::Identity(2, 2);
  blocks.ff = Eigen::MatrixXd::Identity(2, 2);
  Eigen::VectorXd r(2);
  r << 1, 1;
  CHECK_THROWS_AS(gradient_flow(blocks, r, r, 1.0, 0.0), std::invalid_argument);

  NTKBlocks single = blocks;
  single.mode = TimelineMode::single;
  CHECK_THROWS_AS(gradient_flow(single, r, r, 1.0, 0.1), std::invalid_argument);

  // a step beyond 2/lambda makes explicit Euler grow
  const FlowResult unstable = gradient_flow(blocks, r, r, 10.0, 3.0);
  CHECK(unstable.unstable);
}

TEST_CASE("the full theory check suite passes") {
  const auto checks = run_theory_checks(2026);
  for (const auto& c : checks) {
    INFO(c.name, " measured=", c.measured, " expected=", c.expected, " tol=", c.tolerance);
    CHECK(c.pass);
  }
}

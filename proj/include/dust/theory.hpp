#pragma once

// Numerical checks for the single-timeline failure mode and its resolution
// by dual timelines: Fisher-weighted optimum, the irreducible loss bound and
// its quadratic scaling, per-source gradient cosine analysis, the empirical
// pose tangent kernel, and decoupled gradient-flow integration.

#include <string>
#include <vector>

#include "dust/render.hpp"

namespace dust {

/// Constant-velocity motion during the capture offset. delta_tau is always
/// derived from the two capture times, never stored.
struct MotionSpec {
  Vec3 velocity = Vec3::Zero();  // m/s
  double tau_vehicle = 0.0;      // s
  double tau_infra = 0.0;        // s
  double anchor = 0.0;           // shared-timeline timestamp t_i

  double delta_tau() const { return tau_vehicle - tau_infra; }
  /// Ground-truth world offset of each source's target from the anchor-time
  /// position: mu*_c = mu*(t_i) + v (tau_c - t_i).
  Vec3 target_vehicle() const { return velocity * (tau_vehicle - anchor); }
  Vec3 target_infra() const { return velocity * (tau_infra - anchor); }
};

/// mu_dagger = (A_v + A_f)^-1 (A_v mu_v + A_f mu_f).
/// Throws when the summed Fisher matrix is numerically singular.
Vec3 single_timeline_optimum(const Mat3& a_v, const Mat3& a_f, const Vec3& mu_v, const Vec3& mu_f);

/// |dtau|^2 |v|^2 / 4 * sum(lambda_n).
double irreducible_bound(const MotionSpec& motion, const std::vector<double>& lambdas);

struct OptimalLoss {
  double loss = 0.0;
  Vec3 delta_vehicle = Vec3::Zero();  // residual at the optimum, vehicle side
  Vec3 delta_infra = Vec3::Zero();
};

/// Loss of one Gaussian at the shared-position optimum, with its residual
/// pair. Verifies delta_v - delta_f = -v dtau and loss >= bound - 1e-9.
OptimalLoss single_timeline_optimal_loss(const Mat3& a_v, const Mat3& a_f, const MotionSpec& motion);

struct GradientCosine {
  bool defined = false;  // false when either per-source gradient vanishes
  double value = 0.0;
};

/// Cosine between the two per-source gradients A_c (mu - mu*_c) evaluated at
/// the shared world position mu.
GradientCosine gradient_cosine(const Mat3& a_v, const Mat3& a_f, const MotionSpec& motion,
                               const Vec3& mu);

/// Empirical pose tangent kernel, partitioned by source.
struct NTKBlocks {
  Eigen::MatrixXd vv, ff, vf, fv;
  int rows_vehicle = 0, rows_infra = 0;
  TimelineMode mode = TimelineMode::dual;
};

struct SourceView {
  Camera camera;
  double t = 0.0;  // render/capture time
};

/// Central finite differences (h = 1e-5) of every pixel output with respect
/// to the pose keys queried at the render times. The probe is independent of
/// the analytic gradient code by construction. Render times must land on
/// trajectory keys (or clamp to an end key); degenerate scenes with no agent
/// pixels are rejected.
NTKBlocks empirical_ntk_pose(const SceneGraph& scene, const SourceView& vehicle,
                             const SourceView& infra, TimelineMode mode);

/// Additive canonical-mean component of the kernel, same finite-difference
/// probe over all agent canonical means. Shared parameters couple the
/// sources, so no block structure is claimed for it.
Eigen::MatrixXd empirical_ntk_canonical(const SceneGraph& scene, const SourceView& vehicle,
                                        const SourceView& infra);

struct FlowResult {
  std::vector<Eigen::VectorXd> r_vehicle;  // residual trajectory, step samples
  std::vector<Eigen::VectorXd> r_infra;
  bool unstable = false;  // residual norm grew during integration
};

/// Explicit-Euler integration of the decoupled residual flows
/// dr_c/dt = -Theta_cc r_c. Requires dual-timeline blocks and step > 0.
FlowResult gradient_flow(const NTKBlocks& blocks, const Eigen::VectorXd& r0_v,
                         const Eigen::VectorXd& r0_f, double duration, double step);

/// Integrates twice with the infrastructure start scaled by 10 and reports
/// whether the vehicle trajectory is bitwise unchanged.
bool flow_decoupled(const NTKBlocks& blocks, const Eigen::VectorXd& r0_v,
                    const Eigen::VectorXd& r0_f, double duration, double step);

/// One row of the verify-theory report.
struct TheoryCheck {
  std::string name;
  double measured = 0.0;
  double expected = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Fixed two-agent scene with one camera per source, used by the tangent
/// kernel and gradient-flow checks. Small images keep the kernel blocks
/// dense-friendly.
struct ToySetup {
  SceneGraph scene;
  SourceView vehicle;
  SourceView infra;
  MotionSpec motion;
  std::vector<double> anchors;
};

ToySetup make_toy_setup(int image_size = 20, double delta_tau = 0.1, double speed = 4.0);

/// Runs every check backing the verify-theory subcommand.
std::vector<TheoryCheck> run_theory_checks(uint64_t seed);

}  // namespace dust

#include "dust/theory.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "dust/rng.hpp"

namespace dust {

namespace {

double lambda_min_of(const Mat3& a) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(a);
  return es.eigenvalues().minCoeff();
}

}  // namespace

Vec3 single_timeline_optimum(const Mat3& a_v, const Mat3& a_f, const Vec3& mu_v, const Vec3& mu_f) {
  const Mat3 sum = a_v + a_f;
  if (lambda_min_of(sum) <= 1e-12)
    throw std::invalid_argument("single_timeline_optimum: summed Fisher matrix is singular");
  return sum.ldlt().solve(a_v * mu_v + a_f * mu_f);
}

double irreducible_bound(const MotionSpec& motion, const std::vector<double>& lambdas) {
  double sum = 0.0;
  for (double l : lambdas) {
    if (l < 0.0) throw std::invalid_argument("irreducible_bound: negative eigenvalue");
    sum += l;
  }
  const double dt = motion.delta_tau();
  return 0.25 * dt * dt * motion.velocity.squaredNorm() * sum;
}

OptimalLoss single_timeline_optimal_loss(const Mat3& a_v, const Mat3& a_f,
                                         const MotionSpec& motion) {
  const Mat3 sum = a_v + a_f;
  if (lambda_min_of(sum) <= 1e-12)
    throw std::invalid_argument("single_timeline_optimal_loss: summed Fisher matrix is singular");
  const Vec3 v_dt = motion.velocity * motion.delta_tau();
  const auto solver = sum.ldlt();
  OptimalLoss out;
  out.delta_vehicle = solver.solve(a_f * (-v_dt));
  out.delta_infra = solver.solve(a_v * v_dt);
  out.loss = 0.5 * out.delta_vehicle.dot(a_v * out.delta_vehicle) +
             0.5 * out.delta_infra.dot(a_f * out.delta_infra);

  if ((out.delta_vehicle - out.delta_infra + v_dt).norm() > 1e-9)
    throw std::logic_error("optimal residual pair violates the fixed-difference identity");
  const double bound =
      irreducible_bound(motion, {std::min(lambda_min_of(a_v), lambda_min_of(a_f))});
  if (out.loss < bound - 1e-9)
    throw std::logic_error("optimal loss fell below the irreducible bound");
  return out;
}

GradientCosine gradient_cosine(const Mat3& a_v, const Mat3& a_f, const MotionSpec& motion,
                               const Vec3& mu) {
  const Vec3 g_v = a_v * (mu - motion.target_vehicle());
  const Vec3 g_f = a_f * (mu - motion.target_infra());
  GradientCosine out;
  if (g_v.norm() <= 1e-12 || g_f.norm() <= 1e-12) return out;
  out.defined = true;
  out.value = g_v.dot(g_f) / (g_v.norm() * g_f.norm());
  return out;
}

namespace {

// Pose key a query at time t resolves to; requires t to clamp or to hit a
// key exactly (the probe perturbs whole keys, not interpolants).
int key_index_at(const PoseTrajectory& traj, double t) {
  traj.validate();
  if (t <= traj.keys.front().t) return 0;
  if (t >= traj.keys.back().t) return static_cast<int>(traj.keys.size()) - 1;
  for (size_t i = 0; i < traj.keys.size(); ++i)
    if (traj.keys[i].t == t) return static_cast<int>(i);
  throw std::invalid_argument("tangent kernel requires render times aligned with pose keys");
}

Eigen::VectorXd flatten(const ImageBuffer& img) {
  return Eigen::Map<const Eigen::VectorXd>(img.rgb.data(), img.rgb.size());
}

}  // namespace

NTKBlocks empirical_ntk_pose(const SceneGraph& scene, const SourceView& vehicle,
                             const SourceView& infra, TimelineMode mode) {
  if (mode != scene.timeline_mode)
    throw std::invalid_argument("empirical_ntk_pose: requested mode does not match the scene");
  const bool dual = mode == TimelineMode::dual;
  const int n_agents = static_cast<int>(scene.agents.size());
  if (n_agents == 0) throw std::invalid_argument("empirical_ntk_pose: scene has no agents");

  RenderOptions opt;
  opt.record_agent_mask = true;
  for (const auto& view : {std::pair{Source::vehicle, &vehicle}, std::pair{Source::infra, &infra}}) {
    const auto img = render(view.second->camera, world_gaussians(scene, view.first, view.second->t), opt);
    bool any = false;
    for (uint8_t m : img.mask) any = any || m != 0;
    if (!any)
      throw std::invalid_argument(std::string("empirical_ntk_pose: no agent pixels from ") +
                                  source_name(view.first));
  }

  const int params_per_agent = dual ? 12 : 6;
  const int n_params = params_per_agent * n_agents;
  const double h = 1e-5;

  auto render_pair = [&](const SceneGraph& s) {
    const auto iv = render(vehicle.camera, world_gaussians(s, Source::vehicle, vehicle.t));
    const auto fi = render(infra.camera, world_gaussians(s, Source::infra, infra.t));
    Eigen::VectorXd out(iv.rgb.size() + fi.rgb.size());
    out << flatten(iv), flatten(fi);
    return out;
  };

  const int rows_v = 3 * vehicle.camera.width * vehicle.camera.height;
  const int rows_f = 3 * infra.camera.width * infra.camera.height;
  Eigen::MatrixXd jac(rows_v + rows_f, n_params);

  for (int a = 0; a < n_agents; ++a) {
    const int n_timelines = dual ? 2 : 1;
    for (int tl = 0; tl < n_timelines; ++tl) {
      const bool is_vehicle_tl = tl == 0;
      auto traj_of = [&](SceneGraph& s) -> PoseTrajectory& {
        return is_vehicle_tl ? s.agents[a].trajectory_vehicle : s.agents[a].trajectory_infra;
      };
      const double query_t = dual ? (is_vehicle_tl ? vehicle.t : infra.t) : vehicle.t;
      SceneGraph probe = scene;
      const int key = key_index_at(traj_of(probe), query_t);
      const RigidTransform base = traj_of(probe).keys[key].pose;
      for (int k = 0; k < 6; ++k) {
        Vec6 tangent = Vec6::Zero();
        tangent(k) = h;
        traj_of(probe).keys[key].pose = se3_perturb(base, tangent);
        const Eigen::VectorXd plus = render_pair(probe);
        tangent(k) = -h;
        traj_of(probe).keys[key].pose = se3_perturb(base, tangent);
        const Eigen::VectorXd minus = render_pair(probe);
        traj_of(probe).keys[key].pose = base;
        jac.col(a * params_per_agent + tl * 6 + k) = (plus - minus) / (2.0 * h);
      }
    }
  }

  NTKBlocks blocks;
  blocks.mode = mode;
  blocks.rows_vehicle = rows_v;
  blocks.rows_infra = rows_f;
  const auto jv = jac.topRows(rows_v);
  const auto jf = jac.bottomRows(rows_f);
  blocks.vv = jv * jv.transpose();
  blocks.ff = jf * jf.transpose();
  blocks.vf = jv * jf.transpose();
  blocks.fv = blocks.vf.transpose();
  return blocks;
}

Eigen::MatrixXd empirical_ntk_canonical(const SceneGraph& scene, const SourceView& vehicle,
                                        const SourceView& infra) {
  int n_params = 0;
  for (const auto& a : scene.agents) n_params += 3 * static_cast<int>(a.canonical.size());
  if (n_params == 0) throw std::invalid_argument("empirical_ntk_canonical: scene has no agents");

  auto render_pair = [&](const SceneGraph& s) {
    const auto iv = render(vehicle.camera, world_gaussians(s, Source::vehicle, vehicle.t));
    const auto fi = render(infra.camera, world_gaussians(s, Source::infra, infra.t));
    Eigen::VectorXd out(iv.rgb.size() + fi.rgb.size());
    out << flatten(iv), flatten(fi);
    return out;
  };

  const double h = 1e-5;
  SceneGraph probe = scene;
  Eigen::MatrixXd jac(3 * (vehicle.camera.width * vehicle.camera.height +
                           infra.camera.width * infra.camera.height),
                      n_params);
  int col = 0;
  for (size_t a = 0; a < scene.agents.size(); ++a)
    for (size_t g = 0; g < scene.agents[a].canonical.size(); ++g)
      for (int k = 0; k < 3; ++k) {
        const double base = scene.agents[a].canonical[g].mean(k);
        probe.agents[a].canonical[g].mean(k) = base + h;
        const Eigen::VectorXd plus = render_pair(probe);
        probe.agents[a].canonical[g].mean(k) = base - h;
        const Eigen::VectorXd minus = render_pair(probe);
        probe.agents[a].canonical[g].mean(k) = base;
        jac.col(col++) = (plus - minus) / (2.0 * h);
      }
  return jac * jac.transpose();
}

FlowResult gradient_flow(const NTKBlocks& blocks, const Eigen::VectorXd& r0_v,
                         const Eigen::VectorXd& r0_f, double duration, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("gradient_flow: step must be positive");
  if (blocks.mode != TimelineMode::dual)
    throw std::invalid_argument("gradient_flow: requires dual-timeline blocks");
  if (r0_v.size() != blocks.vv.rows() || r0_f.size() != blocks.ff.rows())
    throw std::invalid_argument("gradient_flow: residual sizes do not match the blocks");

  FlowResult out;
  const int n_steps = static_cast<int>(std::llround(duration / step));
  auto integrate = [&](const Eigen::MatrixXd& theta, const Eigen::VectorXd& r0,
                       std::vector<Eigen::VectorXd>& traj) {
    Eigen::VectorXd r = r0;
    traj.push_back(r);
    const double scale = r0.norm();
    for (int i = 0; i < n_steps; ++i) {
      const double before = r.norm();
      r -= step * (theta * r);
      traj.push_back(r);
      if (r.norm() > before + 1e-12 * scale) out.unstable = true;
    }
  };
  integrate(blocks.vv, r0_v, out.r_vehicle);
  integrate(blocks.ff, r0_f, out.r_infra);
  return out;
}

bool flow_decoupled(const NTKBlocks& blocks, const Eigen::VectorXd& r0_v,
                    const Eigen::VectorXd& r0_f, double duration, double step) {
  const FlowResult a = gradient_flow(blocks, r0_v, r0_f, duration, step);
  const FlowResult b = gradient_flow(blocks, r0_v, (10.0 * r0_f).eval(), duration, step);
  if (a.r_vehicle.size() != b.r_vehicle.size()) return false;
  for (size_t i = 0; i < a.r_vehicle.size(); ++i)
    if (std::memcmp(a.r_vehicle[i].data(), b.r_vehicle[i].data(),
                    sizeof(double) * a.r_vehicle[i].size()) != 0)
      return false;
  return true;
}

ToySetup make_toy_setup(int image_size, double delta_tau, double speed) {
  ToySetup setup;
  setup.motion.velocity = Vec3(speed, 0.0, 0.0);
  setup.motion.tau_vehicle = 0.5 * delta_tau;
  setup.motion.tau_infra = -0.5 * delta_tau;
  setup.motion.anchor = 0.0;
  setup.anchors = {0.0};

  SceneGraph& scene = setup.scene;
  const Vec3 bg_color[] = {{0.3, 0.3, 0.35}, {0.35, 0.3, 0.3}, {0.3, 0.35, 0.3},
                           {0.4, 0.4, 0.3},  {0.3, 0.4, 0.4},  {0.4, 0.3, 0.4}};
  for (int i = 0; i < 6; ++i) {
    CanonicalGaussian g;
    g.mean = Vec3(-2.5 + i, (i % 2 == 0) ? 0.5 : -0.5, 0.0);
    g.covariance = 0.5 * 0.5 * Mat3::Identity();
    g.opacity = 0.6;
    g.color = bg_color[i];
    scene.background.push_back(g);
  }

  const Vec3 agent_offsets[] = {{-0.3, 0.0, 0.0}, {0.3, 0.0, 0.0}, {0.0, 0.2, 0.15}, {0.0, -0.2, 0.15}};
  const Vec3 agent_colors[] = {{0.9, 0.2, 0.15}, {0.15, 0.35, 0.9}};
  const Vec3 starts[] = {{-1.0, 0.0, 1.0}, {1.3, -0.6, 1.0}};
  for (int a = 0; a < 2; ++a) {
    AgentNode node;
    node.id = "agent" + std::to_string(a);
    for (const auto& off : agent_offsets) {
      CanonicalGaussian g;
      g.mean = off;
      g.covariance = 0.22 * 0.22 * Mat3::Identity();
      g.opacity = 0.85;
      g.color = agent_colors[a];
      node.canonical.push_back(g);
    }
    auto pose_at = [&](double t) {
      return RigidTransform{UnitQuaternion::identity(), starts[a] + setup.motion.velocity * t};
    };
    node.trajectory_vehicle.source = Source::vehicle;
    node.trajectory_vehicle.keys = {{setup.motion.tau_vehicle, pose_at(setup.motion.tau_vehicle)}};
    node.trajectory_infra.source = Source::infra;
    node.trajectory_infra.keys = {{setup.motion.tau_infra, pose_at(setup.motion.tau_infra)}};
    scene.agents.push_back(std::move(node));
  }
  scene.validate();

  const double focal = 1.1 * image_size;
  setup.vehicle = {make_look_at_camera({0.0, -8.0, 2.0}, {0.0, 0.0, 0.8}, {0, 0, 1}, focal,
                                       image_size, image_size),
                   setup.motion.tau_vehicle};
  setup.infra = {make_look_at_camera({1.0, 8.0, 4.0}, {0.0, 0.0, 0.8}, {0, 0, 1}, focal, image_size,
                                     image_size),
                 setup.motion.tau_infra};
  return setup;
}

namespace {

MotionSpec random_motion(Rng& rng, bool anchor_inside) {
  MotionSpec m;
  m.velocity = rng.uniform(1.0, 15.0) * rng.unit_vec3();
  const double dt = rng.uniform(0.01, 0.3);
  m.anchor = 0.0;
  if (anchor_inside) {
    const double w = rng.uniform(0.1, 0.9);
    m.tau_vehicle = dt * (1.0 - w);
    m.tau_infra = -dt * w;
  } else {
    m.tau_infra = rng.uniform(0.05, 0.2);  // both captures after the anchor
    m.tau_vehicle = m.tau_infra + dt;
  }
  return m;
}

double descent_loss(const Mat3& a_v, const Mat3& a_f, const MotionSpec& m, Rng& rng, Vec3* argmin) {
  const Vec3 tv = m.target_vehicle();
  const Vec3 tf = m.target_infra();
  auto loss = [&](const Vec3& mu) {
    const Vec3 dv = mu - tv, df = mu - tf;
    return 0.5 * dv.dot(a_v * dv) + 0.5 * df.dot(a_f * df);
  };
  Eigen::SelfAdjointEigenSolver<Mat3> es(a_v + a_f);
  const double lr = 0.9 / es.eigenvalues().maxCoeff();
  double best = std::numeric_limits<double>::infinity();
  for (int start = 0; start < 20; ++start) {
    Vec3 mu = rng.normal_vec3() * 2.0;
    for (int it = 0; it < 4000; ++it) mu -= lr * (a_v * (mu - tv) + a_f * (mu - tf));
    if (loss(mu) < best) {
      best = loss(mu);
      if (argmin) *argmin = mu;
    }
  }
  return best;
}

double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  const int n = static_cast<int>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    const double lx = std::log(xs[i]), ly = std::log(ys[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

TheoryCheck make_check(const std::string& name, double measured, double expected, double tol) {
  return {name, measured, expected, tol, std::abs(measured - expected) <= tol};
}

}  // namespace

std::vector<TheoryCheck> run_theory_checks(uint64_t seed) {
  std::vector<TheoryCheck> checks;
  Rng rng(seed);

  // Bound validity: minimized loss never falls below the bound.
  {
    double min_slack = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 100; ++i) {
      const Mat3 a_v = rng.random_spd(0.1, 5.0);
      const Mat3 a_f = rng.random_spd(0.1, 5.0);
      const MotionSpec m = random_motion(rng, true);
      const double lambda = std::min(lambda_min_of(a_v), lambda_min_of(a_f));
      const OptimalLoss ol = single_timeline_optimal_loss(a_v, a_f, m);
      min_slack = std::min(min_slack, ol.loss - irreducible_bound(m, {lambda}));
    }
    checks.push_back({"bound_validity_min_slack", min_slack, 0.0, 1e-9, min_slack >= -1e-9});
  }

  // Optimum matches a dense descent oracle.
  {
    double max_err = 0.0;
    for (int i = 0; i < 5; ++i) {
      const Mat3 a_v = rng.random_spd(0.2, 4.0);
      const Mat3 a_f = rng.random_spd(0.2, 4.0);
      const MotionSpec m = random_motion(rng, true);
      Vec3 numeric;
      descent_loss(a_v, a_f, m, rng, &numeric);
      const Vec3 closed = single_timeline_optimum(a_v, a_f, m.target_vehicle(), m.target_infra());
      max_err = std::max(max_err, (closed - numeric).norm());
    }
    checks.push_back(make_check("optimum_vs_descent_oracle", max_err, 0.0, 1e-6));
  }

  // Tightness for isotropic equal Fisher.
  {
    double max_rel = 0.0;
    for (int i = 0; i < 20; ++i) {
      const double lambda = rng.uniform(0.1, 5.0);
      const Mat3 a = lambda * Mat3::Identity();
      const MotionSpec m = random_motion(rng, true);
      const double bound = irreducible_bound(m, {lambda});
      const double loss = single_timeline_optimal_loss(a, a, m).loss;
      max_rel = std::max(max_rel, std::abs(loss - bound) / bound);
    }
    checks.push_back(make_check("bound_tightness_isotropic_rel", max_rel, 0.0, 1e-6));
  }

  // Quadratic scaling in dtau and in speed.
  {
    const Mat3 a_v = rng.random_spd(0.3, 3.0);
    const Mat3 a_f = rng.random_spd(0.3, 3.0);
    const Vec3 dir = rng.unit_vec3();
    std::vector<double> dts, losses;
    for (int i = 0; i < 8; ++i) {
      const double dt = 0.02 * std::pow(10.0, i / 7.0);
      MotionSpec m;
      m.velocity = 8.0 * dir;
      m.tau_vehicle = 0.5 * dt;
      m.tau_infra = -0.5 * dt;
      dts.push_back(dt);
      losses.push_back(single_timeline_optimal_loss(a_v, a_f, m).loss);
    }
    checks.push_back(make_check("quadratic_scaling_slope_dtau", loglog_slope(dts, losses), 2.0, 0.05));

    std::vector<double> speeds, losses_v;
    for (int i = 0; i < 8; ++i) {
      const double s = 1.0 * std::pow(10.0, i / 7.0);
      MotionSpec m;
      m.velocity = s * dir;
      m.tau_vehicle = 0.05;
      m.tau_infra = -0.05;
      speeds.push_back(s);
      losses_v.push_back(single_timeline_optimal_loss(a_v, a_f, m).loss);
    }
    checks.push_back(
        make_check("quadratic_scaling_slope_speed", loglog_slope(speeds, losses_v), 2.0, 0.05));
  }

  // Residual difference is parameter independent for any shared position.
  {
    double max_err = 0.0;
    for (int i = 0; i < 50; ++i) {
      const MotionSpec m = random_motion(rng, rng.uniform() < 0.5);
      const Vec3 mu = 3.0 * rng.normal_vec3();
      const Vec3 dv = mu - m.target_vehicle();
      const Vec3 df = mu - m.target_infra();
      max_err = std::max(max_err, (dv - df + m.velocity * m.delta_tau()).norm());
    }
    checks.push_back(make_check("residual_difference_identity", max_err, 0.0, 1e-9));
  }

  // Gradient anti-alignment at the worst-case anchor placement.
  {
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      const double lambda = rng.uniform(0.2, 4.0);
      const MotionSpec m = random_motion(rng, true);
      const auto gc =
          gradient_cosine(lambda * Mat3::Identity(), lambda * Mat3::Identity(), m, Vec3::Zero());
      if (!gc.defined) throw std::logic_error("anti-alignment case produced a zero gradient");
      worst = std::max(worst, std::abs(gc.value + 1.0));
    }
    checks.push_back(make_check("cosine_anchor_between_dev_from_minus1", worst, 0.0, 1e-9));
  }

  // Anchor outside the capture interval: the sign formula gives +1.
  {
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
      const double lambda = rng.uniform(0.2, 4.0);
      const MotionSpec m = random_motion(rng, false);
      const auto gc =
          gradient_cosine(lambda * Mat3::Identity(), lambda * Mat3::Identity(), m, Vec3::Zero());
      if (!gc.defined) throw std::logic_error("anchor-outside case produced a zero gradient");
      worst = std::max(worst, std::abs(gc.value - 1.0));
    }
    checks.push_back(make_check("cosine_anchor_outside_dev_from_plus1", worst, 0.0, 1e-9));
  }

  // Anisotropic cosine against a finite-difference gradient oracle.
  {
    double max_err = 0.0;
    const double h = 1e-6;
    for (int i = 0; i < 20; ++i) {
      const Mat3 a_v = rng.random_spd(0.2, 4.0);
      const Mat3 a_f = rng.random_spd(0.2, 4.0);
      const MotionSpec m = random_motion(rng, true);
      const Vec3 mu = rng.normal_vec3();
      auto loss_of = [](const Mat3& a, const Vec3& d) { return 0.5 * d.dot(a * d); };
      Vec3 gv, gf;
      for (int k = 0; k < 3; ++k) {
        Vec3 e = Vec3::Zero();
        e(k) = h;
        gv(k) = (loss_of(a_v, mu + e - m.target_vehicle()) -
                 loss_of(a_v, mu - e - m.target_vehicle())) /
                (2 * h);
        gf(k) =
            (loss_of(a_f, mu + e - m.target_infra()) - loss_of(a_f, mu - e - m.target_infra())) /
            (2 * h);
      }
      const double fd_cos = gv.dot(gf) / (gv.norm() * gf.norm());
      const auto gc = gradient_cosine(a_v, a_f, m, mu);
      if (gc.defined) max_err = std::max(max_err, std::abs(gc.value - fd_cos));
    }
    checks.push_back(make_check("cosine_vs_fd_oracle", max_err, 0.0, 1e-6));
  }

  // Canonical optima separation equals |v| |dtau| under any rotation.
  {
    double max_err = 0.0;
    for (int i = 0; i < 20; ++i) {
      const MotionSpec m = random_motion(rng, true);
      const Mat3 r = rng.random_rotation().to_matrix();
      const Vec3 t = rng.normal_vec3();
      const Vec3 canon_v = r.transpose() * (m.target_vehicle() - t);
      const Vec3 canon_f = r.transpose() * (m.target_infra() - t);
      max_err = std::max(
          max_err, std::abs((canon_v - canon_f).norm() - m.velocity.norm() * std::abs(m.delta_tau())));
    }
    checks.push_back(make_check("optima_separation_isometry", max_err, 0.0, 1e-9));
  }

  // Tangent kernel block structure on the toy scene.
  {
    const ToySetup toy = make_toy_setup();
    const NTKBlocks dust_blocks =
        empirical_ntk_pose(toy.scene, toy.vehicle, toy.infra, TimelineMode::dual);
    checks.push_back(
        make_check("ntk_dual_cross_block_frobenius", dust_blocks.vf.norm(), 0.0, 1e-8));

    const SceneGraph collapsed = collapse_to_single_timeline(toy.scene, toy.anchors);
    const NTKBlocks single_blocks =
        empirical_ntk_pose(collapsed, toy.vehicle, toy.infra, TimelineMode::single);
    const double cross = single_blocks.vf.norm();
    checks.push_back({"ntk_single_cross_block_frobenius", cross, 0.0, 0.0, cross > 1e-6});

    // Duplicated sources: identical views and timelines give identical blocks.
    SceneGraph dup = toy.scene;
    for (auto& agent : dup.agents) {
      agent.trajectory_infra = agent.trajectory_vehicle;
      agent.trajectory_infra.source = Source::infra;
    }
    const NTKBlocks dup_blocks = empirical_ntk_pose(dup, toy.vehicle, toy.vehicle, TimelineMode::dual);
    checks.push_back(
        make_check("ntk_duplicated_sources_vv_eq_ff", (dup_blocks.vv - dup_blocks.ff).norm(), 0.0, 0.0));

    // Decoupled flow on the measured blocks.
    Rng flow_rng(seed ^ 0x51ull);
    Eigen::VectorXd r0v(dust_blocks.vv.rows()), r0f(dust_blocks.ff.rows());
    for (int i = 0; i < r0v.size(); ++i) r0v(i) = flow_rng.normal();
    for (int i = 0; i < r0f.size(); ++i) r0f(i) = flow_rng.normal();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_v(dust_blocks.vv);
    const double step = 0.1 / std::max(1e-12, es_v.eigenvalues().maxCoeff());
    const bool decoupled = flow_decoupled(dust_blocks, r0v, r0f, 50.0 * step, step);
    checks.push_back({"flow_cross_source_bitwise_invariance", decoupled ? 1.0 : 0.0, 1.0, 0.0, decoupled});
  }

  // Scalar gradient flow against the closed-form exponential.
  {
    NTKBlocks blocks;
    blocks.mode = TimelineMode::dual;
    const double lambda = 2.0;
    blocks.vv = lambda * Eigen::MatrixXd::Identity(4, 4);
    blocks.ff = 0.7 * Eigen::MatrixXd::Identity(3, 3);
    const double step = 1e-3, duration = 1.0;
    Eigen::VectorXd r0v(4), r0f(3);
    r0v << 1.0, -0.5, 0.25, 2.0;
    r0f.setZero();
    const FlowResult fr = gradient_flow(blocks, r0v, r0f, duration, step);
    const double err =
        (fr.r_vehicle.back() - std::exp(-lambda * duration) * r0v).norm() / r0v.norm();
    checks.push_back(make_check("flow_scalar_vs_exponential_rel", err, 0.0, 5.0 * step * lambda));
    checks.push_back(make_check("flow_zero_start_stays_zero", fr.r_infra.back().norm(), 0.0, 0.0));
    checks.push_back({"flow_stability_flag_clear", fr.unstable ? 1.0 : 0.0, 0.0, 0.0, !fr.unstable});
  }

  // Dual-timeline zero-loss witness on the toy scene.
  {
    const ToySetup toy = make_toy_setup();
    auto l2 = [](const ImageBuffer& a, const ImageBuffer& b) {
      double s = 0.0;
      for (size_t i = 0; i < a.rgb.size(); ++i) {
        const double d = a.rgb[i] - b.rgb[i];
        s += 0.5 * d * d;
      }
      return s;
    };
    const auto tv = render(toy.vehicle.camera, world_gaussians(toy.scene, Source::vehicle, toy.vehicle.t));
    const auto ti = render(toy.infra.camera, world_gaussians(toy.scene, Source::infra, toy.infra.t));
    const auto rv = render(toy.vehicle.camera, world_gaussians(toy.scene, Source::vehicle, toy.vehicle.t));
    const auto ri = render(toy.infra.camera, world_gaussians(toy.scene, Source::infra, toy.infra.t));
    checks.push_back(make_check("dual_timeline_zero_loss_witness", l2(rv, tv) + l2(ri, ti), 0.0, 1e-10));
  }

  // Aggregated Fisher information reaches full rank on a moving track.
  {
    SceneGraph scene;
    AgentNode node;
    node.id = "agent0";
    CanonicalGaussian g;
    g.mean = Vec3::Zero();
    g.covariance = 0.25 * 0.25 * Mat3::Identity();
    g.opacity = 0.9;
    g.color = Vec3(0.8, 0.3, 0.2);
    node.canonical.push_back(g);
    node.trajectory_vehicle.source = Source::vehicle;
    node.trajectory_infra.source = Source::infra;
    for (int i = 0; i < 3; ++i) {
      const double t = -0.4 + 0.4 * i;
      const RigidTransform pose{UnitQuaternion::identity(), Vec3(-1.5 + 2.0 * t, 0.0, 1.0)};
      node.trajectory_vehicle.keys.push_back({t, pose});
      node.trajectory_infra.keys.push_back({t, pose});
    }
    scene.agents.push_back(node);
    const Camera cam = make_look_at_camera({0, -6, 2}, {0, 0, 1}, {0, 0, 1}, 24.0, 24, 24);
    std::vector<FisherObservation> obs;
    for (int i = 0; i < 3; ++i) obs.push_back({cam, -0.4 + 0.4 * i});
    const FisherMatrix fm = fisher_accumulate(scene, Source::vehicle, obs, 0, 0);
    checks.push_back(
        {"fisher_multiframe_lambda_min_positive", fm.lambda_min, 0.0, 0.0, fm.lambda_min > 0.0});
  }

  return checks;
}

}  // namespace dust

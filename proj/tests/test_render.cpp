#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <set>

#include "dust/render.hpp"
#include "dust/rng.hpp"

using namespace dust;

namespace {

Camera axis_camera(double focal = 40.0, int size = 32) {
  Camera cam;
  cam.fx = cam.fy = focal;
  cam.cx = size / 2.0;
  cam.cy = size / 2.0;
  cam.width = cam.height = size;
  cam.world_to_camera = RigidTransform::identity();  // camera at origin, +z forward
  return cam;
}

WorldGaussian world_gaussian(const Vec3& mean, double sigma, double opacity, const Vec3& color,
                             int ordinal = 0) {
  WorldGaussian g;
  g.mean = mean;
  g.covariance = sigma * sigma * Mat3::Identity();
  g.opacity = opacity;
  g.color = color;
  g.ordinal = ordinal;
  g.gaussian_index = ordinal;
  return g;
}

double squared_loss(const ImageBuffer& a, const ImageBuffer& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = a.rgb[i] - b.rgb[i];
    s += 0.5 * d * d;
  }
  return s;
}

ImageBuffer residual_of(const ImageBuffer& rendered, const ImageBuffer& target) {
  ImageBuffer r(rendered.width, rendered.height);
  for (size_t i = 0; i < r.rgb.size(); ++i) r.rgb[i] = rendered.rgb[i] - target.rgb[i];
  return r;
}

// truncated support pixels; used to rule out cutoff crossings in FD probes
std::set<std::pair<int, int>> support_set(const Camera& cam, const WorldGaussian& g) {
  std::set<std::pair<int, int>> out;
  const auto f = project(cam, g);
  if (!f) return out;
  for (int y = f->y0; y <= f->y1; ++y)
    for (int x = f->x0; x <= f->x1; ++x) {
      const Vec2 q(x + 0.5 - f->mean2d.x(), y + 0.5 - f->mean2d.y());
      if (q.dot(f->cov2d_inv * q) <= kKernelRadius * kKernelRadius) out.insert({x, y});
    }
  return out;
}

}  // namespace

TEST_CASE("projection centers an on-axis gaussian at the principal point") {
  const Camera cam = axis_camera();
  const auto f = project(cam, world_gaussian(Vec3(0, 0, 5), 0.1, 0.8, Vec3::Ones()));
  REQUIRE(f.has_value());
  CHECK(f->mean2d.x() == doctest::Approx(cam.cx).epsilon(1e-12));
  CHECK(f->mean2d.y() == doctest::Approx(cam.cy).epsilon(1e-12));
  CHECK(f->camera_depth == doctest::Approx(5.0));
}

TEST_CASE("on-axis isotropic footprint is (f sigma / d)^2 before the floor") {
  const Camera cam = axis_camera(50.0);
  const double sigma = 0.2, depth = 4.0;
  const auto f = project(cam, world_gaussian(Vec3(0, 0, depth), sigma, 0.8, Vec3::Ones()));
  REQUIRE(f.has_value());
  const double expected = (50.0 * sigma / depth) * (50.0 * sigma / depth);
  const Mat2 raw = f->cov2d - kLowpassFloor * Mat2::Identity();
  CHECK(raw(0, 0) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(raw(1, 1) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(std::abs(raw(0, 1)) <= 1e-12);
}

TEST_CASE("projection jacobian matches numeric differentiation") {
  Rng rng(41);
  Camera cam = axis_camera(45.0);
  cam.world_to_camera = {UnitQuaternion::from_axis_angle(rng.unit_vec3(), 0.25),
                         Vec3(0.2, -0.1, 0.3)};
  WorldGaussian g = world_gaussian(Vec3(0.4, -0.3, 6.0), 0.15, 0.7, Vec3::Ones());
  const auto f = project(cam, g);
  REQUIRE(f.has_value());
  const double h = 1e-6;
  for (int k = 0; k < 3; ++k) {
    WorldGaussian gp = g, gm = g;
    gp.mean(k) += h;
    gm.mean(k) -= h;
    const Vec2 numeric = (project(cam, gp)->mean2d - project(cam, gm)->mean2d) / (2 * h);
    CHECK((f->proj_jacobian.col(k) - numeric).norm() <= 1e-6);
  }
}

TEST_CASE("gaussians behind the near plane are culled") {
  const Camera cam = axis_camera();
  CHECK_FALSE(project(cam, world_gaussian(Vec3(0, 0, -1), 0.1, 0.5, Vec3::Ones())).has_value());
  CHECK_FALSE(project(cam, world_gaussian(Vec3(0, 0, 0.0), 0.1, 0.5, Vec3::Ones())).has_value());
}

TEST_CASE("empty scene renders black") {
  const ImageBuffer img = render(axis_camera(), {});
  for (double v : img.rgb) CHECK(v == 0.0);
}

TEST_CASE("single near-opaque gaussian composites to alpha times color") {
  const Camera cam = axis_camera(40.0, 32);
  // place the projected mean exactly on the (16,16) pixel center
  const double depth = 5.0;
  const double off = 0.5 * depth / 40.0;
  const double alpha = 0.95;
  const auto img =
      render(cam, {world_gaussian(Vec3(off, off, depth), 0.3, alpha, Vec3(0.8, 0.5, 0.2))});
  CHECK(img.at(16, 16, 0) == doctest::Approx(alpha * 0.8).epsilon(1e-12));
  CHECK(img.at(16, 16, 1) == doctest::Approx(alpha * 0.5).epsilon(1e-12));
  CHECK(img.at(16, 16, 2) == doctest::Approx(alpha * 0.2).epsilon(1e-12));
}

TEST_CASE("two coincident footprints composite front to back") {
  const Camera cam = axis_camera(40.0, 32);
  const double off_near = 0.5 * 4.0 / 40.0;
  const double off_far = 0.5 * 8.0 / 40.0;
  const auto red = world_gaussian(Vec3(off_near, off_near, 4.0), 0.3, 0.5, Vec3(1, 0, 0), 0);
  const auto blue = world_gaussian(Vec3(off_far, off_far, 8.0), 0.6, 0.5, Vec3(0, 0, 1), 1);
  const auto img = render(cam, {blue, red});  // input order must not matter
  // hand evaluation with kernel value 1 at the shared center pixel:
  // red contributes 0.5, blue 0.5 * (1 - 0.5) = 0.25
  CHECK(img.at(16, 16, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(img.at(16, 16, 1) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(img.at(16, 16, 2) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("rendering is invariant to input permutation and thread count") {
  Rng rng(47);
  std::vector<WorldGaussian> gaussians;
  for (int i = 0; i < 20; ++i) {
    WorldGaussian g = world_gaussian(Vec3(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5),
                                          rng.uniform(3.0, 9.0)),
                                     rng.uniform(0.1, 0.4), rng.uniform(0.3, 0.9),
                                     Vec3(rng.uniform(), rng.uniform(), rng.uniform()), i);
    gaussians.push_back(g);
  }
  const Camera cam = axis_camera(40.0, 48);
  const ImageBuffer a = render(cam, gaussians);

  std::vector<WorldGaussian> shuffled = gaussians;
  std::reverse(shuffled.begin(), shuffled.end());
  const ImageBuffer b = render(cam, shuffled);
  CHECK(std::memcmp(a.rgb.data(), b.rgb.data(), a.rgb.size() * sizeof(double)) == 0);

  RenderOptions opt;
  opt.threads = 4;
  const ImageBuffer c = render(cam, gaussians, opt);
  CHECK(std::memcmp(a.rgb.data(), c.rgb.data(), a.rgb.size() * sizeof(double)) == 0);
}

namespace {

// fixed three-gaussian scene with well-separated footprints
std::vector<WorldGaussian> separated_scene() {
  return {world_gaussian(Vec3(-1.2, 0.25, 5.2), 0.22, 0.8, Vec3(0.9, 0.3, 0.2), 0),
          world_gaussian(Vec3(1.1, -0.15, 6.1), 0.25, 0.6, Vec3(0.2, 0.7, 0.4), 1),
          world_gaussian(Vec3(0.1, 1.3, 4.6), 0.2, 0.7, Vec3(0.3, 0.4, 0.9), 2)};
}

std::vector<WorldGaussian> overlapping_scene() {
  return {world_gaussian(Vec3(-0.1, 0.07, 5.0), 0.3, 0.55, Vec3(0.9, 0.3, 0.2), 0),
          world_gaussian(Vec3(0.15, -0.05, 6.0), 0.35, 0.6, Vec3(0.2, 0.7, 0.4), 1),
          world_gaussian(Vec3(0.02, 0.18, 7.2), 0.4, 0.7, Vec3(0.3, 0.4, 0.9), 2)};
}

ImageBuffer shifted_target(const Camera& cam, std::vector<WorldGaussian> gaussians) {
  for (auto& g : gaussians) g.mean += Vec3(0.05, -0.04, 0.06);
  return render(cam, gaussians);
}

void check_mean_gradients(const std::vector<WorldGaussian>& gaussians, double tolerance) {
  const Camera cam = axis_camera(40.0, 48);
  const ImageBuffer target = shifted_target(cam, gaussians);
  const ImageBuffer rendered = render(cam, gaussians);
  const ImageBuffer res = residual_of(rendered, target);
  const RenderGrads grads = render_backward(cam, gaussians, res);

  const double h = 1e-4;
  for (size_t n = 0; n < gaussians.size(); ++n) {
    for (int k = 0; k < 3; ++k) {
      auto plus = gaussians, minus = gaussians;
      plus[n].mean(k) += h;
      minus[n].mean(k) -= h;
      // no support pixel may cross the truncation cutoff inside the probe
      REQUIRE(support_set(cam, plus[n]) == support_set(cam, minus[n]));
      const double fd =
          (squared_loss(render(cam, plus), target) - squared_loss(render(cam, minus), target)) /
          (2 * h);
      const double an = grads.d_mean[n](k);
      if (std::abs(an) > 1e-8)
        CHECK(std::abs(fd - an) / std::abs(an) <= tolerance);
    }
  }
}

}  // namespace

TEST_CASE("a displaced gaussian is pulled back toward its target") {
  const Camera cam = axis_camera(40.0, 48);
  const std::vector<WorldGaussian> truth = {
      world_gaussian(Vec3(0.0, 0.1, 5.0), 0.25, 0.8, Vec3(0.9, 0.4, 0.2))};
  const ImageBuffer target = render(cam, truth);

  // 1D sweep: the loss grows with displacement, the gradient points back
  double prev_loss = 0.0;
  for (double dx : {0.05, 0.1, 0.2}) {
    auto moved = truth;
    moved[0].mean.x() += dx;
    const ImageBuffer rendered = render(cam, moved);
    const double loss = squared_loss(rendered, target);
    CHECK(loss > prev_loss);
    prev_loss = loss;
    const RenderGrads g = render_backward(cam, moved, residual_of(rendered, target));
    CHECK(g.d_mean[0].x() > 0.0);  // descent direction is back toward -x
  }
}

TEST_CASE("zero residual produces zero gradients") {
  const Camera cam = axis_camera(40.0, 48);
  const auto gaussians = separated_scene();
  const ImageBuffer zero(cam.width, cam.height);
  const RenderGrads g = render_backward(cam, gaussians, zero);
  for (const auto& v : g.d_mean) CHECK(v.norm() == 0.0);
  for (const auto& v : g.d_color) CHECK(v.norm() == 0.0);
}

TEST_CASE("mean gradients match finite differences without overlaps") {
  check_mean_gradients(separated_scene(), 1e-6);
}

TEST_CASE("mean gradients match finite differences with overlaps") {
  check_mean_gradients(overlapping_scene(), 1e-3);
}

TEST_CASE("opacity color and covariance gradients match finite differences") {
  const Camera cam = axis_camera(40.0, 48);
  auto gaussians = overlapping_scene();
  const ImageBuffer target = shifted_target(cam, gaussians);
  const ImageBuffer res = residual_of(render(cam, gaussians), target);
  const RenderGrads grads = render_backward(cam, gaussians, res);

  const double h = 1e-5;
  for (size_t n = 0; n < gaussians.size(); ++n) {
    {
      auto plus = gaussians, minus = gaussians;
      plus[n].opacity += h;
      minus[n].opacity -= h;
      const double fd =
          (squared_loss(render(cam, plus), target) - squared_loss(render(cam, minus), target)) /
          (2 * h);
      CHECK(std::abs(fd - grads.d_opacity[n]) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
    for (int c = 0; c < 3; ++c) {
      auto plus = gaussians, minus = gaussians;
      plus[n].color(c) += h;
      minus[n].color(c) -= h;
      const double fd =
          (squared_loss(render(cam, plus), target) - squared_loss(render(cam, minus), target)) /
          (2 * h);
      CHECK(std::abs(fd - grads.d_color[n](c)) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        auto plus = gaussians, minus = gaussians;
        plus[n].covariance(r, c) += h;
        plus[n].covariance(c, r) = plus[n].covariance(r, c);
        minus[n].covariance(r, c) -= h;
        minus[n].covariance(c, r) = minus[n].covariance(r, c);
        const double fd =
            (squared_loss(render(cam, plus), target) - squared_loss(render(cam, minus), target)) /
            (2 * h);
        // symmetric perturbation touches (r,c) and (c,r) together
        const double an = r == c ? grads.d_cov[n](r, c)
                                 : grads.d_cov[n](r, c) + grads.d_cov[n](c, r);
        CHECK(std::abs(fd - an) <= 2e-5 * std::max(1.0, std::abs(fd)));
      }
  }
}

namespace {

SceneGraph fd_scene(bool rotated_pose) {
  SceneGraph scene;
  AgentNode agent;
  agent.id = "agent0";
  for (const auto& mean :
       {Vec3(-0.55, 0.12, 0.0), Vec3(0.5, -0.1, 0.05), Vec3(0.05, 0.5, -0.1)}) {
    CanonicalGaussian g;
    g.mean = mean;
    g.covariance = 0.22 * 0.22 * Mat3::Identity();
    g.covariance(0, 0) *= 1.4;  // anisotropic: exercises the covariance path
    g.opacity = 0.75;
    g.color = Vec3(0.8, 0.45, 0.25);
    agent.canonical.push_back(g);
  }
  const UnitQuaternion rot =
      rotated_pose ? UnitQuaternion::from_axis_angle(Vec3(0.3, 1.0, 0.2), 0.6)
                   : UnitQuaternion::identity();
  agent.trajectory_vehicle.keys = {{0.0, {rot, Vec3(0.1, -0.05, 5.4)}}};
  agent.trajectory_infra.source = Source::infra;
  agent.trajectory_infra.keys = {{0.0, {rot, Vec3(0.4, 0.2, 6.0)}}};
  scene.agents.push_back(agent);
  return scene;
}

}  // namespace

TEST_CASE("canonical mean gradients include the pose rotation chain") {
  const Camera cam = axis_camera(40.0, 48);
  SceneGraph scene = fd_scene(true);
  const auto base = world_gaussians(scene, Source::vehicle, 0.0);
  const ImageBuffer target = shifted_target(cam, base);
  const ImageBuffer res = residual_of(render(cam, base), target);
  const auto grads = grad_canonical_means(cam, scene, Source::vehicle, 0.0, res);

  const double h = 1e-4;
  for (size_t n = 0; n < base.size(); ++n)
    for (int k = 0; k < 3; ++k) {
      SceneGraph plus = scene, minus = scene;
      plus.agents[0].canonical[n].mean(k) += h;
      minus.agents[0].canonical[n].mean(k) -= h;
      const double fd = (squared_loss(render(cam, world_gaussians(plus, Source::vehicle, 0.0)),
                                      target) -
                         squared_loss(render(cam, world_gaussians(minus, Source::vehicle, 0.0)),
                                      target)) /
                        (2 * h);
      const double an = grads[n](k);
      if (std::abs(an) > 1e-8) CHECK(std::abs(fd - an) / std::abs(an) <= 2e-4);
    }
}

TEST_CASE("pose gradients match finite differences over the tangent") {
  const Camera cam = axis_camera(40.0, 48);
  SceneGraph scene = fd_scene(true);
  const auto base = world_gaussians(scene, Source::vehicle, 0.0);
  const ImageBuffer target = shifted_target(cam, base);
  const ImageBuffer res = residual_of(render(cam, base), target);
  const Vec6 grad = grad_pose(cam, scene, 0, Source::vehicle, Source::vehicle, 0.0, res);

  const double h = 1e-4;
  for (int k = 0; k < 6; ++k) {
    Vec6 tangent = Vec6::Zero();
    tangent(k) = h;
    SceneGraph plus = scene, minus = scene;
    plus.agents[0].trajectory_vehicle.keys[0].pose =
        se3_perturb(scene.agents[0].trajectory_vehicle.keys[0].pose, tangent);
    tangent(k) = -h;
    minus.agents[0].trajectory_vehicle.keys[0].pose =
        se3_perturb(scene.agents[0].trajectory_vehicle.keys[0].pose, tangent);
    const double fd =
        (squared_loss(render(cam, world_gaussians(plus, Source::vehicle, 0.0)), target) -
         squared_loss(render(cam, world_gaussians(minus, Source::vehicle, 0.0)), target)) /
        (2 * h);
    if (std::abs(grad(k)) > 1e-8) CHECK(std::abs(fd - grad(k)) / std::abs(grad(k)) <= 1e-3);
  }
}

TEST_CASE("the other source's trajectory receives an exact zero gradient") {
  const Camera cam = axis_camera(40.0, 48);
  SceneGraph scene = fd_scene(false);
  const auto base = world_gaussians(scene, Source::vehicle, 0.0);
  ImageBuffer res(cam.width, cam.height);
  for (auto& v : res.rgb) v = 0.31;  // arbitrary residual
  const Vec6 cross = grad_pose(cam, scene, 0, Source::vehicle, Source::infra, 0.0, res);
  CHECK(cross.norm() == 0.0);
}

TEST_CASE("influence vanishes at the projected center and scales with color") {
  const Camera cam = axis_camera(40.0, 32);
  const double off = 0.5 * 5.0 / 40.0;  // lands on the (16,16) pixel center
  auto g = world_gaussian(Vec3(off, off, 5.0), 0.3, 0.8, Vec3(0.5, 0.25, 0.1));
  const auto samples = influence_vectors(cam, {g}, 0);
  REQUIRE_FALSE(samples.empty());
  double center_norm = -1.0;
  for (const auto& s : samples)
    if (s.pixel.x() == 16.5 && s.pixel.y() == 16.5 && s.channel == 0) center_norm = s.phi.norm();
  CHECK(center_norm == 0.0);

  auto doubled = g;
  doubled.color *= 2.0;
  const auto samples2 = influence_vectors(cam, {doubled}, 0);
  REQUIRE(samples2.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i)
    CHECK((samples2[i].phi - 2.0 * samples[i].phi).norm() <= 1e-12);
}

TEST_CASE("influence at one pixel offset matches the hand-evaluated formula") {
  const Camera cam = axis_camera(40.0, 32);
  const double off = 0.5 * 5.0 / 40.0;
  const double alpha = 0.8, c0 = 0.5;
  auto g = world_gaussian(Vec3(off, off, 5.0), 0.3, alpha, Vec3(c0, 0.0, 0.0));
  const auto f = project(cam, g);
  REQUIRE(f.has_value());

  const Vec2 q(1.0, 0.0);  // pixel one column right of the center
  const double m2 = q.dot(f->cov2d_inv * q);
  const double kernel = std::exp(-0.5 * m2);
  const Vec3 expected = f->proj_jacobian.transpose() * (f->cov2d_inv * q) * (alpha * c0 * kernel);

  const auto samples = influence_vectors(cam, {g}, 0);
  bool found = false;
  for (const auto& s : samples)
    if (s.pixel.x() == 17.5 && s.pixel.y() == 16.5 && s.channel == 0) {
      found = true;
      CHECK((s.phi - expected).norm() <= 1e-12);
      CHECK(s.blend_weight == doctest::Approx(alpha).epsilon(1e-12));
      CHECK(s.kernel_value == doctest::Approx(kernel).epsilon(1e-12));
    }
  CHECK(found);
}

TEST_CASE("fisher matrix: invisible gaussians, PSD, and the enumeration oracle") {
  const Camera cam = axis_camera(40.0, 32);
  const auto behind = world_gaussian(Vec3(0, 0, -3), 0.2, 0.8, Vec3::Ones());
  const FisherMatrix invisible = fisher_matrix(cam, {behind}, 0);
  CHECK_FALSE(invisible.visible);
  CHECK(invisible.a.norm() == 0.0);

  const auto gaussians = overlapping_scene();
  const FisherMatrix fm = fisher_matrix(cam, gaussians, 1);
  REQUIRE(fm.visible);
  Rng rng(53);
  for (int i = 0; i < 100; ++i) {
    const Vec3 x = rng.normal_vec3();
    CHECK(x.dot(fm.a * x) >= -1e-10);
  }

  Mat3 brute = Mat3::Zero();
  for (const auto& s : influence_vectors(cam, gaussians, 1)) brute += s.phi * s.phi.transpose();
  CHECK((fm.a - brute).norm() <= 1e-12);
}

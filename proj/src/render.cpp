#include "dust/render.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace dust {

void Camera::validate() const {
  if (!(fx > 0.0 && fy > 0.0)) throw std::invalid_argument("camera focal lengths must be positive");
  if (width < 1 || height < 1) throw std::invalid_argument("camera image size must be >= 1");
}

Camera make_look_at_camera(const Vec3& eye, const Vec3& target, const Vec3& up, double focal_px,
                           int width, int height) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-9) throw std::invalid_argument("look-at: up is parallel to the view axis");
  right.normalize();
  const Vec3 down = forward.cross(right);
  Mat3 r_wc;
  r_wc.row(0) = right.transpose();
  r_wc.row(1) = down.transpose();
  r_wc.row(2) = forward.transpose();
  Camera cam;
  cam.fx = cam.fy = focal_px;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.width = width;
  cam.height = height;
  cam.world_to_camera = {UnitQuaternion::from_matrix(r_wc), -(r_wc * eye)};
  return cam;
}

std::optional<SplatFootprint> project(const Camera& camera, const WorldGaussian& g) {
  camera.validate();
  const Mat3 r_wc = camera.world_to_camera.rotation_matrix();
  const Vec3 p = r_wc * g.mean + camera.world_to_camera.translation;
  if (p.z() <= kNearPlane) return std::nullopt;

  SplatFootprint f;
  f.p_cam = p;
  f.camera_depth = p.z();
  const double iz = 1.0 / p.z();
  f.mean2d = Vec2(camera.fx * p.x() * iz + camera.cx, camera.fy * p.y() * iz + camera.cy);

  Eigen::Matrix<double, 2, 3> jpin;
  jpin << camera.fx * iz, 0.0, -camera.fx * p.x() * iz * iz,
          0.0, camera.fy * iz, -camera.fy * p.y() * iz * iz;
  f.proj_jacobian = jpin * r_wc;

  const Mat3 cov_cam = r_wc * g.covariance * r_wc.transpose();
  f.cov2d = jpin * cov_cam * jpin.transpose() + kLowpassFloor * Mat2::Identity();
  f.cov2d_inv = f.cov2d.inverse();

  // axis-aligned bound of the radius-3 ellipse, in pixel-center index space
  const double rx = kKernelRadius * std::sqrt(f.cov2d(0, 0));
  const double ry = kKernelRadius * std::sqrt(f.cov2d(1, 1));
  f.x0 = std::max(0, static_cast<int>(std::ceil(f.mean2d.x() - rx - 0.5)));
  f.x1 = std::min(camera.width - 1, static_cast<int>(std::floor(f.mean2d.x() + rx - 0.5)));
  f.y0 = std::max(0, static_cast<int>(std::ceil(f.mean2d.y() - ry - 0.5)));
  f.y1 = std::min(camera.height - 1, static_cast<int>(std::floor(f.mean2d.y() + ry - 0.5)));
  return f;
}

namespace {

struct Prepared {
  std::vector<SplatFootprint> footprints;  // only kept splats
  std::vector<int> input_index;            // footprint -> index into input list
  // footprints are depth-sorted, ties broken by WorldGaussian::ordinal
};

Prepared prepare(const Camera& camera, const std::vector<WorldGaussian>& gaussians) {
  Prepared prep;
  for (size_t i = 0; i < gaussians.size(); ++i) {
    auto f = project(camera, gaussians[i]);
    if (!f || !f->has_support()) continue;
    prep.footprints.push_back(*f);
    prep.input_index.push_back(static_cast<int>(i));
  }
  std::vector<int> order(prep.footprints.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double da = prep.footprints[a].camera_depth, db = prep.footprints[b].camera_depth;
    if (da != db) return da < db;
    return gaussians[prep.input_index[a]].ordinal < gaussians[prep.input_index[b]].ordinal;
  });
  Prepared sorted;
  sorted.footprints.reserve(order.size());
  sorted.input_index.reserve(order.size());
  for (int k : order) {
    sorted.footprints.push_back(prep.footprints[k]);
    sorted.input_index.push_back(prep.input_index[k]);
  }
  return sorted;
}

inline double kernel_at(const SplatFootprint& f, double px, double py) {
  const Vec2 q(px - f.mean2d.x(), py - f.mean2d.y());
  const double m2 = q.dot(f.cov2d_inv * q);
  if (m2 > kKernelRadius * kKernelRadius) return 0.0;
  return std::exp(-0.5 * m2);
}

void render_rows(const Camera& camera, const std::vector<WorldGaussian>& gaussians,
                 const Prepared& prep, bool record_mask, int y_begin, int y_end, ImageBuffer& out) {
  std::vector<double> transmittance(camera.width);
  std::vector<int8_t> mask_row(camera.width);
  for (int y = y_begin; y < y_end; ++y) {
    std::fill(transmittance.begin(), transmittance.end(), 1.0);
    std::fill(mask_row.begin(), mask_row.end(), -1);
    const double py = y + 0.5;
    for (size_t s = 0; s < prep.footprints.size(); ++s) {
      const auto& f = prep.footprints[s];
      if (y < f.y0 || y > f.y1) continue;
      const auto& g = gaussians[prep.input_index[s]];
      for (int x = f.x0; x <= f.x1; ++x) {
        const double gv = kernel_at(f, x + 0.5, py);
        if (gv == 0.0) continue;
        const double a = std::min(kAlphaCap, g.opacity * gv);
        const double w = transmittance[x] * a;
        out.at(x, y, 0) += w * g.color.x();
        out.at(x, y, 1) += w * g.color.y();
        out.at(x, y, 2) += w * g.color.z();
        if (record_mask && mask_row[x] < 0 && a > kMaskAlphaMin)
          mask_row[x] = g.agent_index >= 0 ? 1 : 0;
        transmittance[x] *= 1.0 - a;
      }
    }
    if (record_mask)
      for (int x = 0; x < camera.width; ++x)
        out.mask[static_cast<size_t>(y) * camera.width + x] = mask_row[x] == 1 ? 1 : 0;
  }
}

}  // namespace

ImageBuffer render(const Camera& camera, const std::vector<WorldGaussian>& gaussians,
                   const RenderOptions& options) {
  camera.validate();
  ImageBuffer out(camera.width, camera.height);
  if (options.record_agent_mask) out.mask.assign(out.pixel_count(), 0);
  const Prepared prep = prepare(camera, gaussians);
  const int threads = std::max(1, options.threads);
  if (threads == 1 || camera.height < 2 * threads) {
    render_rows(camera, gaussians, prep, options.record_agent_mask, 0, camera.height, out);
    return out;
  }
  std::vector<std::thread> pool;
  const int rows_per = (camera.height + threads - 1) / threads;
  for (int k = 0; k < threads; ++k) {
    const int b = k * rows_per;
    const int e = std::min(camera.height, b + rows_per);
    if (b >= e) break;
    pool.emplace_back([&, b, e] {
      render_rows(camera, gaussians, prep, options.record_agent_mask, b, e, out);
    });
  }
  for (auto& t : pool) t.join();
  return out;
}

RenderGrads render_backward(const Camera& camera, const std::vector<WorldGaussian>& gaussians,
                            const ImageBuffer& upstream) {
  camera.validate();
  if (upstream.width != camera.width || upstream.height != camera.height)
    throw std::invalid_argument("upstream image dimensions do not match the camera");

  RenderGrads grads;
  grads.d_mean.assign(gaussians.size(), Vec3::Zero());
  grads.d_cov.assign(gaussians.size(), Mat3::Zero());
  grads.d_opacity.assign(gaussians.size(), 0.0);
  grads.d_color.assign(gaussians.size(), Vec3::Zero());

  const Prepared prep = prepare(camera, gaussians);
  const size_t n_splats = prep.footprints.size();
  if (n_splats == 0) return grads;

  // per-pixel coverage lists in depth order
  std::vector<std::vector<std::pair<int, double>>> coverage(upstream.pixel_count());
  for (size_t s = 0; s < n_splats; ++s) {
    const auto& f = prep.footprints[s];
    for (int y = f.y0; y <= f.y1; ++y)
      for (int x = f.x0; x <= f.x1; ++x) {
        const double gv = kernel_at(f, x + 0.5, y + 0.5);
        if (gv > 0.0)
          coverage[static_cast<size_t>(y) * camera.width + x].emplace_back(static_cast<int>(s), gv);
      }
  }

  // accumulators in splat space, folded into world-space grads afterwards
  std::vector<Vec2> g_u(n_splats, Vec2::Zero());
  std::vector<Mat2> g_cov2d(n_splats, Mat2::Zero());
  std::vector<double> g_alpha(n_splats, 0.0);
  std::vector<Vec3> g_color(n_splats, Vec3::Zero());

  std::vector<double> trans;  // transmittance in front of each covering splat
  for (int y = 0; y < camera.height; ++y)
    for (int x = 0; x < camera.width; ++x) {
      const auto& cov = coverage[static_cast<size_t>(y) * camera.width + x];
      if (cov.empty()) continue;
      const Vec3 dpix(upstream.at(x, y, 0), upstream.at(x, y, 1), upstream.at(x, y, 2));

      trans.resize(cov.size());
      double t_cur = 1.0;
      for (size_t k = 0; k < cov.size(); ++k) {
        trans[k] = t_cur;
        const auto& g = gaussians[prep.input_index[cov[k].first]];
        t_cur *= 1.0 - std::min(kAlphaCap, g.opacity * cov[k].second);
      }

      Vec3 suffix = Vec3::Zero();  // sum over later splats of T a c
      for (size_t kk = cov.size(); kk-- > 0;) {
        const int s = cov[kk].first;
        const double gv = cov[kk].second;
        const auto& g = gaussians[prep.input_index[s]];
        const double a_raw = g.opacity * gv;
        const double a = std::min(kAlphaCap, a_raw);
        const double t_here = trans[kk];

        g_color[s] += dpix * (t_here * a);

        // dC/da with the compositing chain through later transmittances
        const double d_a = dpix.dot(t_here * g.color - suffix / (1.0 - a));
        suffix += t_here * a * g.color;
        if (a_raw >= kAlphaCap) continue;  // capped: flat region

        g_alpha[s] += d_a * gv;
        const double d_gv = d_a * g.opacity;

        const auto& f = prep.footprints[s];
        const Vec2 q(x + 0.5 - f.mean2d.x(), y + 0.5 - f.mean2d.y());
        const Vec2 siq = f.cov2d_inv * q;
        g_u[s] += d_gv * gv * siq;
        g_cov2d[s] += (0.5 * d_gv * gv) * (siq * siq.transpose());
      }
    }

  // splat-space -> world-space chain
  const Mat3 r_wc = camera.world_to_camera.rotation_matrix();
  for (size_t s = 0; s < n_splats; ++s) {
    const int i = prep.input_index[s];
    grads.d_color[i] += g_color[s];
    grads.d_opacity[i] += g_alpha[s];
    if (g_u[s].isZero(0.0) && g_cov2d[s].isZero(0.0)) continue;

    const auto& f = prep.footprints[s];
    const Vec3 p = f.p_cam;
    const double iz = 1.0 / p.z();
    Eigen::Matrix<double, 2, 3> jpin;
    jpin << camera.fx * iz, 0.0, -camera.fx * p.x() * iz * iz,
            0.0, camera.fy * iz, -camera.fy * p.y() * iz * iz;

    const Mat3 cov_cam = r_wc * gaussians[i].covariance * r_wc.transpose();
    const Eigen::Matrix<double, 3, 2> m = cov_cam * jpin.transpose();

    Vec3 d_p = jpin.transpose() * g_u[s];
    // footprint shape also moves with the camera-frame mean through jpin
    const double iz2 = iz * iz;
    Eigen::Matrix<double, 2, 3> dj[3];
    dj[0].setZero();
    dj[0](0, 2) = -camera.fx * iz2;
    dj[1].setZero();
    dj[1](1, 2) = -camera.fy * iz2;
    dj[2] << -camera.fx * iz2, 0.0, 2.0 * camera.fx * p.x() * iz2 * iz,
             0.0, -camera.fy * iz2, 2.0 * camera.fy * p.y() * iz2 * iz;
    for (int k = 0; k < 3; ++k) d_p(k) += 2.0 * (g_cov2d[s].transpose() * (dj[k] * m)).trace();

    grads.d_mean[i] += r_wc.transpose() * d_p;
    const Mat3 d_cov_cam =
        jpin.transpose() * g_cov2d[s] * jpin;  // g_cov2d symmetric by construction
    grads.d_cov[i] += r_wc.transpose() * d_cov_cam * r_wc;
  }
  return grads;
}

std::vector<InfluenceSample> influence_vectors(const Camera& camera,
                                               const std::vector<WorldGaussian>& gaussians, int n) {
  std::vector<InfluenceSample> samples;
  const Prepared prep = prepare(camera, gaussians);
  int target = -1;
  for (size_t s = 0; s < prep.footprints.size(); ++s)
    if (prep.input_index[s] == n) target = static_cast<int>(s);
  if (target < 0) return samples;

  const auto& f = prep.footprints[target];
  const auto& g = gaussians[n];
  for (int y = f.y0; y <= f.y1; ++y)
    for (int x = f.x0; x <= f.x1; ++x) {
      const double gv = kernel_at(f, x + 0.5, y + 0.5);
      if (gv == 0.0) continue;
      // transmittance from splats in front of n at this pixel
      double t_here = 1.0;
      for (int s = 0; s < target; ++s) {
        const auto& fs = prep.footprints[s];
        if (y < fs.y0 || y > fs.y1 || x < fs.x0 || x > fs.x1) continue;
        const double gs = kernel_at(fs, x + 0.5, y + 0.5);
        if (gs > 0.0)
          t_here *= 1.0 - std::min(kAlphaCap, gaussians[prep.input_index[s]].opacity * gs);
      }
      const double w = g.opacity * t_here;
      const Vec2 q(x + 0.5 - f.mean2d.x(), y + 0.5 - f.mean2d.y());
      const Vec3 base = f.proj_jacobian.transpose() * (f.cov2d_inv * q) * (w * gv);
      for (int c = 0; c < 3; ++c) {
        InfluenceSample is;
        is.pixel = Vec2(x + 0.5, y + 0.5);
        is.channel = c;
        is.phi = base * g.color(c);
        is.blend_weight = w;
        is.kernel_value = gv;
        samples.push_back(is);
      }
    }
  return samples;
}

FisherMatrix fisher_matrix(const Camera& camera, const std::vector<WorldGaussian>& gaussians, int n) {
  FisherMatrix fm;
  const auto samples = influence_vectors(camera, gaussians, n);
  if (samples.empty()) return fm;  // invisible
  fm.visible = true;
  for (const auto& s : samples) fm.a += s.phi * s.phi.transpose();
  fm.a = (0.5 * (fm.a + fm.a.transpose())).eval();
  Eigen::SelfAdjointEigenSolver<Mat3> es(fm.a);
  fm.lambda_min = es.eigenvalues().minCoeff();
  return fm;
}

FisherMatrix fisher_accumulate(const SceneGraph& scene, Source source,
                               const std::vector<FisherObservation>& observations, int agent_index,
                               int gaussian_index) {
  FisherMatrix total;
  for (const auto& obs : observations) {
    const auto gaussians = world_gaussians(scene, source, obs.t);
    int n = -1;
    for (size_t i = 0; i < gaussians.size(); ++i)
      if (gaussians[i].agent_index == agent_index && gaussians[i].gaussian_index == gaussian_index)
        n = static_cast<int>(i);
    if (n < 0) throw std::invalid_argument("fisher_accumulate: gaussian not found in scene");
    const FisherMatrix fm = fisher_matrix(obs.camera, gaussians, n);
    if (fm.visible) {
      total.visible = true;
      total.a += fm.a;
    }
  }
  Eigen::SelfAdjointEigenSolver<Mat3> es(total.a);
  total.lambda_min = es.eigenvalues().minCoeff();
  return total;
}

std::vector<Vec3> grad_canonical_means(const Camera& camera, const SceneGraph& scene, Source source,
                                       double t, const ImageBuffer& residual) {
  const auto gaussians = world_gaussians(scene, source, t);
  const RenderGrads g = render_backward(camera, gaussians, residual);
  std::vector<Vec3> out(gaussians.size());
  std::vector<Mat3> rot_t(scene.agents.size());
  for (size_t ai = 0; ai < scene.agents.size(); ++ai)
    rot_t[ai] = query_pose(scene.trajectory(scene.agents[ai], source), t).rotation_matrix().transpose();
  for (size_t i = 0; i < gaussians.size(); ++i) {
    const int ai = gaussians[i].agent_index;
    out[i] = ai < 0 ? g.d_mean[i] : (rot_t[ai] * g.d_mean[i]).eval();
  }
  return out;
}

Vec6 grad_pose(const Camera& camera, const SceneGraph& scene, int agent_index, Source rendered,
               Source queried, double t, const ImageBuffer& residual) {
  if (agent_index < 0 || agent_index >= static_cast<int>(scene.agents.size()))
    throw std::invalid_argument("grad_pose: agent index out of range");
  // With dual timelines the rendered image has no functional dependence on
  // the other source's trajectory: the gradient is structurally zero.
  if (scene.timeline_mode == TimelineMode::dual && rendered != queried) return Vec6::Zero();

  const auto gaussians = world_gaussians(scene, rendered, t);
  const RenderGrads g = render_backward(camera, gaussians, residual);
  const RigidTransform pose = query_pose(scene.trajectory(scene.agents[agent_index], rendered), t);
  const Mat3 r = pose.rotation_matrix();

  Vec6 out = Vec6::Zero();
  for (size_t i = 0; i < gaussians.size(); ++i) {
    if (gaussians[i].agent_index != agent_index) continue;
    const auto& canon = scene.agents[agent_index].canonical[gaussians[i].gaussian_index];
    out.head<3>() += g.d_mean[i];
    const Vec3 a = r * canon.mean;
    out.tail<3>() += a.cross(g.d_mean[i]);  // [R mu]x dL/dmu
    // covariance path of a left rotation step: d Sigma = [w]x Sigma - Sigma [w]x
    const Mat3& sw = gaussians[i].covariance;
    const Mat3& gc = g.d_cov[i];
    for (int k = 0; k < 3; ++k) {
      Vec3 e = Vec3::Zero();
      e(k) = 1.0;
      const Mat3 sk = skew(e);
      out(3 + k) += (gc.transpose() * (sk * sw - sw * sk)).trace();
    }
  }
  return out;
}

}  // namespace dust

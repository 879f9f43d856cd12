#include "dust/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace dust {

void LossWeights::validate() const {
  if (lambda_ssim < 0 || lambda_smooth < 0 || lambda_drift < 0 || lambda_depth < 0 ||
      lambda_opacity < 0 || lambda_reg < 0)
    throw std::invalid_argument("loss weights must be non-negative");
  if (drift_decay_end_step > total_steps)
    throw std::invalid_argument("drift decay must end within the training run");
}

// ---------------------------------------------------------------------------
// SSIM (11x11 Gaussian window, sigma 1.5, luma, interior window positions)

namespace {

constexpr int kWin = 11;
constexpr int kHalf = kWin / 2;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

using Array = Eigen::ArrayXXd;  // (height, width)

const double* window() {
  static double w[kWin];
  static bool init = false;
  if (!init) {
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i) {
      const double d = i - kHalf;
      w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      sum += w[i];
    }
    for (int i = 0; i < kWin; ++i) w[i] /= sum;
    init = true;
  }
  return w;
}

Array luma_of(const ImageBuffer& img) {
  Array out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out(y, x) = (img.at(x, y, 0) + img.at(x, y, 1) + img.at(x, y, 2)) / 3.0;
  return out;
}

// separable correlation with zero padding; only interior values get used
Array corr(const Array& a) {
  const double* w = window();
  Array tmp = Array::Zero(a.rows(), a.cols());
  for (int y = 0; y < a.rows(); ++y)
    for (int x = 0; x < a.cols(); ++x) {
      double s = 0.0;
      for (int k = -kHalf; k <= kHalf; ++k) {
        const int xx = x + k;
        if (xx >= 0 && xx < a.cols()) s += w[k + kHalf] * a(y, xx);
      }
      tmp(y, x) = s;
    }
  Array out = Array::Zero(a.rows(), a.cols());
  for (int y = 0; y < a.rows(); ++y)
    for (int x = 0; x < a.cols(); ++x) {
      double s = 0.0;
      for (int k = -kHalf; k <= kHalf; ++k) {
        const int yy = y + k;
        if (yy >= 0 && yy < a.rows()) s += w[k + kHalf] * tmp(yy, x);
      }
      out(y, x) = s;
    }
  return out;
}

struct SsimMaps {
  Array s;                     // SSIM value per position (valid region only)
  Array m1, m2, a1, a2, b1, b2;
  int x0, x1, y0, y1;          // inclusive valid region
  bool valid = false;
};

SsimMaps ssim_maps(const Array& x, const Array& y) {
  SsimMaps maps;
  maps.x0 = kHalf;
  maps.x1 = static_cast<int>(x.cols()) - 1 - kHalf;
  maps.y0 = kHalf;
  maps.y1 = static_cast<int>(x.rows()) - 1 - kHalf;
  if (maps.x1 < maps.x0 || maps.y1 < maps.y0) return maps;
  maps.valid = true;
  maps.m1 = corr(x);
  maps.m2 = corr(y);
  const Array e11 = corr(x * x), e22 = corr(y * y), e12 = corr(x * y);
  maps.a1 = 2.0 * maps.m1 * maps.m2 + kC1;
  maps.a2 = 2.0 * (e12 - maps.m1 * maps.m2) + kC2;
  maps.b1 = maps.m1.square() + maps.m2.square() + kC1;
  maps.b2 = (e11 - maps.m1.square()) + (e22 - maps.m2.square()) + kC2;
  maps.s = (maps.a1 * maps.a2) / (maps.b1 * maps.b2);
  return maps;
}

bool mask_at(const std::vector<uint8_t>* mask, int w, int x, int y) {
  return mask == nullptr || (*mask)[static_cast<size_t>(y) * w + x] != 0;
}

// the masked SSIM mean needs at least one marked pixel strictly inside the
// window's interior region
bool mask_reaches_ssim_region(const ImageBuffer& img) {
  for (int y = kHalf; y < img.height - kHalf; ++y)
    for (int x = kHalf; x < img.width - kHalf; ++x)
      if (img.mask[static_cast<size_t>(y) * img.width + x]) return true;
  return false;
}

}  // namespace

ImageLossResult image_loss(const ImageBuffer& rendered, const ImageBuffer& target,
                           const std::vector<uint8_t>* mask, double lambda_ssim, bool with_grad) {
  if (rendered.width != target.width || rendered.height != target.height)
    throw std::invalid_argument("image_loss: dimension mismatch");
  const int w = rendered.width, h = rendered.height;

  ImageLossResult res;
  if (with_grad) res.grad = ImageBuffer(w, h);

  size_t n_mask = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) n_mask += mask_at(mask, w, x, y);
  if (n_mask == 0) {
    res.empty_mask = true;
    return res;
  }

  double l1 = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask_at(mask, w, x, y)) continue;
      for (int c = 0; c < 3; ++c) l1 += std::abs(rendered.at(x, y, c) - target.at(x, y, c));
    }
  const double l1_norm = 1.0 / (3.0 * static_cast<double>(n_mask));
  res.l1 = l1 * l1_norm;

  const Array lx = luma_of(rendered), ly = luma_of(target);
  const SsimMaps maps = ssim_maps(lx, ly);
  double ssim_sum = 0.0;
  size_t ssim_n = 0;
  if (maps.valid) {
    for (int y = maps.y0; y <= maps.y1; ++y)
      for (int x = maps.x0; x <= maps.x1; ++x)
        if (mask_at(mask, w, x, y)) {
          ssim_sum += maps.s(y, x);
          ++ssim_n;
        }
  }
  res.ssim_mean = ssim_n > 0 ? ssim_sum / static_cast<double>(ssim_n) : 1.0;
  res.value = (1.0 - lambda_ssim) * res.l1 + lambda_ssim * (1.0 - res.ssim_mean);

  if (!with_grad) return res;

  // L1 part
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask_at(mask, w, x, y)) continue;
      for (int c = 0; c < 3; ++c) {
        const double d = rendered.at(x, y, c) - target.at(x, y, c);
        const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        res.grad.at(x, y, c) = (1.0 - lambda_ssim) * l1_norm * sgn;
      }
    }

  // SSIM part: dL/dS = -lambda / ssim_n on counted positions, then back
  // through the windowed moments onto the rendered luma.
  if (maps.valid && ssim_n > 0) {
    const double ds_scale = -lambda_ssim / static_cast<double>(ssim_n);
    Array t_m1 = Array::Zero(h, w), t_e11 = Array::Zero(h, w), t_e12 = Array::Zero(h, w);
    for (int y = maps.y0; y <= maps.y1; ++y)
      for (int x = maps.x0; x <= maps.x1; ++x) {
        if (!mask_at(mask, w, x, y)) continue;
        const double s = maps.s(y, x);
        const double m1 = maps.m1(y, x), m2 = maps.m2(y, x);
        const double a1 = maps.a1(y, x), a2 = maps.a2(y, x);
        const double b1 = maps.b1(y, x), b2 = maps.b2(y, x);
        // grouped so the gradient cancels bitwise for identical images
        const double ds_dm1 = s * 2.0 * ((m2 / a1 - m1 / b1) - (m2 / a2 - m1 / b2));
        const double ds_de11 = -s / b2;
        const double ds_de12 = 2.0 * s / a2;
        t_m1(y, x) = ds_scale * ds_dm1;
        t_e11(y, x) = ds_scale * ds_de11;
        t_e12(y, x) = ds_scale * ds_de12;
      }
    // adjoint of the (symmetric) window correlation is the same correlation
    const Array c_m1 = corr(t_m1), c_e11 = corr(t_e11), c_e12 = corr(t_e12);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double d_luma = c_m1(y, x) + 2.0 * lx(y, x) * c_e11(y, x) + ly(y, x) * c_e12(y, x);
        for (int c = 0; c < 3; ++c) res.grad.at(x, y, c) += d_luma / 3.0;
      }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Pose regularizers

double smoothness_at(const PoseTrajectory& traj, size_t i) {
  if (i == 0 || i + 1 >= traj.keys.size())
    throw std::invalid_argument("smoothness_at: key has no past/future neighbor");
  const auto& prev = traj.keys[i - 1];
  const auto& cur = traj.keys[i];
  const auto& next = traj.keys[i + 1];
  const double w = (cur.t - prev.t) / (next.t - prev.t);
  const Vec3 chord = lerp_vec3(prev.pose.translation, next.pose.translation, w);
  return (cur.pose.translation - chord).norm();
}

double smoothness_loss(const PoseTrajectory& traj) {
  if (traj.keys.size() < 3) return 0.0;
  double sum = 0.0;
  for (size_t i = 1; i + 1 < traj.keys.size(); ++i) sum += smoothness_at(traj, i);
  return sum / static_cast<double>(traj.keys.size() - 2);
}

double drift_weight(int step, int decay_end_step) {
  if (decay_end_step <= 0) return 0.0;
  return std::max(0.0, 1.0 - static_cast<double>(step) / static_cast<double>(decay_end_step));
}

double drift_at(const PoseTrajectory& optimized, const PoseTrajectory& init, size_t i) {
  if (i >= optimized.keys.size() || i >= init.keys.size())
    throw std::invalid_argument("drift_at: key index out of range");
  if (std::abs(optimized.keys[i].t - init.keys[i].t) > 1e-9)
    throw std::invalid_argument("drift_at: key timestamps do not match");
  return (optimized.keys[i].pose.translation - init.keys[i].pose.translation).norm();
}

double drift_loss(const PoseTrajectory& optimized, const PoseTrajectory& init, int step,
                  int decay_end_step) {
  if (optimized.keys.size() != init.keys.size())
    throw std::invalid_argument("drift_loss: key sets differ");
  double sum = 0.0;
  for (size_t i = 0; i < optimized.keys.size(); ++i) sum += drift_at(optimized, init, i);
  return drift_weight(step, decay_end_step) * sum / static_cast<double>(optimized.keys.size());
}

// ---------------------------------------------------------------------------
// Metrics

double psnr(const ImageBuffer& rendered, const ImageBuffer& target,
            const std::vector<uint8_t>* mask) {
  if (rendered.width != target.width || rendered.height != target.height)
    throw std::invalid_argument("psnr: dimension mismatch");
  double mse = 0.0;
  size_t n = 0;
  for (int y = 0; y < rendered.height; ++y)
    for (int x = 0; x < rendered.width; ++x) {
      if (!mask_at(mask, rendered.width, x, y)) continue;
      for (int c = 0; c < 3; ++c) {
        const double d = rendered.at(x, y, c) - target.at(x, y, c);
        mse += d * d;
      }
      ++n;
    }
  if (n == 0) throw std::invalid_argument("psnr: empty mask");
  mse /= 3.0 * static_cast<double>(n);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

double ssim(const ImageBuffer& rendered, const ImageBuffer& target,
            const std::vector<uint8_t>* mask) {
  if (rendered.width != target.width || rendered.height != target.height)
    throw std::invalid_argument("ssim: dimension mismatch");
  const SsimMaps maps = ssim_maps(luma_of(rendered), luma_of(target));
  if (!maps.valid) throw std::invalid_argument("ssim: image smaller than the window");
  double sum = 0.0;
  size_t n = 0;
  for (int y = maps.y0; y <= maps.y1; ++y)
    for (int x = maps.x0; x <= maps.x1; ++x)
      if (mask_at(mask, rendered.width, x, y)) {
        sum += maps.s(y, x);
        ++n;
      }
  if (n == 0) throw std::invalid_argument("ssim: empty mask over the valid region");
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Training

const FrameRecord& TrainDataset::find(int frame, Source source) const {
  for (const auto& r : frames)
    if (r.frame == frame && r.source == source) return r;
  throw std::invalid_argument("dataset is missing frame " + std::to_string(frame) + " for " +
                              source_name(source));
}

TotalLoss total_loss(const SceneGraph& scene, const TrainDataset& dataset,
                     const SceneGraph& init_scene, const LossWeights& weights, int step) {
  weights.validate();
  const bool dual = scene.timeline_mode == TimelineMode::dual;
  const double gamma = drift_weight(step, weights.drift_decay_end_step);

  TotalLoss out;
  for (const auto& rec : dataset.frames) {
    const double t = dual ? rec.capture_time : rec.anchor_time;
    const ImageBuffer rendered = render(rec.camera, world_gaussians(scene, rec.source, t));
    out.image += image_loss(rendered, rec.target, nullptr, weights.lambda_ssim).value;

    int smooth_valid = 0;
    double smooth_sum = 0.0, drift_sum = 0.0;
    for (size_t ai = 0; ai < scene.agents.size(); ++ai) {
      const auto& traj = scene.trajectory(scene.agents[ai], rec.source);
      const auto& init_traj = init_scene.trajectory(init_scene.agents[ai], rec.source);
      if (rec.frame > 0 && rec.frame + 1 < static_cast<int>(traj.keys.size())) {
        smooth_sum += smoothness_at(traj, rec.frame);
        ++smooth_valid;
      }
      drift_sum += drift_at(traj, init_traj, rec.frame);
    }
    if (smooth_valid > 0) out.smooth += smooth_sum / smooth_valid;
    if (!scene.agents.empty()) out.drift += gamma * drift_sum / scene.agents.size();
  }
  out.total = out.image + weights.lambda_smooth * out.smooth + weights.lambda_drift * out.drift;
  return out;
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

constexpr int kGaussParams = 14;  // pos 3, log-scale 3, quat 4, color 3, opacity 1
constexpr int kPoseParams = 6;    // translation 3, rotation tangent 3

struct GaussParam {
  Vec3 pos;
  Vec3 log_scale;
  Eigen::Vector4d quat;  // (w,x,y,z), unit
  Vec3 color;  // raw, step sizes are calibrated for color space
  double opacity_logit;
};

GaussParam encode_gaussian(const CanonicalGaussian& g) {
  GaussParam p;
  p.pos = g.mean;
  Eigen::SelfAdjointEigenSolver<Mat3> es(g.covariance);
  Mat3 v = es.eigenvectors();
  if (v.determinant() < 0) v.col(0) = -v.col(0);
  const UnitQuaternion q = UnitQuaternion::from_matrix(v);
  p.quat = Eigen::Vector4d(q.w, q.x, q.y, q.z);
  for (int k = 0; k < 3; ++k) p.log_scale(k) = 0.5 * std::log(es.eigenvalues()(k));
  p.color = g.color;
  p.opacity_logit = logit(std::clamp(g.opacity, 1e-9, 1.0 - 1e-9));
  return p;
}

CanonicalGaussian decode_gaussian(const GaussParam& p) {
  CanonicalGaussian g;
  g.mean = p.pos;
  const UnitQuaternion q(p.quat(0), p.quat(1), p.quat(2), p.quat(3));
  const Mat3 r = q.to_matrix();
  Vec3 ev;
  for (int k = 0; k < 3; ++k) ev(k) = std::exp(2.0 * p.log_scale(k));
  g.covariance = r * ev.asDiagonal() * r.transpose();
  g.color = p.color;
  g.opacity = sigmoid(p.opacity_logit);
  return g;
}

// dR/dq for a unit quaternion (w,x,y,z)
void quat_rotation_jacobians(const Eigen::Vector4d& q, Mat3 dr[4]) {
  const double w = q(0), x = q(1), y = q(2), z = q(3);
  dr[0] << 0, -z, y, z, 0, -x, -y, x, 0;
  dr[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
  dr[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
  dr[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
  for (int i = 0; i < 4; ++i) dr[i] *= 2.0;
}

struct ParamLayout {
  size_t n_gaussians = 0;  // background first, then agents in order
  size_t n_pose_keys = 0;  // vehicle keys per agent, then infra keys (dual only)
  size_t gauss_base = 0;
  size_t pose_base = 0;
  size_t total = 0;
};

struct Trainer {
  const TrainDataset& data;
  const TrainConfig& cfg;
  SceneGraph scene;        // current state (gaussians rebuilt from params)
  SceneGraph init_poses;   // drift reference
  std::vector<GaussParam> gauss;
  ParamLayout layout;
  std::vector<size_t> pose_key_offset;  // per (agent, timeline) block start
  OptimState opt;
  std::vector<double> grad;
  bool dual;

  Trainer(const SceneGraph& init_scene, const TrainDataset& dataset, const TrainConfig& config)
      : data(dataset), cfg(config), scene(init_scene), init_poses(init_scene) {
    cfg.weights.validate();
    scene.validate();
    dual = scene.timeline_mode == TimelineMode::dual;

    for (const auto& g : scene.background) gauss.push_back(encode_gaussian(g));
    for (const auto& a : scene.agents)
      for (const auto& g : a.canonical) gauss.push_back(encode_gaussian(g));
    layout.n_gaussians = gauss.size();

    size_t keys = 0;
    for (const auto& a : scene.agents) {
      pose_key_offset.push_back(keys);
      keys += a.trajectory_vehicle.keys.size();
      if (dual) {
        pose_key_offset.push_back(keys);
        keys += a.trajectory_infra.keys.size();
      }
    }
    layout.n_pose_keys = keys;
    layout.gauss_base = 0;
    layout.pose_base = layout.n_gaussians * kGaussParams;
    layout.total = layout.pose_base + layout.n_pose_keys * kPoseParams;

    opt.seed = cfg.seed;
    opt.m.assign(layout.total, 0.0);
    opt.v.assign(layout.total, 0.0);
    grad.assign(layout.total, 0.0);
    gauss_moved.assign(layout.n_gaussians, 0);

    check_alignment();
  }

  void check_alignment() const {
    for (const auto& a : scene.agents) {
      const size_t kv = a.trajectory_vehicle.keys.size();
      if (static_cast<int>(kv) != data.frame_count)
        throw std::invalid_argument("optimize: trajectory keys must match the frame count");
      if (dual && a.trajectory_infra.keys.size() != kv)
        throw std::invalid_argument("optimize: dual timelines must key every frame");
    }
    for (const auto& rec : data.frames) {
      const double t = dual ? rec.capture_time : rec.anchor_time;
      for (const auto& a : scene.agents) {
        const auto& traj = dual && rec.source == Source::infra ? a.trajectory_infra
                                                               : a.trajectory_vehicle;
        if (std::abs(traj.keys[rec.frame].t - t) > 1e-9)
          throw std::invalid_argument("optimize: render times must land on trajectory keys");
      }
    }
  }

  size_t pose_slot(size_t agent, Source source) const {
    const size_t block = dual ? agent * 2 + (source == Source::infra ? 1 : 0) : agent;
    return pose_key_offset[block];
  }

  PoseTrajectory& served_trajectory(size_t agent, Source source) {
    if (!dual) return scene.agents[agent].trajectory_vehicle;
    return source == Source::infra ? scene.agents[agent].trajectory_infra
                                   : scene.agents[agent].trajectory_vehicle;
  }

  // Only re-decode touched gaussians: an exact zero-gradient fixed point must
  // stay bitwise fixed, and encode/decode is not a bitwise round trip.
  std::vector<uint8_t> gauss_moved;

  void rebuild_gaussians() {
    size_t gi = 0;
    auto refresh = [&](CanonicalGaussian& g) {
      if (gauss_moved[gi]) g = decode_gaussian(gauss[gi]);
      ++gi;
    };
    for (auto& g : scene.background) refresh(g);
    for (auto& a : scene.agents)
      for (auto& g : a.canonical) refresh(g);
    std::fill(gauss_moved.begin(), gauss_moved.end(), 0);
  }

  // chain world-space gradients into the flat parameter gradient
  void accumulate_world_grads(const RenderGrads& rg, Source source, double t) {
    std::vector<Mat3> agent_rot(scene.agents.size());
    for (size_t ai = 0; ai < scene.agents.size(); ++ai)
      agent_rot[ai] =
          query_pose(scene.trajectory(scene.agents[ai], source), t).rotation_matrix();

    const size_t n = layout.n_gaussians;
    size_t world_index = 0;
    for (size_t gi = 0; gi < n; ++gi, ++world_index) {
      const bool is_bg = gi < scene.background.size();
      const int ai = is_bg ? -1
                           : [&] {
                               size_t rest = gi - scene.background.size();
                               for (size_t a = 0; a < scene.agents.size(); ++a) {
                                 if (rest < scene.agents[a].canonical.size()) return static_cast<int>(a);
                                 rest -= scene.agents[a].canonical.size();
                               }
                               return -1;
                             }();
      const Mat3 r = ai < 0 ? Mat3::Identity() : agent_rot[ai];

      const Vec3 d_mean_world = rg.d_mean[world_index];
      const Mat3 d_cov_world = rg.d_cov[world_index];
      const Vec3 d_mean_canon = r.transpose() * d_mean_world;
      const Mat3 d_cov_canon = r.transpose() * d_cov_world * r;

      double* g = grad.data() + layout.gauss_base + gi * kGaussParams;
      const GaussParam& p = gauss[gi];
      if (cfg.optimize_canonical) {
        // position
        for (int k = 0; k < 3; ++k) g[k] += d_mean_canon(k);
        // covariance: Sigma = R diag(e^{2s}) R^T
        const UnitQuaternion q(p.quat(0), p.quat(1), p.quat(2), p.quat(3));
        const Mat3 rq = q.to_matrix();
        Vec3 ev;
        for (int k = 0; k < 3; ++k) ev(k) = std::exp(2.0 * p.log_scale(k));
        const Mat3 rtgr = rq.transpose() * d_cov_canon * rq;
        for (int k = 0; k < 3; ++k) g[3 + k] += rtgr(k, k) * 2.0 * ev(k);
        const Mat3 d_r = 2.0 * d_cov_canon * rq * ev.asDiagonal();
        Mat3 dr_dq[4];
        quat_rotation_jacobians(p.quat, dr_dq);
        Eigen::Vector4d gq;
        for (int k = 0; k < 4; ++k) gq(k) = (d_r.array() * dr_dq[k].array()).sum();
        gq -= p.quat * p.quat.dot(gq);  // stay tangent to the unit sphere
        for (int k = 0; k < 4; ++k) g[6 + k] += gq(k);
        // raw color; opacity through its sigmoid
        for (int k = 0; k < 3; ++k) g[10 + k] += rg.d_color[world_index](k);
        const double op = sigmoid(p.opacity_logit);
        g[13] += rg.d_opacity[world_index] * op * (1.0 - op);
      }

      if (cfg.optimize_poses && ai >= 0) {
        const int frame = frame_of_time(ai, source, t);
        double* pg = grad.data() + layout.pose_base +
                     (pose_slot(ai, source) + frame) * kPoseParams;
        for (int k = 0; k < 3; ++k) pg[k] += d_mean_world(k);
        const Vec3 arm = r * scene.agents[ai].canonical[scene_gauss_index(gi, ai)].mean;
        const Vec3 rot_mean = arm.cross(d_mean_world);
        const Mat3& sw_cov =
            (r * scene.agents[ai].canonical[scene_gauss_index(gi, ai)].covariance * r.transpose());
        for (int k = 0; k < 3; ++k) {
          Vec3 e = Vec3::Zero();
          e(k) = 1.0;
          const Mat3 sk = skew(e);
          pg[3 + k] += rot_mean(k) + (d_cov_world.transpose() * (sk * sw_cov - sw_cov * sk)).trace();
        }
      }
    }
  }

  int scene_gauss_index(size_t flat, int agent) const {
    size_t rest = flat - scene.background.size();
    for (int a = 0; a < agent; ++a) rest -= scene.agents[a].canonical.size();
    return static_cast<int>(rest);
  }

  int frame_of_time(size_t agent, Source source, double t) {
    const PoseTrajectory& traj = served_trajectory(agent, source);
    for (size_t i = 0; i < traj.keys.size(); ++i)
      if (std::abs(traj.keys[i].t - t) < 1e-9) return static_cast<int>(i);
    throw std::logic_error("pose gradient requested between trajectory keys");
  }

  double source_weight(Source s) const {
    return s == Source::vehicle ? cfg.source_weight_vehicle : cfg.source_weight_infra;
  }

  struct RegTerms {
    double smooth = 0.0;  // mean over agents with valid neighbors
    double drift = 0.0;   // gamma-weighted mean over agents
  };

  // smoothness + drift at the frame's key, for the trajectory served to `source`
  RegTerms regularizers(int frame, Source source, bool with_grad) {
    RegTerms out;
    const int n_agents = static_cast<int>(scene.agents.size());
    if (n_agents == 0) return out;

    int smooth_valid = 0;
    for (int ai = 0; ai < n_agents; ++ai) {
      const auto& traj = served_trajectory(ai, source);
      if (frame > 0 && frame + 1 < static_cast<int>(traj.keys.size())) ++smooth_valid;
    }

    double smooth_sum = 0.0, drift_sum = 0.0;
    const double gamma = drift_weight(opt.step, cfg.weights.drift_decay_end_step);
    for (int ai = 0; ai < n_agents; ++ai) {
      auto& traj = served_trajectory(ai, source);
      const auto& init_traj =
          dual ? (source == Source::infra ? init_poses.agents[ai].trajectory_infra
                                          : init_poses.agents[ai].trajectory_vehicle)
               : init_poses.agents[ai].trajectory_vehicle;

      if (frame > 0 && frame + 1 < static_cast<int>(traj.keys.size())) {
        const double w =
            (traj.keys[frame].t - traj.keys[frame - 1].t) /
            (traj.keys[frame + 1].t - traj.keys[frame - 1].t);
        const Vec3 chord = lerp_vec3(traj.keys[frame - 1].pose.translation,
                                     traj.keys[frame + 1].pose.translation, w);
        const Vec3 d = traj.keys[frame].pose.translation - chord;
        const double norm = d.norm();
        smooth_sum += norm;
        if (with_grad && cfg.optimize_poses && norm > 1e-12) {
          const Vec3 dir = d / norm;
          const double scale = cfg.weights.lambda_smooth / smooth_valid;
          const size_t base = pose_slot(ai, source);
          auto add = [&](int key, const Vec3& v) {
            double* pg = grad.data() + layout.pose_base + (base + key) * kPoseParams;
            for (int k = 0; k < 3; ++k) pg[k] += scale * v(k);
          };
          add(frame, dir);
          add(frame - 1, -(1.0 - w) * dir);
          add(frame + 1, -w * dir);
        }
      }

      const Vec3 dd = traj.keys[frame].pose.translation - init_traj.keys[frame].pose.translation;
      const double dn = dd.norm();
      drift_sum += dn;
      if (with_grad && cfg.optimize_poses && gamma > 0.0 && dn > 1e-12) {
        const double scale = cfg.weights.lambda_drift * gamma / n_agents;
        double* pg = grad.data() + layout.pose_base + (pose_slot(ai, source) + frame) * kPoseParams;
        const Vec3 dir = dd / dn;
        for (int k = 0; k < 3; ++k) pg[k] += scale * dir(k);
      }
    }
    out.smooth = smooth_valid > 0 ? smooth_sum / smooth_valid : 0.0;
    out.drift = gamma * drift_sum / n_agents;
    return out;
  }

  double pose_lr(double start, double end) const {
    const double frac = cfg.weights.total_steps > 1
                            ? static_cast<double>(opt.step) / (cfg.weights.total_steps - 1)
                            : 1.0;
    return start * std::pow(end / start, frac);
  }

  void adam_update() {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const int t = opt.step + 1;
    const double bc1 = 1.0 - std::pow(b1, t);
    const double bc2 = 1.0 - std::pow(b2, t);
    const double lr_pose_t = pose_lr(cfg.lr_pose_trans_start, cfg.lr_pose_trans_end);
    const double lr_pose_r = pose_lr(cfg.lr_pose_rot_start, cfg.lr_pose_rot_end);
    const double lr_mean = pose_lr(cfg.lr_mean_start, cfg.lr_mean_end);

    auto lr_of = [&](size_t i) {
      if (i >= layout.pose_base) {
        const size_t k = (i - layout.pose_base) % kPoseParams;
        return k < 3 ? lr_pose_t : lr_pose_r;
      }
      switch ((i - layout.gauss_base) % kGaussParams) {
        case 0:
        case 1:
        case 2:
          return lr_mean;
        case 3:
        case 4:
        case 5:
        case 6:
        case 7:
        case 8:
        case 9:
          return cfg.lr_covariance;
        case 10:
        case 11:
        case 12:
          return cfg.lr_color;
        default:
          return cfg.lr_opacity;
      }
    };

    std::vector<Vec6> pose_steps(layout.n_pose_keys, Vec6::Zero());
    for (size_t i = 0; i < layout.total; ++i) {
      if (grad[i] == 0.0 && opt.m[i] == 0.0 && opt.v[i] == 0.0) continue;
      opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * grad[i];
      opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * grad[i] * grad[i];
      const double step = lr_of(i) * (opt.m[i] / bc1) / (std::sqrt(opt.v[i] / bc2) + eps);
      if (step == 0.0) continue;
      if (i >= layout.pose_base) {
        const size_t key = (i - layout.pose_base) / kPoseParams;
        const size_t k = (i - layout.pose_base) % kPoseParams;
        pose_steps[key](k) = -step;
      } else {
        const size_t gi = (i - layout.gauss_base) / kGaussParams;
        const size_t k = (i - layout.gauss_base) % kGaussParams;
        GaussParam& p = gauss[gi];
        gauss_moved[gi] = 1;
        if (k < 3)
          p.pos(k) -= step;
        else if (k < 6)
          p.log_scale(k - 3) -= step;
        else if (k < 10)
          p.quat(k - 6) -= step;
        else if (k < 13)
          p.color(k - 10) -= step;
        else
          p.opacity_logit -= step;
      }
    }
    for (size_t gi = 0; gi < gauss.size(); ++gi)
      if (gauss_moved[gi]) gauss[gi].quat.normalize();

    if (cfg.optimize_poses) {
      size_t block = 0;
      for (size_t ai = 0; ai < scene.agents.size(); ++ai) {
        auto apply = [&](PoseTrajectory& traj) {
          const size_t base = pose_key_offset[block++];
          for (size_t key = 0; key < traj.keys.size(); ++key) {
            const Vec6& s = pose_steps[base + key];
            if (s.isZero(0.0)) continue;
            traj.keys[key].pose = se3_perturb(traj.keys[key].pose, s);
          }
        };
        apply(scene.agents[ai].trajectory_vehicle);
        if (dual) apply(scene.agents[ai].trajectory_infra);
      }
    }
  }

  TrainResult run() {
    TrainResult result;
    rebuild_gaussians();

    double initial_total = -1.0;
    int high_loss_streak = 0;

    for (opt.step = 0; opt.step < cfg.weights.total_steps; ++opt.step) {
      const int frame = opt.step % data.frame_count;
      std::fill(grad.begin(), grad.end(), 0.0);

      StepStats stats;
      stats.step = opt.step;
      double smooth_val = 0.0, drift_val = 0.0;
      int metric_sources = 0;

      for (const Source source : {Source::vehicle, Source::infra}) {
        const FrameRecord& rec = data.find(frame, source);
        const double t = dual ? rec.capture_time : rec.anchor_time;
        const double weight = source_weight(source);

        const auto gaussians = world_gaussians(scene, source, t);
        RenderOptions ropt;
        ropt.threads = cfg.threads;
        const ImageBuffer rendered = render(rec.camera, gaussians, ropt);

        // per-step metrics come from the frame actually rendered
        stats.psnr_full += std::min(99.0, psnr(rendered, rec.target));
        stats.ssim_full += ssim(rendered, rec.target);
        if (!rec.target.mask.empty() && mask_reaches_ssim_region(rec.target)) {
          stats.psnr_dyn += std::min(99.0, psnr(rendered, rec.target, &rec.target.mask));
          stats.ssim_dyn += ssim(rendered, rec.target, &rec.target.mask);
        }
        ++metric_sources;

        if (weight > 0.0) {
          ImageLossResult il = image_loss(rendered, rec.target, nullptr, cfg.weights.lambda_ssim,
                                          /*with_grad=*/true);
          stats.image += weight * il.value;
          if (weight != 1.0)
            for (auto& v : il.grad.rgb) v *= weight;
          const RenderGrads rg = render_backward(rec.camera, gaussians, il.grad);
          accumulate_world_grads(rg, source, t);
        }

        // regularizers follow the served timeline of this source
        const RegTerms reg = regularizers(frame, source, /*with_grad=*/true);
        smooth_val += reg.smooth;
        drift_val += reg.drift;
      }

      stats.smooth = smooth_val;
      stats.drift = drift_val;
      stats.total = stats.image + cfg.weights.lambda_smooth * smooth_val +
                    cfg.weights.lambda_drift * drift_val;
      stats.psnr_full /= metric_sources;
      stats.ssim_full /= metric_sources;
      stats.psnr_dyn /= metric_sources;
      stats.ssim_dyn /= metric_sources;
      result.history.push_back(stats);

      if (initial_total < 0.0) initial_total = stats.total;
      if (stats.total > 10.0 * (initial_total + 1e-9)) {
        if (++high_loss_streak >= 50) {
          result.diverged = true;
          result.note = "loss exceeded 10x the initial value for 50 consecutive steps";
          break;
        }
      } else {
        high_loss_streak = 0;
      }

      adam_update();
      rebuild_gaussians();

      if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
          (opt.step + 1) % cfg.checkpoint_every == 0)
        save_scene(scene, cfg.checkpoint_dir + "/checkpoint_" + std::to_string(opt.step + 1) +
                              ".json");
    }

    if (!dual)
      for (auto& a : scene.agents) {
        a.trajectory_infra = a.trajectory_vehicle;
        a.trajectory_infra.source = Source::infra;
      }
    result.scene = scene;
    return result;
  }
};

}  // namespace

TrainResult optimize(const SceneGraph& init_scene, const TrainDataset& dataset,
                     const TrainConfig& config) {
  if (dataset.frame_count <= 0 || dataset.frames.empty())
    throw std::invalid_argument("optimize: empty dataset");
  Trainer trainer(init_scene, dataset, config);
  return trainer.run();
}

void write_history_csv(const std::vector<StepStats>& history, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "step,total,image,smooth,drift,psnr_full,psnr_dyn,ssim_full,ssim_dyn\n";
  char buf[256];
  for (const auto& s : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", s.step,
                  s.total, s.image, s.smooth, s.drift, s.psnr_full, s.psnr_dyn, s.ssim_full,
                  s.ssim_dyn);
    f << buf;
  }
}

std::vector<FrameScore> evaluate_scene(const SceneGraph& scene, const TrainDataset& dataset,
                                       int threads) {
  std::vector<FrameScore> scores;
  RenderOptions ropt;
  ropt.threads = threads;
  const bool dual = scene.timeline_mode == TimelineMode::dual;
  for (const auto& rec : dataset.frames) {
    const double t = dual ? rec.capture_time : rec.anchor_time;
    const ImageBuffer rendered = render(rec.camera, world_gaussians(scene, rec.source, t), ropt);
    FrameScore s;
    s.frame = rec.frame;
    s.source = rec.source;
    s.psnr_full = psnr(rendered, rec.target);
    s.ssim_full = ssim(rendered, rec.target);
    if (!rec.target.mask.empty() && mask_reaches_ssim_region(rec.target)) {
      s.has_dynamic = true;
      s.psnr_dyn = psnr(rendered, rec.target, &rec.target.mask);
      s.ssim_dyn = ssim(rendered, rec.target, &rec.target.mask);
    }
    scores.push_back(s);
  }
  return scores;
}

double dynamic_squared_loss(const SceneGraph& scene, const TrainDataset& dataset) {
  const bool dual = scene.timeline_mode == TimelineMode::dual;
  double total = 0.0;
  for (const auto& rec : dataset.frames) {
    if (rec.target.mask.empty()) continue;
    const double t = dual ? rec.capture_time : rec.anchor_time;
    const ImageBuffer rendered = render(rec.camera, world_gaussians(scene, rec.source, t));
    for (int y = 0; y < rendered.height; ++y)
      for (int x = 0; x < rendered.width; ++x) {
        if (!rec.target.mask[static_cast<size_t>(y) * rendered.width + x]) continue;
        for (int c = 0; c < 3; ++c) {
          const double d = rendered.at(x, y, c) - rec.target.at(x, y, c);
          total += 0.5 * d * d;
        }
      }
  }
  return total;
}

}  // namespace dust

#pragma once

// Differentiable CPU splatting of world Gaussians: pinhole projection with
// EWA covariance flattening, front-to-back alpha compositing, analytic
// gradients for all optimized parameters, and the pixel-space influence
// vectors / rendering Fisher information used by the theory checks.

#include <cstdint>
#include <optional>
#include <vector>

#include "dust/scene.hpp"

namespace dust {

// Kernel support is truncated at Mahalanobis radius 3; a low-pass floor is
// added to the projected covariance diagonal (standard EWA practice).
inline constexpr double kKernelRadius = 3.0;
inline constexpr double kLowpassFloor = 0.3;   // px^2
inline constexpr double kNearPlane = 0.01;     // m
inline constexpr double kAlphaCap = 0.995;     // compositing guard
inline constexpr double kMaskAlphaMin = 0.05;  // front-most "contributing" cutoff

/// Pinhole camera, zero skew. Pixel (ix, iy) is sampled at (ix+0.5, iy+0.5).
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  RigidTransform world_to_camera;
  int width = 1, height = 1;

  void validate() const;
};

/// Camera at `eye` looking toward `target`; +x right, +y down, +z forward.
/// Principal point lands at the image center.
Camera make_look_at_camera(const Vec3& eye, const Vec3& target, const Vec3& up, double focal_px,
                           int width, int height);

/// Projected 2D footprint of one world Gaussian.
struct SplatFootprint {
  Vec2 mean2d;                              // pixels
  Mat2 cov2d;                               // px^2, includes the low-pass floor
  Eigen::Matrix<double, 2, 3> proj_jacobian;  // d mean2d / d world mean
  double camera_depth = 0.0;                // m

  // cached for compositing/backward
  Vec3 p_cam;
  Mat2 cov2d_inv;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive support rect, clipped

  bool has_support() const { return x1 >= x0 && y1 >= y0; }
};

/// Perspective projection + EWA flattening; nullopt when culled by the near
/// plane (depth <= kNearPlane).
std::optional<SplatFootprint> project(const Camera& camera, const WorldGaussian& g);

/// RGB raster; channels stay unclamped until file output.
struct ImageBuffer {
  int width = 0, height = 0;
  std::vector<double> rgb;      // 3 * width * height, interleaved, row-major
  std::vector<uint8_t> mask;    // optional per-pixel dynamic bit (empty if unused)

  ImageBuffer() = default;
  ImageBuffer(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(3) * w * h, 0.0) {}
  double& at(int x, int y, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  double at(int x, int y, int c) const { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  size_t pixel_count() const { return static_cast<size_t>(width) * height; }
};

struct RenderOptions {
  bool record_agent_mask = false;  // mask = front-most contributor is an agent
  int threads = 1;                 // caps worker count; pixels stay deterministic
};

ImageBuffer render(const Camera& camera, const std::vector<WorldGaussian>& gaussians,
                   const RenderOptions& options = {});

/// Gradients with respect to every world-space Gaussian parameter, indexed
/// like the input list. Upstream is dL/d(pixel channel).
struct RenderGrads {
  std::vector<Vec3> d_mean;
  std::vector<Mat3> d_cov;  // symmetric
  std::vector<double> d_opacity;
  std::vector<Vec3> d_color;
};

RenderGrads render_backward(const Camera& camera, const std::vector<WorldGaussian>& gaussians,
                            const ImageBuffer& upstream);

/// Influence of Gaussian n's world position on the pixel color at u,
/// one sample per (pixel, channel) over the truncated support:
///   phi = J^T w c G Sigma2d^-1 (u - u_hat).
struct InfluenceSample {
  Vec2 pixel;
  int channel = 0;
  Vec3 phi = Vec3::Zero();
  double blend_weight = 0.0;  // w = opacity * transmittance
  double kernel_value = 0.0;  // G in (0, 1]
};

std::vector<InfluenceSample> influence_vectors(const Camera& camera,
                                               const std::vector<WorldGaussian>& gaussians,
                                               int n);

/// Rendering Fisher information: sum of phi phi^T over support pixels and
/// color channels. Invisible Gaussians yield the zero matrix, flagged.
struct FisherMatrix {
  Mat3 a = Mat3::Zero();
  double lambda_min = 0.0;
  bool visible = false;
};

FisherMatrix fisher_matrix(const Camera& camera, const std::vector<WorldGaussian>& gaussians, int n);

/// Accumulates Fisher information over several observations of the same
/// scene (one camera + query time per entry); needed for a full-rank A.
struct FisherObservation {
  Camera camera;
  double t = 0.0;
};

FisherMatrix fisher_accumulate(const SceneGraph& scene, Source source,
                               const std::vector<FisherObservation>& observations, int agent_index,
                               int gaussian_index);

/// Gradient of the squared-error loss L = 1/2 sum r^2 with respect to each
/// canonical mean, given the residual image r = rendered - target. Entries
/// align with world_gaussians(scene, source, t).
std::vector<Vec3> grad_canonical_means(const Camera& camera, const SceneGraph& scene, Source source,
                                       double t, const ImageBuffer& residual);

/// Pose gradient (translation xyz, rotation tangent xyz) of the same loss for
/// one agent. `queried` selects the trajectory the derivative is taken
/// against; in dual-timeline mode a mismatch with the rendered source has no
/// functional dependence and returns exact zero.
Vec6 grad_pose(const Camera& camera, const SceneGraph& scene, int agent_index, Source rendered,
               Source queried, double t, const ImageBuffer& residual);

}  // namespace dust

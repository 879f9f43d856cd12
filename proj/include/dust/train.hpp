#pragma once

// Joint optimization of canonical Gaussians and pose timelines from image
// supervision, with translation-space smoothness and drift regularizers,
// plus the PSNR/SSIM evaluation used for full-image and dynamic-area scores.

#include <string>
#include <vector>

#include "dust/render.hpp"

namespace dust {

struct LossWeights {
  double lambda_ssim = 0.2;  // weight on (1 - SSIM) inside the image loss
  double lambda_smooth = 0.01;
  double lambda_drift = 0.01;
  int drift_decay_end_step = 1000;  // default: half of total_steps
  int total_steps = 2000;
  // Held at zero: depth, opacity and body-pose terms are not modeled here.
  double lambda_depth = 0.0;
  double lambda_opacity = 0.0;
  double lambda_reg = 0.0;

  void validate() const;
};

// --- image loss -------------------------------------------------------------

struct ImageLossResult {
  double value = 0.0;
  double l1 = 0.0;
  double ssim_mean = 1.0;
  bool empty_mask = false;
  ImageBuffer grad;  // dL/d(pixel channel); filled when with_grad
};

/// Masked mean L1 plus lambda_ssim * (1 - SSIM). SSIM runs on luma with an
/// 11x11 Gaussian window (sigma 1.5) over fully-interior window positions.
ImageLossResult image_loss(const ImageBuffer& rendered, const ImageBuffer& target,
                           const std::vector<uint8_t>* mask, double lambda_ssim,
                           bool with_grad = false);

// --- pose regularizers ------------------------------------------------------

/// Distance of key i from the chord through its neighbors,
/// |p_i - [p_{i-1} + w (p_{i+1} - p_{i-1})]|, w from the timestamps.
double smoothness_at(const PoseTrajectory& traj, size_t i);

/// Mean of smoothness_at over interior keys; 0 when there are none.
double smoothness_loss(const PoseTrajectory& traj);

/// gamma(s) = max(0, 1 - s / decay_end): linear decay to exactly zero.
double drift_weight(int step, int decay_end_step);

struct TotalLoss {
  double total = 0.0;
  double image = 0.0;   // summed over both sources and all frames
  double smooth = 0.0;  // per-source chord terms, frame-averaged
  double drift = 0.0;   // gamma-weighted, against the init scene's timelines
};

/// Translation distance between the optimized and initialized key i.
double drift_at(const PoseTrajectory& optimized, const PoseTrajectory& init, size_t i);

/// gamma(s) * mean over keys of drift_at. Key sets must match.
double drift_loss(const PoseTrajectory& optimized, const PoseTrajectory& init, int step,
                  int decay_end_step);

// --- metrics ----------------------------------------------------------------

/// -10 log10(masked MSE), intensities in [0,1]. Zero MSE reports the +inf
/// sentinel; an empty mask is rejected.
double psnr(const ImageBuffer& rendered, const ImageBuffer& target,
            const std::vector<uint8_t>* mask = nullptr);

/// Mean SSIM over valid window positions intersected with the mask.
double ssim(const ImageBuffer& rendered, const ImageBuffer& target,
            const std::vector<uint8_t>* mask = nullptr);

// --- training ---------------------------------------------------------------

struct FrameRecord {
  int frame = 0;
  Source source = Source::vehicle;
  Camera camera;
  double capture_time = 0.0;  // pose query time under dual timelines
  double anchor_time = 0.0;   // pose query time under a single timeline
  ImageBuffer target;         // mask bits mark the dynamic area
};

struct TrainDataset {
  std::vector<FrameRecord> frames;
  int frame_count = 0;

  const FrameRecord& find(int frame, Source source) const;
};

/// Full objective at the current scene state: image loss plus the pose
/// regularizers of both sources, accumulated over every frame pair. The
/// init scene supplies the drift reference timelines.
TotalLoss total_loss(const SceneGraph& scene, const TrainDataset& dataset,
                     const SceneGraph& init_scene, const LossWeights& weights, int step);

struct TrainConfig {
  LossWeights weights;
  uint64_t seed = 1;
  // step sizes per parameter group
  double lr_mean_start = 1.6e-4, lr_mean_end = 1.6e-6;  // exponential decay
  double lr_color = 2.5e-3;
  double lr_opacity = 5e-2;
  double lr_covariance = 5e-3;
  double lr_pose_trans_start = 5e-4, lr_pose_trans_end = 1e-4;  // exponential decay
  double lr_pose_rot_start = 1e-5, lr_pose_rot_end = 5e-6;
  bool optimize_canonical = true;
  bool optimize_poses = true;
  // per-source residual gates; zeroing one silences that supervision stream
  double source_weight_vehicle = 1.0;
  double source_weight_infra = 1.0;
  int checkpoint_every = 0;
  std::string checkpoint_dir;
  int threads = 1;  // render worker cap; results stay bitwise identical
};

/// Loss history row; image metrics are measured on the step's frame pair.
struct StepStats {
  int step = 0;
  double total = 0.0, image = 0.0, smooth = 0.0, drift = 0.0;
  double psnr_full = 0.0, psnr_dyn = 0.0, ssim_full = 0.0, ssim_dyn = 0.0;
};

struct TrainResult {
  SceneGraph scene;
  std::vector<StepStats> history;
  bool diverged = false;
  std::string note;
};

/// Adam moments and step bookkeeping; fully determined by seed and config.
struct OptimState {
  int step = 0;
  uint64_t seed = 0;
  std::vector<double> m, v;  // flat moment buffers over all parameters
};

/// First-order training loop: one frame pair per step, cycled
/// deterministically; covariances stay SPD through a log-scale + rotation
/// parameterization. The scene's timeline mode selects dual or single
/// behavior (single mode poses every render at the frame's anchor time).
TrainResult optimize(const SceneGraph& init_scene, const TrainDataset& dataset,
                     const TrainConfig& config);

void write_history_csv(const std::vector<StepStats>& history, const std::string& path);

/// Renders every dataset frame with the scene's timelines and scores it.
struct FrameScore {
  int frame = 0;
  Source source = Source::vehicle;
  double psnr_full = 0.0, ssim_full = 0.0;
  double psnr_dyn = 0.0, ssim_dyn = 0.0;
  bool has_dynamic = false;
};

std::vector<FrameScore> evaluate_scene(const SceneGraph& scene, const TrainDataset& dataset,
                                       int threads = 1);

/// Residual squared-error over the dynamic mask, summed over frames and
/// sources; comparable against the irreducible bound.
double dynamic_squared_loss(const SceneGraph& scene, const TrainDataset& dataset);

}  // namespace dust

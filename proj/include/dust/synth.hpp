#pragma once

// Synthetic two-source dataset generation: ground-truth scenes with
// constant-velocity agents, asynchronous capture schedules, noiseless target
// renders with exact dynamic masks, and annotation perturbation for the
// pose-correction experiments.

#include <string>
#include <vector>

#include "dust/align.hpp"
#include "dust/train.hpp"

namespace dust {

/// Frame-indexed capture times; the vehicle leads the infrastructure by
/// delta_tau, anchors sit at the per-frame midpoints.
struct CaptureSchedule {
  int frame_count = 0;
  std::vector<double> t_vehicle;
  std::vector<double> t_infra;
  std::vector<double> anchors;
  double delta_tau = 0.0;

  std::vector<FramePairing> pairings() const;
  void validate() const;  // t_vehicle[i] - t_infra[i] == delta_tau (unjittered)
};

struct AnnotationNoiseSpec {
  double extrinsic_rot_deg = 0.0;    // per-timestamp perturbation magnitude
  double extrinsic_trans_m = 0.0;
  double corner_sigma_m = 0.0;       // per-box center displacement std-dev
  double dropout_probability = 0.0;  // interior-frame drop rate, gap-fill tests
};

struct SynthConfig {
  int agent_count = 2;
  std::vector<double> speeds = {10.0, 10.0};  // m/s, cycled over agents
  double delta_tau = 0.1;                     // s
  double frame_rate = 10.0;                   // Hz
  int frame_count = 20;
  int image_size = 64;
  int gaussians_per_agent = 30;
  int background_gaussians = 200;
  int parked_cars = 5;  // static annotation anchors, rendered as background
  double jitter = 0.0;  // optional per-frame capture-time jitter, s
  uint64_t seed = 1;
  AnnotationNoiseSpec noise;

  void validate() const;
};

/// Everything one generation run produces, in memory.
struct SynthOutput {
  SceneGraph scene;  // ground truth; dual timelines keyed at capture times
  CaptureSchedule schedule;
  TrainDataset dataset;  // noiseless targets with exact dynamic masks
  std::vector<CornerBox> annotations_vehicle;  // unified (world) frame
  std::vector<CornerBox> annotations_infra;    // infrastructure sensor frame
  RigidTransform extrinsic_true;               // infra frame -> unified frame
  ExtrinsicsTable extrinsic_provided;          // perturbed base, keyed by anchor
  ExtrinsicsTable extrinsic_delta_true;        // recorded correction, keyed by anchor
  std::vector<std::string> moving_track_ids;
};

CaptureSchedule make_schedule(const SynthConfig& cfg);

/// Ground-truth scene + schedule; throws when an agent leaves every frustum.
SynthOutput make_scene(const SynthConfig& cfg);

/// Fills output.dataset: per frame and source, the target render at that
/// source's capture time with the exact dynamic mask.
void render_dataset(SynthOutput& output, const SynthConfig& cfg, int threads = 1);

/// Applies the annotation noise spec: infra boxes re-expressed through a
/// per-timestamp perturbed extrinsic (the true correction is recorded),
/// per-box center noise, and seeded interior-frame dropout.
void perturb_annotations(SynthOutput& output, const SynthConfig& cfg);

/// make_scene + render_dataset + perturb_annotations.
SynthOutput generate(const SynthConfig& cfg, int threads = 1);

/// Vehicle camera at a given time (constant-velocity ego motion).
Camera vehicle_camera_at(const SynthConfig& cfg, double t);
Camera infra_camera(const SynthConfig& cfg);

}  // namespace dust

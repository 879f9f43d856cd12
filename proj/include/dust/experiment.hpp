#pragma once

// Experiment orchestration behind the CLI: config parsing (unknown keys
// rejected), dataset persistence, the align / train / verify-theory / sweep
// pipelines, and manifest emission.

#include <string>
#include <vector>

#include "dust/metrics.hpp"
#include "dust/synth.hpp"

namespace dust {

struct TrainSettings {
  LossWeights weights;
  double lr_mean_start = 1.6e-4, lr_mean_end = 1.6e-6;
  double lr_color = 2.5e-3;
  double lr_opacity = 5e-2;
  double lr_covariance = 5e-3;
  double lr_pose_trans_start = 5e-4, lr_pose_trans_end = 1e-4;
  double lr_pose_rot_start = 1e-5, lr_pose_rot_end = 5e-6;
  double init_position_noise = 0.08;  // m, canonical/background init jitter
  double init_color_noise = 0.05;
  int checkpoint_every = 0;
  std::string checkpoint_dir;
};

struct ExperimentConfig {
  SynthConfig synth;
  TrainSettings train;
  std::string mode = "dust";  // dust | single
  std::vector<double> sweep_delta_tau_ms = {0, 50, 100, 200, 300};
  std::string out_dir = "out";
  uint64_t seed = 1;
  int threads = 1;
};

/// Parses the config document; any unknown key fails with its JSON path.
ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config(const std::string& text);

// --- dataset persistence -----------------------------------------------------

void write_dataset(const SynthOutput& data, const SynthConfig& cfg, const std::string& dir);
SynthOutput load_dataset(const std::string& dir, SynthConfig& cfg_out);

// --- pipelines ----------------------------------------------------------------

struct AlignOutcome {
  ExtrinsicsTable refined;
  CooperativeLabels labels;
  struct Row {
    double anchor = 0.0;
    double rot_err_deg = 0.0;
    double trans_err_m = 0.0;
    double residual_rms = 0.0;
    int anchors_used = 0;
  };
  std::vector<Row> rows;
};

/// detect-static -> match -> solve -> regenerate -> fill gaps; recovery
/// errors scored against the dataset's recorded true corrections.
AlignOutcome run_align(const SynthOutput& data);

/// Training scene initialized from labels (pose timelines) and the perturbed
/// ground-truth gaussians; collapsed to the anchors in single mode.
SceneGraph build_init_scene(const SynthOutput& data, const std::vector<CornerBox>& labels,
                            const TrainSettings& settings, uint64_t seed, TimelineMode mode);

struct TrainOutcome {
  TrainResult result;
  std::vector<MetricRow> rows;
};

TrainOutcome run_train(const SynthOutput& data, const SynthConfig& synth_cfg,
                       const TrainSettings& settings, uint64_t seed, const std::string& mode,
                       const std::string& experiment_id, int threads = 1);

/// Per-frame irreducible bound from Fisher matrices measured on the
/// ground-truth scene, summed over frames and agents.
double measured_irreducible_bound(const SynthOutput& data, const SynthConfig& cfg);

// --- CLI entry points (return process exit codes: 0 ok, 1 failed checks) ----

int cmd_synth(const ExperimentConfig& cfg, const std::string& out_dir);
int cmd_align(const ExperimentConfig& cfg, const std::string& dataset_dir,
              const std::string& out_dir);
int cmd_train(const ExperimentConfig& cfg, const std::string& dataset_dir,
              const std::string& out_dir);
int cmd_verify_theory(const ExperimentConfig& cfg, const std::string& out_dir);
int cmd_sweep(const ExperimentConfig& cfg, const std::string& out_dir);

}  // namespace dust

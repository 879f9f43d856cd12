#pragma once

// Scene graph with decoupled per-source pose timelines: each dynamic agent
// owns one canonical Gaussian set plus a vehicle timeline and an
// infrastructure timeline. Collapsing to a single shared timeline yields the
// baseline representation.

#include <string>
#include <vector>

#include "dust/geom.hpp"

namespace dust {

enum class Source { vehicle, infra };

inline const char* source_name(Source s) { return s == Source::vehicle ? "vehicle" : "infra"; }

/// One body-frame Gaussian primitive: mean (m), SPD covariance (m^2),
/// opacity in (0,1), constant RGB color in [0,1].
struct CanonicalGaussian {
  Vec3 mean = Vec3::Zero();
  Mat3 covariance = Mat3::Identity();
  double opacity = 0.5;
  Vec3 color = Vec3::Constant(0.5);

  void validate() const;  // throws on violated invariants
};

/// Timestamped pose sequence for one source; timestamps strictly increasing.
struct PoseTrajectory {
  struct Key {
    double t = 0.0;  // seconds
    RigidTransform pose;
  };
  std::vector<Key> keys;
  Source source = Source::vehicle;

  void validate() const;
};

/// Constant extrapolation outside the key range; lerp translation and
/// slerp rotation between bracketing keys otherwise.
RigidTransform query_pose(const PoseTrajectory& traj, double t);

/// Dynamic agent: shared canonical set + one pose timeline per source.
struct AgentNode {
  std::string id;
  std::vector<CanonicalGaussian> canonical;
  PoseTrajectory trajectory_vehicle;
  PoseTrajectory trajectory_infra;
};

enum class TimelineMode { dual, single };

struct SceneGraph {
  std::vector<CanonicalGaussian> background;  // world frame, time-invariant
  std::vector<AgentNode> agents;
  /// single: both sources are served by trajectory_vehicle (the collapsed
  /// timeline); trajectory_infra is ignored.
  TimelineMode timeline_mode = TimelineMode::dual;

  void validate() const;  // unique agent ids + per-part invariants
  const PoseTrajectory& trajectory(const AgentNode& agent, Source source) const;
};

/// World-frame view of one canonical Gaussian; provenance identifies the
/// originating node: agent_index < 0 means background.
struct WorldGaussian {
  Vec3 mean;
  Mat3 covariance;
  double opacity;
  Vec3 color;
  int agent_index = -1;
  int gaussian_index = 0;
  int ordinal = 0;  // stable depth-sort tie break
};

/// Background passed through unchanged; each agent transformed by its
/// source-matching trajectory queried at t.
std::vector<WorldGaussian> world_gaussians(const SceneGraph& scene, Source source, double t);

/// Single-timeline baseline: one trajectory keyed at the anchors,
/// initialized from the vehicle trajectory, served to both sources.
SceneGraph collapse_to_single_timeline(const SceneGraph& scene, const std::vector<double>& anchors);

/// Lossless structured-text round trip (>= 9 significant digits per float).
std::string scene_to_json(const SceneGraph& scene);
SceneGraph scene_from_json(const std::string& text);
void save_scene(const SceneGraph& scene, const std::string& path);
SceneGraph load_scene(const std::string& path);

}  // namespace dust

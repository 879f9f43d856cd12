#pragma once

// Static-anchor pose correction: cross-view matching of parked vehicles,
// 6-DoF corner-alignment refinement of the infrastructure-to-vehicle
// extrinsic, cooperative label regeneration, and short track-gap filling.

#include <string>
#include <vector>

#include "dust/lbfgs.hpp"
#include "dust/scene.hpp"

namespace dust {

inline constexpr double kStaticDisplacementThreshold = 1.0;  // m, strict
inline constexpr double kMatchGate = 3.0;                    // m, post-assignment

/// Oriented 3D box annotation. Corner k carries signs
/// (k&1 ? + : -, k&2 ? + : -, k&4 ? + : -) on extent/2 along local x, y, z.
struct CornerBox {
  std::string track_id;
  double timestamp = 0.0;  // s
  Vec3 center = Vec3::Zero();
  UnitQuaternion orientation;
  Vec3 extent = Vec3::Ones();  // full side lengths, m
  Source source = Source::vehicle;
  int static_flag = -1;  // 1 static, 0 moving, -1 unknown

  Eigen::Matrix<double, 8, 3> corners() const;
};

CornerBox transform_box(const RigidTransform& t, const CornerBox& box);

/// Tracks flagged static when the net center displacement first-to-last is
/// strictly below the threshold; single-frame tracks stay unknown.
std::vector<int> detect_static(const std::vector<std::vector<CornerBox>>& tracks,
                               double threshold = kStaticDisplacementThreshold);

struct MatchedPair {
  std::string vehicle_id, infra_id;
  double cost = 0.0;  // m, center distance after the base transform
  CornerBox vehicle_box, infra_box;
};

struct Matching {
  std::vector<MatchedPair> pairs;
};

/// Minimum-total-cost one-to-one assignment on square-padded costs.
/// Returns the column assigned to each row, -1 for padded rows.
std::vector<int> hungarian_assignment(const Eigen::MatrixXd& cost);

/// Hungarian matching on center distance; infra boxes are brought into the
/// vehicle frame by `base` before costing. Pairs costlier than the gate are
/// dropped after the assignment.
Matching match_boxes(const std::vector<CornerBox>& vehicle, const std::vector<CornerBox>& infra,
                     const RigidTransform& base, double gate = kMatchGate);

/// Mean over matched boxes of the squared Frobenius corner alignment error
/// |X_veh - delta base X_infra|_F^2 (transforms applied row-wise).
double corner_objective(const RigidTransform& delta, const RigidTransform& base, const Matching& m);

struct ExtrinsicCorrection {
  RigidTransform base;
  RigidTransform correction;
  double residual_rms = 0.0;  // per-component corner residual RMS, m
  bool converged = false;
  int iterations = 0;
  std::vector<double> objective_history;

  RigidTransform refined() const { return se3_compose(correction, base); }
};

/// L-BFGS over 9 parameters (6D rotation + translation) with the analytic
/// gradient of the quadratic corner objective. Throws on an empty matching
/// or degenerate (collinear-corner) boxes.
ExtrinsicCorrection solve_pose_correction(const RigidTransform& base, const Matching& matching,
                                          const RigidTransform& init = RigidTransform::identity());

/// Refined extrinsic per timestamp; timestamps must match annotation rows.
struct ExtrinsicsTable {
  std::vector<double> timestamps;
  std::vector<RigidTransform> transforms;

  const RigidTransform* find(double t) const;
};

/// One cooperative frame: the two capture times it pairs and its anchor
/// timestamp (the key into the refined-extrinsics table).
struct FramePairing {
  double t_vehicle = 0.0;
  double t_infra = 0.0;
  double anchor = 0.0;
};

struct CooperativeLabels {
  std::vector<CornerBox> boxes;  // unified (vehicle) frame
  struct FrameInfo {
    double anchor = 0.0;
    bool extrinsic_missing = false;  // fell back to the base extrinsic
    int merged = 0;
    int infra_only = 0;
  };
  std::vector<FrameInfo> frames;
};

/// Merges co-visible objects per frame pair (vehicle geometry kept as the
/// reference), projects single-source infrastructure objects into the
/// unified frame, keys output by track id and timestamp.
CooperativeLabels regenerate_labels(const std::vector<CornerBox>& vehicle_boxes,
                                    const std::vector<CornerBox>& infra_boxes,
                                    const RigidTransform& base, const ExtrinsicsTable& refined,
                                    const std::vector<FramePairing>& pairing);

/// Fills missing frames bounded on both sides by valid ones, for gaps of at
/// most two frames: center by lerp, orientation by slerp, extent copied from
/// the earlier bounding frame. Longer and boundary gaps stay untouched.
std::vector<CornerBox> fill_gaps(const std::vector<CornerBox>& track,
                                 const std::vector<double>& frame_times);

// Line-oriented annotation records:
//   track_id timestamp cx cy cz qw qx qy qz ex ey ez source static
void save_annotations(const std::vector<CornerBox>& boxes, const std::string& path);
std::vector<CornerBox> load_annotations(const std::string& path);

void save_extrinsics(const ExtrinsicsTable& table, const std::string& path);
ExtrinsicsTable load_extrinsics(const std::string& path);

}  // namespace dust

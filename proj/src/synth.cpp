#include "dust/synth.hpp"

#include <cmath>
#include <stdexcept>

#include "dust/rng.hpp"

namespace dust {

namespace {

constexpr double kAgentZ = 0.9;
const Vec3 kAgentExtent(4.0, 1.8, 1.5);

Vec3 agent_start(int index) {
  return index % 2 == 0 ? Vec3(-9.5 + 1.5 * (index / 2), 0.0, kAgentZ)
                        : Vec3(-4.0 + 1.5 * (index / 2), 2.5, kAgentZ);
}

Vec3 parked_center(int index) { return Vec3(-8.0 + 4.0 * index, 4.5, kAgentZ); }

}  // namespace

std::vector<FramePairing> CaptureSchedule::pairings() const {
  std::vector<FramePairing> out(frame_count);
  for (int i = 0; i < frame_count; ++i) out[i] = {t_vehicle[i], t_infra[i], anchors[i]};
  return out;
}

void CaptureSchedule::validate() const {
  if (frame_count <= 0) throw std::invalid_argument("schedule needs at least one frame");
  for (int i = 0; i < frame_count; ++i)
    if (std::abs((t_vehicle[i] - t_infra[i]) - delta_tau) > 1e-6)
      throw std::invalid_argument("capture offset drifted from the configured delta_tau");
}

void SynthConfig::validate() const {
  if (agent_count < 1 || speeds.empty()) throw std::invalid_argument("need at least one agent and speed");
  if (frame_count < 1 || frame_rate <= 0) throw std::invalid_argument("bad frame schedule");
  if (image_size < 16) throw std::invalid_argument("image size must be at least 16");
  if (gaussians_per_agent < 1 || background_gaussians < 1)
    throw std::invalid_argument("gaussian counts must be positive");
}

CaptureSchedule make_schedule(const SynthConfig& cfg) {
  CaptureSchedule s;
  s.frame_count = cfg.frame_count;
  s.delta_tau = cfg.delta_tau;
  Rng rng(cfg.seed ^ 0x7ead11ull);
  for (int i = 0; i < cfg.frame_count; ++i) {
    const double anchor = i / cfg.frame_rate;
    const double jitter = cfg.jitter > 0 ? rng.uniform(-cfg.jitter, cfg.jitter) : 0.0;
    s.anchors.push_back(anchor);
    s.t_vehicle.push_back(anchor + 0.5 * (cfg.delta_tau + jitter));
    s.t_infra.push_back(anchor - 0.5 * (cfg.delta_tau + jitter));
  }
  if (cfg.jitter == 0.0) s.validate();
  return s;
}

Camera vehicle_camera_at(const SynthConfig& cfg, double t) {
  const Vec3 eye0(-6.0, -10.0, 2.0);
  // convoy with the lead agent; keep the ego moving even in static scenes
  const Vec3 ego_velocity(std::max(4.0, cfg.speeds.front()), 0.0, 0.0);
  const Vec3 eye = eye0 + ego_velocity * t;
  // fixed orientation (toward the lead lane) while the ego translates
  const Camera base = make_look_at_camera(eye0, Vec3(-8.0, 2.0, 0.8), Vec3(0, 0, 1),
                                          1.05 * cfg.image_size, cfg.image_size, cfg.image_size);
  Camera cam = base;
  const Mat3 r = base.world_to_camera.rotation_matrix();
  cam.world_to_camera = {base.world_to_camera.rotation, -(r * eye)};
  return cam;
}

Camera infra_camera(const SynthConfig& cfg) {
  return make_look_at_camera(Vec3(0.0, 14.0, 6.0), Vec3(0.0, 0.5, 0.8), Vec3(0, 0, 1),
                             0.65 * cfg.image_size, cfg.image_size, cfg.image_size);
}

namespace {

bool in_frustum(const Camera& cam, const Vec3& point) {
  WorldGaussian probe;
  probe.mean = point;
  probe.covariance = 1e-4 * Mat3::Identity();
  const auto f = project(cam, probe);
  if (!f) return false;
  return f->mean2d.x() >= 0 && f->mean2d.x() <= cam.width && f->mean2d.y() >= 0 &&
         f->mean2d.y() <= cam.height;
}

CanonicalGaussian sample_cluster_gaussian(Rng& rng, const Vec3& extent, const Vec3& base_color) {
  CanonicalGaussian g;
  for (int k = 0; k < 3; ++k) g.mean(k) = rng.uniform(-0.5, 0.5) * extent(k) * 0.85;
  const double sigma = rng.uniform(0.22, 0.32);
  g.covariance = sigma * sigma * Mat3::Identity();
  g.opacity = rng.uniform(0.8, 0.95);
  for (int k = 0; k < 3; ++k)
    g.color(k) = std::clamp(base_color(k) + rng.uniform(-0.08, 0.08), 0.02, 0.98);
  return g;
}

}  // namespace

SynthOutput make_scene(const SynthConfig& cfg) {
  cfg.validate();
  SynthOutput out;
  out.schedule = make_schedule(cfg);
  Rng rng(cfg.seed);

  // static background: ground plane and a back wall
  for (int i = 0; i < cfg.background_gaussians; ++i) {
    CanonicalGaussian g;
    const bool wall = i % 3 == 2;
    if (wall) {
      g.mean = Vec3(rng.uniform(-14.0, 14.0), 7.0, rng.uniform(0.0, 4.0));
      g.color = Vec3(0.45, 0.42, 0.4) + 0.1 * Vec3(rng.uniform(), rng.uniform(), rng.uniform());
    } else {
      g.mean = Vec3(rng.uniform(-14.0, 14.0), rng.uniform(-2.0, 6.0), 0.0);
      g.color = Vec3(0.35, 0.4, 0.35) + 0.1 * Vec3(rng.uniform(), rng.uniform(), rng.uniform());
    }
    const double sigma = rng.uniform(0.35, 0.55);
    g.covariance = sigma * sigma * Mat3::Identity();
    g.opacity = rng.uniform(0.6, 0.8);
    out.scene.background.push_back(g);
  }

  // parked cars render as static clusters and anchor the pose correction
  std::vector<Vec3> parked_centers;
  for (int p = 0; p < cfg.parked_cars; ++p) {
    const Vec3 center = parked_center(p);
    parked_centers.push_back(center);
    const Vec3 color(0.55 + 0.08 * (p % 3), 0.55 - 0.05 * (p % 4), 0.6);
    for (int i = 0; i < std::max(6, cfg.gaussians_per_agent / 3); ++i) {
      CanonicalGaussian g = sample_cluster_gaussian(rng, kAgentExtent, color);
      g.mean += center;
      out.scene.background.push_back(g);
    }
  }

  // moving agents: rigid clusters on exact constant-velocity tracks
  const Vec3 agent_base_colors[] = {{0.85, 0.2, 0.15}, {0.15, 0.3, 0.85}, {0.9, 0.75, 0.2},
                                    {0.2, 0.8, 0.5}};
  for (int a = 0; a < cfg.agent_count; ++a) {
    AgentNode node;
    node.id = "agent" + std::to_string(a);
    const Vec3 base_color = agent_base_colors[a % 4];
    for (int i = 0; i < cfg.gaussians_per_agent; ++i)
      node.canonical.push_back(sample_cluster_gaussian(rng, kAgentExtent, base_color));

    const double speed = cfg.speeds[a % cfg.speeds.size()];
    const Vec3 velocity(speed, 0.0, 0.0);
    const Vec3 start = agent_start(a);
    auto pose_at = [&](double t) {
      return RigidTransform{UnitQuaternion::identity(), start + velocity * t};
    };
    node.trajectory_vehicle.source = Source::vehicle;
    node.trajectory_infra.source = Source::infra;
    for (int i = 0; i < cfg.frame_count; ++i) {
      node.trajectory_vehicle.keys.push_back(
          {out.schedule.t_vehicle[i], pose_at(out.schedule.t_vehicle[i])});
      node.trajectory_infra.keys.push_back(
          {out.schedule.t_infra[i], pose_at(out.schedule.t_infra[i])});
    }
    out.scene.agents.push_back(std::move(node));
    out.moving_track_ids.push_back("agent" + std::to_string(a));
  }
  out.scene.validate();

  // every agent must stay inside at least one frustum at every frame
  for (int i = 0; i < cfg.frame_count; ++i) {
    const Camera veh_cam = vehicle_camera_at(cfg, out.schedule.t_vehicle[i]);
    const Camera inf_cam = infra_camera(cfg);
    for (const auto& agent : out.scene.agents) {
      const Vec3 pos_v = query_pose(agent.trajectory_vehicle, out.schedule.t_vehicle[i]).translation;
      const Vec3 pos_f = query_pose(agent.trajectory_infra, out.schedule.t_infra[i]).translation;
      if (!in_frustum(veh_cam, pos_v) && !in_frustum(inf_cam, pos_f))
        throw std::invalid_argument("agent " + agent.id + " leaves both frusta at frame " +
                                    std::to_string(i));
    }
  }

  // exact annotations in each source's own frame and capture clock
  const RigidTransform infra_cam_pose = infra_camera(cfg).world_to_camera;  // world -> infra
  out.extrinsic_true = se3_inverse(infra_cam_pose);                          // infra -> world
  auto annotate = [&](Source source) {
    std::vector<CornerBox> boxes;
    for (int i = 0; i < cfg.frame_count; ++i) {
      const double t =
          source == Source::vehicle ? out.schedule.t_vehicle[i] : out.schedule.t_infra[i];
      for (size_t a = 0; a < out.scene.agents.size(); ++a) {
        const auto& traj = source == Source::vehicle ? out.scene.agents[a].trajectory_vehicle
                                                     : out.scene.agents[a].trajectory_infra;
        CornerBox b;
        b.track_id = out.scene.agents[a].id;
        b.timestamp = t;
        const RigidTransform pose = query_pose(traj, t);
        b.center = pose.translation;
        b.orientation = pose.rotation;
        b.extent = kAgentExtent;
        b.source = source;
        b.static_flag = -1;
        boxes.push_back(b);
      }
      for (size_t p = 0; p < parked_centers.size(); ++p) {
        CornerBox b;
        b.track_id = "parked" + std::to_string(p);
        b.timestamp = t;
        b.center = parked_centers[p];
        b.orientation = UnitQuaternion::identity();
        b.extent = kAgentExtent;
        b.source = source;
        b.static_flag = -1;
        boxes.push_back(b);
      }
    }
    if (source == Source::infra)
      for (auto& b : boxes) b = transform_box(infra_cam_pose, b);  // express in infra frame
    return boxes;
  };
  out.annotations_vehicle = annotate(Source::vehicle);
  out.annotations_infra = annotate(Source::infra);

  // unperturbed tables; perturb_annotations overwrites them
  for (double anchor : out.schedule.anchors) {
    out.extrinsic_provided.timestamps.push_back(anchor);
    out.extrinsic_provided.transforms.push_back(out.extrinsic_true);
    out.extrinsic_delta_true.timestamps.push_back(anchor);
    out.extrinsic_delta_true.transforms.push_back(RigidTransform::identity());
  }
  return out;
}

void render_dataset(SynthOutput& out, const SynthConfig& cfg, int threads) {
  out.dataset.frames.clear();
  out.dataset.frame_count = cfg.frame_count;
  RenderOptions opt;
  opt.record_agent_mask = true;
  opt.threads = threads;
  for (int i = 0; i < cfg.frame_count; ++i) {
    for (const Source source : {Source::vehicle, Source::infra}) {
      FrameRecord rec;
      rec.frame = i;
      rec.source = source;
      rec.capture_time =
          source == Source::vehicle ? out.schedule.t_vehicle[i] : out.schedule.t_infra[i];
      rec.anchor_time = out.schedule.anchors[i];
      rec.camera = source == Source::vehicle ? vehicle_camera_at(cfg, rec.capture_time)
                                             : infra_camera(cfg);
      rec.target = render(rec.camera, world_gaussians(out.scene, source, rec.capture_time), opt);
      out.dataset.frames.push_back(std::move(rec));
    }
  }
}

void perturb_annotations(SynthOutput& out, const SynthConfig& cfg) {
  Rng rng(cfg.seed ^ 0x9e02b5ull);
  const auto& noise = cfg.noise;

  // per-anchor extrinsic perturbation: the provided base is wrong by
  // delta_true^-1, so solving the corner objective should recover delta_true
  out.extrinsic_provided.timestamps.clear();
  out.extrinsic_provided.transforms.clear();
  out.extrinsic_delta_true.timestamps.clear();
  out.extrinsic_delta_true.transforms.clear();
  for (double anchor : out.schedule.anchors) {
    RigidTransform delta = RigidTransform::identity();
    if (noise.extrinsic_rot_deg > 0 || noise.extrinsic_trans_m > 0) {
      const double angle = rng.uniform(0.0, noise.extrinsic_rot_deg) * M_PI / 180.0;
      delta = {UnitQuaternion::from_axis_angle(rng.unit_vec3(), angle),
               rng.uniform(0.0, noise.extrinsic_trans_m) * rng.unit_vec3()};
    }
    out.extrinsic_provided.timestamps.push_back(anchor);
    out.extrinsic_provided.transforms.push_back(se3_compose(se3_inverse(delta), out.extrinsic_true));
    out.extrinsic_delta_true.timestamps.push_back(anchor);
    out.extrinsic_delta_true.transforms.push_back(delta);
  }

  if (noise.corner_sigma_m > 0) {
    for (auto& b : out.annotations_vehicle) b.center += noise.corner_sigma_m * rng.normal_vec3();
    for (auto& b : out.annotations_infra) b.center += noise.corner_sigma_m * rng.normal_vec3();
  }

  if (noise.dropout_probability > 0) {
    auto drop = [&](std::vector<CornerBox>& boxes, const std::vector<double>& times) {
      std::vector<CornerBox> kept;
      for (const auto& b : boxes) {
        const bool interior =
            b.timestamp > times.front() + 1e-9 && b.timestamp < times.back() - 1e-9;
        const bool moving =
            std::find(out.moving_track_ids.begin(), out.moving_track_ids.end(), b.track_id) !=
            out.moving_track_ids.end();
        if (interior && moving && rng.uniform() < noise.dropout_probability) continue;
        kept.push_back(b);
      }
      boxes = std::move(kept);
    };
    drop(out.annotations_vehicle, out.schedule.t_vehicle);
    drop(out.annotations_infra, out.schedule.t_infra);
  }
}

SynthOutput generate(const SynthConfig& cfg, int threads) {
  SynthOutput out = make_scene(cfg);
  render_dataset(out, cfg, threads);
  perturb_annotations(out, cfg);
  return out;
}

}  // namespace dust

#include "dust/scene.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace dust {

void CanonicalGaussian::validate() const {
  Eigen::SelfAdjointEigenSolver<Mat3> es(covariance);
  if (es.eigenvalues().minCoeff() <= 1e-12)
    throw std::invalid_argument("gaussian covariance not positive definite");
  if (!(opacity > 0.0 && opacity < 1.0))
    throw std::invalid_argument("gaussian opacity outside (0,1)");
}

void PoseTrajectory::validate() const {
  if (keys.empty()) throw std::invalid_argument("trajectory has no keys");
  for (size_t i = 1; i < keys.size(); ++i)
    if (!(keys[i].t > keys[i - 1].t))
      throw std::invalid_argument("trajectory timestamps not strictly increasing");
}

RigidTransform query_pose(const PoseTrajectory& traj, double t) {
  traj.validate();
  const auto& keys = traj.keys;
  if (t <= keys.front().t) return keys.front().pose;
  if (t >= keys.back().t) return keys.back().pose;
  size_t hi = 1;
  while (keys[hi].t < t) ++hi;
  const auto& a = keys[hi - 1];
  const auto& b = keys[hi];
  if (t == b.t) return b.pose;
  const double w = (t - a.t) / (b.t - a.t);
  return {slerp(a.pose.rotation, b.pose.rotation, w),
          lerp_vec3(a.pose.translation, b.pose.translation, w)};
}

void SceneGraph::validate() const {
  std::set<std::string> ids;
  for (const auto& g : background) g.validate();
  for (const auto& a : agents) {
    if (!ids.insert(a.id).second) throw std::invalid_argument("duplicate agent id: " + a.id);
    for (const auto& g : a.canonical) g.validate();
    a.trajectory_vehicle.validate();
    if (timeline_mode == TimelineMode::dual) a.trajectory_infra.validate();
  }
}

const PoseTrajectory& SceneGraph::trajectory(const AgentNode& agent, Source source) const {
  if (timeline_mode == TimelineMode::single) return agent.trajectory_vehicle;
  return source == Source::vehicle ? agent.trajectory_vehicle : agent.trajectory_infra;
}

std::vector<WorldGaussian> world_gaussians(const SceneGraph& scene, Source source, double t) {
  std::vector<WorldGaussian> out;
  size_t total = scene.background.size();
  for (const auto& a : scene.agents) total += a.canonical.size();
  out.reserve(total);
  int ordinal = 0;
  for (size_t i = 0; i < scene.background.size(); ++i) {
    const auto& g = scene.background[i];
    out.push_back({g.mean, g.covariance, g.opacity, g.color, -1, static_cast<int>(i), ordinal++});
  }
  for (size_t ai = 0; ai < scene.agents.size(); ++ai) {
    const auto& agent = scene.agents[ai];
    const RigidTransform pose = query_pose(scene.trajectory(agent, source), t);
    const Mat3 r = pose.rotation_matrix();
    for (size_t gi = 0; gi < agent.canonical.size(); ++gi) {
      const auto& g = agent.canonical[gi];
      out.push_back({r * g.mean + pose.translation, r * g.covariance * r.transpose(), g.opacity,
                     g.color, static_cast<int>(ai), static_cast<int>(gi), ordinal++});
    }
  }
  return out;
}

SceneGraph collapse_to_single_timeline(const SceneGraph& scene, const std::vector<double>& anchors) {
  if (anchors.empty()) throw std::invalid_argument("collapse requires at least one anchor");
  for (size_t i = 1; i < anchors.size(); ++i)
    if (!(anchors[i] > anchors[i - 1])) throw std::invalid_argument("anchors must be sorted");
  SceneGraph out = scene;
  out.timeline_mode = TimelineMode::single;
  for (auto& agent : out.agents) {
    PoseTrajectory traj;
    traj.source = Source::vehicle;
    for (double t : anchors) traj.keys.push_back({t, query_pose(agent.trajectory_vehicle, t)});
    agent.trajectory_vehicle = traj;
    agent.trajectory_infra = traj;
  }
  return out;
}

namespace {

using json = nlohmann::ordered_json;

json vec3_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from_json(const json& j) { return Vec3(j.at(0), j.at(1), j.at(2)); }

json mat3_to_json(const Mat3& m) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r) rows.push_back(json::array({m(r, 0), m(r, 1), m(r, 2)}));
  return rows;
}

Mat3 mat3_from_json(const json& j) {
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(r).at(c);
  return m;
}

json gaussian_to_json(const CanonicalGaussian& g) {
  return json{{"mean", vec3_to_json(g.mean)},
              {"covariance", mat3_to_json(g.covariance)},
              {"opacity", g.opacity},
              {"color", vec3_to_json(g.color)}};
}

CanonicalGaussian gaussian_from_json(const json& j) {
  CanonicalGaussian g;
  g.mean = vec3_from_json(j.at("mean"));
  g.covariance = mat3_from_json(j.at("covariance"));
  g.opacity = j.at("opacity");
  g.color = vec3_from_json(j.at("color"));
  return g;
}

json trajectory_to_json(const PoseTrajectory& t) {
  json keys = json::array();
  for (const auto& k : t.keys) {
    keys.push_back(json{{"t", k.t},
                        {"q", json::array({k.pose.rotation.w, k.pose.rotation.x, k.pose.rotation.y,
                                           k.pose.rotation.z})},
                        {"p", vec3_to_json(k.pose.translation)}});
  }
  return json{{"source", source_name(t.source)}, {"keys", keys}};
}

PoseTrajectory trajectory_from_json(const json& j) {
  PoseTrajectory t;
  t.source = j.at("source") == "vehicle" ? Source::vehicle : Source::infra;
  for (const auto& k : j.at("keys")) {
    const auto& q = k.at("q");
    t.keys.push_back({k.at("t"), {UnitQuaternion(q.at(0), q.at(1), q.at(2), q.at(3)),
                                  vec3_from_json(k.at("p"))}});
  }
  return t;
}

}  // namespace

std::string scene_to_json(const SceneGraph& scene) {
  json j;
  j["format"] = "dust-scene/1";
  j["timeline_mode"] = scene.timeline_mode == TimelineMode::dual ? "dual" : "single";
  json bg = json::array();
  for (const auto& g : scene.background) bg.push_back(gaussian_to_json(g));
  j["background"] = std::move(bg);
  json agents = json::array();
  for (const auto& a : scene.agents) {
    json ja;
    ja["id"] = a.id;
    json canon = json::array();
    for (const auto& g : a.canonical) canon.push_back(gaussian_to_json(g));
    ja["canonical"] = std::move(canon);
    ja["trajectory_vehicle"] = trajectory_to_json(a.trajectory_vehicle);
    ja["trajectory_infra"] = trajectory_to_json(a.trajectory_infra);
    agents.push_back(std::move(ja));
  }
  j["agents"] = std::move(agents);
  return j.dump(1);
}

SceneGraph scene_from_json(const std::string& text) {
  const json j = json::parse(text);
  if (j.at("format") != "dust-scene/1") throw std::invalid_argument("unknown scene format tag");
  SceneGraph scene;
  scene.timeline_mode = j.at("timeline_mode") == "single" ? TimelineMode::single : TimelineMode::dual;
  for (const auto& g : j.at("background")) scene.background.push_back(gaussian_from_json(g));
  for (const auto& ja : j.at("agents")) {
    AgentNode a;
    a.id = ja.at("id");
    for (const auto& g : ja.at("canonical")) a.canonical.push_back(gaussian_from_json(g));
    a.trajectory_vehicle = trajectory_from_json(ja.at("trajectory_vehicle"));
    a.trajectory_infra = trajectory_from_json(ja.at("trajectory_infra"));
    scene.agents.push_back(std::move(a));
  }
  scene.validate();
  return scene;
}

void save_scene(const SceneGraph& scene, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << scene_to_json(scene);
}

SceneGraph load_scene(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return scene_from_json(ss.str());
}

}  // namespace dust

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "dust/rng.hpp"
#include "dust/scene.hpp"

using namespace dust;

namespace {

CanonicalGaussian gaussian_at(const Vec3& mean, double sigma = 0.3) {
  CanonicalGaussian g;
  g.mean = mean;
  g.covariance = sigma * sigma * Mat3::Identity();
  g.opacity = 0.8;
  g.color = Vec3(0.6, 0.4, 0.2);
  return g;
}

SceneGraph two_source_scene() {
  SceneGraph scene;
  scene.background.push_back(gaussian_at(Vec3(0, 5, 0)));
  AgentNode agent;
  agent.id = "agent0";
  agent.canonical.push_back(gaussian_at(Vec3(0.5, 0, 0)));
  agent.canonical.push_back(gaussian_at(Vec3(-0.5, 0, 0)));
  agent.trajectory_vehicle.source = Source::vehicle;
  agent.trajectory_vehicle.keys = {{0.0, {UnitQuaternion::identity(), Vec3(0, 0, 0)}},
                                   {1.0, {UnitQuaternion::identity(), Vec3(2, 0, 0)}}};
  agent.trajectory_infra.source = Source::infra;
  agent.trajectory_infra.keys = {{0.0, {UnitQuaternion::identity(), Vec3(5, 0, 0)}},
                                 {1.0, {UnitQuaternion::identity(), Vec3(7, 0, 0)}}};
  scene.agents.push_back(agent);
  return scene;
}

}  // namespace

TEST_CASE("trajectory invariants are enforced") {
  PoseTrajectory t;
  CHECK_THROWS(t.validate());  // no keys
  t.keys = {{1.0, {}}, {1.0, {}}};
  CHECK_THROWS(t.validate());  // not strictly increasing
}

TEST_CASE("query_pose hits keys, interpolates and clamps") {
  PoseTrajectory t;
  t.keys = {{0.0, {UnitQuaternion::identity(), Vec3(0, 0, 0)}},
            {1.0, {UnitQuaternion::from_axis_angle(Vec3(0, 0, 1), M_PI / 2), Vec3(2, 0, 0)}}};

  CHECK((query_pose(t, 0.0).translation - Vec3(0, 0, 0)).norm() <= 1e-15);
  CHECK((query_pose(t, 1.0).translation - Vec3(2, 0, 0)).norm() <= 1e-15);
  // midpoint: lerp translation, slerp rotation
  const RigidTransform mid = query_pose(t, 0.5);
  CHECK((mid.translation - Vec3(1, 0, 0)).norm() <= 1e-12);
  const UnitQuaternion q45 = UnitQuaternion::from_axis_angle(Vec3(0, 0, 1), M_PI / 4);
  CHECK(mid.rotation.angle_to(q45) <= 1e-12);
  // constant extrapolation
  CHECK((query_pose(t, -5.0).translation - Vec3(0, 0, 0)).norm() <= 1e-15);
  CHECK((query_pose(t, 9.0).translation - Vec3(2, 0, 0)).norm() <= 1e-15);
}

TEST_CASE("query_pose is continuous at non-key points") {
  PoseTrajectory t;
  t.keys = {{0.0, {UnitQuaternion::identity(), Vec3(0, 0, 0)}},
            {1.0, {UnitQuaternion::from_axis_angle(Vec3(1, 0, 0), 0.8), Vec3(3, 1, 0)}}};
  const double eps = 1e-6;
  for (double at : {0.25, 0.5, 0.75}) {
    const RigidTransform a = query_pose(t, at);
    const RigidTransform b = query_pose(t, at + eps);
    CHECK((a.translation - b.translation).norm() <= 1e-5);
    CHECK(a.rotation.angle_to(b.rotation) <= 1e-5);
  }
}

TEST_CASE("world_gaussians transforms agents per source and passes background") {
  SceneGraph scene = two_source_scene();
  const auto veh = world_gaussians(scene, Source::vehicle, 0.0);
  const auto inf = world_gaussians(scene, Source::infra, 0.0);

  // background unchanged
  CHECK((veh[0].mean - Vec3(0, 5, 0)).norm() <= 1e-15);
  CHECK(veh[0].agent_index == -1);

  // pure translation: world mean = canonical + key translation, covariance kept
  CHECK((veh[1].mean - Vec3(0.5, 0, 0)).norm() <= 1e-15);
  CHECK((inf[1].mean - Vec3(5.5, 0, 0)).norm() <= 1e-15);
  CHECK((veh[1].covariance - scene.agents[0].canonical[0].covariance).norm() <= 1e-15);

  // same canonical storage serves both views
  scene.agents[0].canonical[0].mean = Vec3(9, 9, 9);
  const auto veh2 = world_gaussians(scene, Source::vehicle, 0.0);
  const auto inf2 = world_gaussians(scene, Source::infra, 0.0);
  CHECK((veh2[1].mean - Vec3(9, 9, 9)).norm() <= 1e-15);
  CHECK((inf2[1].mean - (Vec3(9, 9, 9) + Vec3(5, 0, 0))).norm() <= 1e-15);
}

TEST_CASE("world covariance stays SPD under random rotations") {
  Rng rng(23);
  for (int i = 0; i < 30; ++i) {
    SceneGraph scene;
    AgentNode agent;
    agent.id = "a";
    CanonicalGaussian g = gaussian_at(Vec3::Zero());
    g.covariance = rng.random_spd(1e-3, 2.0);
    agent.canonical.push_back(g);
    agent.trajectory_vehicle.keys = {{0.0, {rng.random_rotation(), rng.normal_vec3()}}};
    agent.trajectory_infra = agent.trajectory_vehicle;
    agent.trajectory_infra.source = Source::infra;
    scene.agents.push_back(agent);
    const auto world = world_gaussians(scene, Source::vehicle, 0.0);
    Eigen::SelfAdjointEigenSolver<Mat3> es(world[0].covariance);
    CHECK(es.eigenvalues().minCoeff() > 0.0);
  }
}

TEST_CASE("collapse keys one timeline at the anchors from the vehicle view") {
  SceneGraph scene = two_source_scene();
  // constant-velocity vehicle track: v = (2,0,0) m/s over keys at t=0 and 1
  const SceneGraph single = collapse_to_single_timeline(scene, {0.25, 0.5, 0.75});
  CHECK(single.timeline_mode == TimelineMode::single);
  const auto& keys = single.agents[0].trajectory_vehicle.keys;
  REQUIRE(keys.size() == 3);
  CHECK((keys[1].pose.translation - Vec3(1, 0, 0)).norm() <= 1e-12);
  // both sources are served the same pose
  const auto v = world_gaussians(single, Source::vehicle, 0.5);
  const auto f = world_gaussians(single, Source::infra, 0.5);
  CHECK((v[1].mean - f[1].mean).norm() <= 1e-15);
}

TEST_CASE("collapse midpoint anchor sits half the offset from each true pose") {
  // agent at 10 m/s, captures 0.1 s apart, anchor in the middle
  const double speed = 10.0, dtau = 0.1;
  SceneGraph scene;
  AgentNode agent;
  agent.id = "agent0";
  agent.canonical.push_back(gaussian_at(Vec3::Zero()));
  auto key = [&](double t) {
    return PoseTrajectory::Key{t, {UnitQuaternion::identity(), Vec3(speed * t, 0, 0)}};
  };
  agent.trajectory_vehicle.keys = {key(0.05), key(1.05)};
  agent.trajectory_infra.source = Source::infra;
  agent.trajectory_infra.keys = {key(-0.05), key(0.95)};
  scene.agents.push_back(agent);

  const SceneGraph single = collapse_to_single_timeline(scene, {0.5});
  const Vec3 anchored = single.agents[0].trajectory_vehicle.keys[0].pose.translation;
  const Vec3 true_veh(speed * 0.55, 0, 0);
  const Vec3 true_inf(speed * 0.45, 0, 0);
  CHECK((anchored - true_veh).norm() == doctest::Approx(speed * dtau / 2).epsilon(1e-9));
  CHECK((anchored - true_inf).norm() == doctest::Approx(speed * dtau / 2).epsilon(1e-9));
}

TEST_CASE("collapse at the vehicle capture time keeps the vehicle view exact") {
  const double speed = 10.0, dtau = 0.1;
  SceneGraph scene;
  AgentNode agent;
  agent.id = "agent0";
  agent.canonical.push_back(gaussian_at(Vec3::Zero()));
  auto key = [&](double t) {
    return PoseTrajectory::Key{t, {UnitQuaternion::identity(), Vec3(speed * t, 0, 0)}};
  };
  agent.trajectory_vehicle.keys = {key(0.05), key(1.05)};
  agent.trajectory_infra.source = Source::infra;
  agent.trajectory_infra.keys = {key(0.05 - dtau), key(1.05 - dtau)};
  scene.agents.push_back(agent);

  const SceneGraph single = collapse_to_single_timeline(scene, {0.05});
  const Vec3 anchored = single.agents[0].trajectory_vehicle.keys[0].pose.translation;
  CHECK((anchored - Vec3(speed * 0.05, 0, 0)).norm() <= 1e-12);              // vehicle exact
  CHECK((anchored - Vec3(speed * (0.05 - dtau), 0, 0)).norm() ==
        doctest::Approx(speed * dtau).epsilon(1e-9));  // infra off by |v| dtau
}

TEST_CASE("scene serialization round trip is lossless") {
  Rng rng(31);
  SceneGraph scene = two_source_scene();
  scene.agents[0].canonical[0].covariance = rng.random_spd(0.01, 1.0);
  scene.agents[0].trajectory_vehicle.keys[1].pose.rotation = rng.random_rotation();

  const std::string text = scene_to_json(scene);
  const SceneGraph back = scene_from_json(text);
  REQUIRE(back.agents.size() == scene.agents.size());
  CHECK((back.agents[0].canonical[0].covariance - scene.agents[0].canonical[0].covariance)
            .norm() <= 1e-9);
  CHECK(back.agents[0].trajectory_vehicle.keys[1].pose.rotation.angle_to(
            scene.agents[0].trajectory_vehicle.keys[1].pose.rotation) <= 1e-9);

  // byte-stable re-serialization
  CHECK(scene_to_json(back) == text);

  const std::string path =
      (std::filesystem::temp_directory_path() / "dust_scene_roundtrip.json").string();
  save_scene(scene, path);
  const SceneGraph loaded = load_scene(path);
  CHECK(scene_to_json(loaded) == text);
  std::filesystem::remove(path);
}

TEST_CASE("duplicate agent ids are rejected") {
  SceneGraph scene = two_source_scene();
  scene.agents.push_back(scene.agents[0]);
  CHECK_THROWS_AS(scene.validate(), std::invalid_argument);
}

TEST_CASE("timelines may carry unequal key counts") {
  // a source may drop frames mid-sequence; the views stay independent
  SceneGraph scene = two_source_scene();
  scene.agents[0].trajectory_vehicle.keys.push_back(
      {2.0, {UnitQuaternion::identity(), Vec3(4, 0, 0)}});
  scene.validate();
  REQUIRE(scene.agents[0].trajectory_vehicle.keys.size() !=
          scene.agents[0].trajectory_infra.keys.size());
  const auto veh = world_gaussians(scene, Source::vehicle, 1.5);
  const auto inf = world_gaussians(scene, Source::infra, 1.5);
  CHECK((veh[1].mean - Vec3(3.5, 0, 0)).norm() <= 1e-12);  // interpolated on 3 keys
  CHECK((inf[1].mean - Vec3(7.5, 0, 0)).norm() <= 1e-12);  // clamped on 2 keys
}

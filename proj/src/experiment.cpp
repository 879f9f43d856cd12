#include "dust/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dust/image_io.hpp"
#include "dust/rng.hpp"

namespace fs = std::filesystem;

namespace dust {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void config_error(const std::string& where, const std::string& what) {
  throw std::invalid_argument("config error at " + where + ": " + what);
}

void require_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
  if (!obj.is_object()) config_error(where, "expected an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (!allowed.count(key)) config_error(where + "/" + key, "unknown key");
  }
}

template <typename T>
void read_field(const json& obj, const std::string& key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

SynthConfig parse_synth(const json& j, const std::string& where) {
  SynthConfig cfg;
  require_keys(j, where,
               {"agent_count", "speeds", "delta_tau", "frame_rate", "frame_count", "image_size",
                "gaussians_per_agent", "background_gaussians", "parked_cars", "jitter", "seed",
                "noise"});
  read_field(j, "agent_count", cfg.agent_count);
  read_field(j, "speeds", cfg.speeds);
  read_field(j, "delta_tau", cfg.delta_tau);
  read_field(j, "frame_rate", cfg.frame_rate);
  read_field(j, "frame_count", cfg.frame_count);
  read_field(j, "image_size", cfg.image_size);
  read_field(j, "gaussians_per_agent", cfg.gaussians_per_agent);
  read_field(j, "background_gaussians", cfg.background_gaussians);
  read_field(j, "parked_cars", cfg.parked_cars);
  read_field(j, "jitter", cfg.jitter);
  read_field(j, "seed", cfg.seed);
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    require_keys(n, where + "/noise",
                 {"extrinsic_rot_deg", "extrinsic_trans_m", "corner_sigma_m",
                  "dropout_probability"});
    read_field(n, "extrinsic_rot_deg", cfg.noise.extrinsic_rot_deg);
    read_field(n, "extrinsic_trans_m", cfg.noise.extrinsic_trans_m);
    read_field(n, "corner_sigma_m", cfg.noise.corner_sigma_m);
    read_field(n, "dropout_probability", cfg.noise.dropout_probability);
  }
  return cfg;
}

json synth_to_json(const SynthConfig& cfg) {
  json j;
  j["agent_count"] = cfg.agent_count;
  j["speeds"] = cfg.speeds;
  j["delta_tau"] = cfg.delta_tau;
  j["frame_rate"] = cfg.frame_rate;
  j["frame_count"] = cfg.frame_count;
  j["image_size"] = cfg.image_size;
  j["gaussians_per_agent"] = cfg.gaussians_per_agent;
  j["background_gaussians"] = cfg.background_gaussians;
  j["parked_cars"] = cfg.parked_cars;
  j["jitter"] = cfg.jitter;
  j["seed"] = cfg.seed;
  j["noise"] = {{"extrinsic_rot_deg", cfg.noise.extrinsic_rot_deg},
                {"extrinsic_trans_m", cfg.noise.extrinsic_trans_m},
                {"corner_sigma_m", cfg.noise.corner_sigma_m},
                {"dropout_probability", cfg.noise.dropout_probability}};
  return j;
}

TrainSettings parse_train(const json& j, const std::string& where) {
  TrainSettings t;
  require_keys(j, where,
               {"lambda_ssim", "lambda_smooth", "lambda_drift", "drift_decay_end_step",
                "total_steps", "lr_mean_start", "lr_mean_end", "lr_color", "lr_opacity", "lr_covariance",
                "lr_pose_trans_start", "lr_pose_trans_end", "lr_pose_rot_start", "lr_pose_rot_end",
                "init_position_noise", "init_color_noise", "checkpoint_every"});
  bool decay_given = j.contains("drift_decay_end_step");
  read_field(j, "lambda_ssim", t.weights.lambda_ssim);
  read_field(j, "lambda_smooth", t.weights.lambda_smooth);
  read_field(j, "lambda_drift", t.weights.lambda_drift);
  read_field(j, "total_steps", t.weights.total_steps);
  read_field(j, "drift_decay_end_step", t.weights.drift_decay_end_step);
  if (!decay_given) t.weights.drift_decay_end_step = t.weights.total_steps / 2;
  read_field(j, "lr_mean_start", t.lr_mean_start);
  read_field(j, "lr_mean_end", t.lr_mean_end);
  read_field(j, "lr_color", t.lr_color);
  read_field(j, "lr_opacity", t.lr_opacity);
  read_field(j, "lr_covariance", t.lr_covariance);
  read_field(j, "lr_pose_trans_start", t.lr_pose_trans_start);
  read_field(j, "lr_pose_trans_end", t.lr_pose_trans_end);
  read_field(j, "lr_pose_rot_start", t.lr_pose_rot_start);
  read_field(j, "lr_pose_rot_end", t.lr_pose_rot_end);
  read_field(j, "init_position_noise", t.init_position_noise);
  read_field(j, "init_color_noise", t.init_color_noise);
  read_field(j, "checkpoint_every", t.checkpoint_every);
  return t;
}

std::string iso_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << text;
}

std::string frame_stem(int frame, Source source) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "f%03d_%s", frame, source_name(source));
  return buf;
}

}  // namespace

namespace {

ExperimentConfig parse_experiment_config_checked(const json& j) {
  require_keys(j, "$", {"synth", "train", "mode", "sweep", "out_dir", "seed", "threads"});
  ExperimentConfig cfg;
  if (j.contains("synth")) cfg.synth = parse_synth(j.at("synth"), "$/synth");
  if (j.contains("train")) cfg.train = parse_train(j.at("train"), "$/train");
  read_field(j, "mode", cfg.mode);
  if (cfg.mode != "dust" && cfg.mode != "single")
    config_error("$/mode", "must be 'dust' or 'single'");
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    require_keys(s, "$/sweep", {"delta_tau_ms"});
    read_field(s, "delta_tau_ms", cfg.sweep_delta_tau_ms);
  }
  read_field(j, "out_dir", cfg.out_dir);
  read_field(j, "seed", cfg.seed);
  read_field(j, "threads", cfg.threads);
  if (cfg.threads < 1) config_error("$/threads", "must be >= 1");
  return cfg;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config parse error: ") + e.what());
  }
  try {
    return parse_experiment_config_checked(j);
  } catch (const json::exception& e) {  // wrong value types and similar
    throw std::invalid_argument(std::string("config error: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_experiment_config(ss.str());
}

// ---------------------------------------------------------------------------
// Dataset persistence

void write_dataset(const SynthOutput& data, const SynthConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  fs::create_directories(dir + "/images");
  fs::create_directories(dir + "/masks");

  write_text(dir + "/synth_config.json", synth_to_json(cfg).dump(1) + "\n");
  save_scene(data.scene, dir + "/scene_truth.json");

  json sched;
  sched["frame_count"] = data.schedule.frame_count;
  sched["delta_tau"] = data.schedule.delta_tau;
  sched["t_vehicle"] = data.schedule.t_vehicle;
  sched["t_infra"] = data.schedule.t_infra;
  sched["anchors"] = data.schedule.anchors;
  write_text(dir + "/schedule.json", sched.dump(1) + "\n");

  json manifest;
  manifest["format"] = "dust-dataset/1";
  manifest["generated_at"] = iso_now();  // the only wall-clock field
  json artifacts = json::array();
  auto add = [&](const std::string& rel, const std::string& role) {
    artifacts.push_back({{"path", rel}, {"role", role}});
  };
  add("synth_config.json", "generator configuration");
  add("scene_truth.json", "ground-truth scene");
  add("schedule.json", "capture schedule");

  for (const auto& rec : data.dataset.frames) {
    const std::string stem = frame_stem(rec.frame, rec.source);
    save_float_image(rec.target, dir + "/images/" + stem + ".imgf");
    save_ppm(rec.target, dir + "/images/" + stem + ".ppm");
    save_mask_pgm(rec.target.mask, rec.target.width, rec.target.height,
                  dir + "/masks/" + stem + ".pgm");
    add("images/" + stem + ".imgf", "target render (float32)");
    add("masks/" + stem + ".pgm", "dynamic mask");
  }

  save_annotations(data.annotations_vehicle, dir + "/annotations_vehicle.txt");
  save_annotations(data.annotations_infra, dir + "/annotations_infra.txt");
  save_extrinsics(data.extrinsic_provided, dir + "/extrinsics_provided.txt");
  save_extrinsics(data.extrinsic_delta_true, dir + "/extrinsics_delta_true.txt");
  add("annotations_vehicle.txt", "vehicle annotations (unified frame)");
  add("annotations_infra.txt", "infrastructure annotations (sensor frame)");
  add("extrinsics_provided.txt", "provided infra-to-unified extrinsic per anchor");
  add("extrinsics_delta_true.txt", "injected extrinsic correction (scoring only)");
  manifest["artifacts"] = std::move(artifacts);
  write_text(dir + "/manifest.json", manifest.dump(1) + "\n");
}

SynthOutput load_dataset(const std::string& dir, SynthConfig& cfg_out) {
  std::ifstream f(dir + "/synth_config.json");
  if (!f) throw std::runtime_error("not a dataset directory (missing synth_config.json): " + dir);
  std::stringstream ss;
  ss << f.rdbuf();
  cfg_out = parse_synth(json::parse(ss.str()), "synth_config");

  SynthOutput out;
  out.scene = load_scene(dir + "/scene_truth.json");
  out.schedule = make_schedule(cfg_out);
  out.annotations_vehicle = load_annotations(dir + "/annotations_vehicle.txt");
  out.annotations_infra = load_annotations(dir + "/annotations_infra.txt");
  out.extrinsic_provided = load_extrinsics(dir + "/extrinsics_provided.txt");
  out.extrinsic_delta_true = load_extrinsics(dir + "/extrinsics_delta_true.txt");
  const Camera infra_cam = infra_camera(cfg_out);
  out.extrinsic_true = se3_inverse(infra_cam.world_to_camera);
  for (const auto& a : out.scene.agents) out.moving_track_ids.push_back(a.id);

  out.dataset.frame_count = cfg_out.frame_count;
  for (int i = 0; i < cfg_out.frame_count; ++i)
    for (const Source source : {Source::vehicle, Source::infra}) {
      FrameRecord rec;
      rec.frame = i;
      rec.source = source;
      rec.capture_time =
          source == Source::vehicle ? out.schedule.t_vehicle[i] : out.schedule.t_infra[i];
      rec.anchor_time = out.schedule.anchors[i];
      rec.camera =
          source == Source::vehicle ? vehicle_camera_at(cfg_out, rec.capture_time) : infra_cam;
      const std::string stem = frame_stem(i, source);
      rec.target = load_float_image(dir + "/images/" + stem + ".imgf");
      int mw = 0, mh = 0;
      rec.target.mask = load_mask_pgm(dir + "/masks/" + stem + ".pgm", mw, mh);
      if (mw != rec.target.width || mh != rec.target.height)
        throw std::runtime_error("mask/image size mismatch for " + stem);
      out.dataset.frames.push_back(std::move(rec));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Align pipeline

AlignOutcome run_align(const SynthOutput& data) {
  AlignOutcome out;

  // static detection per source on per-track sequences
  auto flag_static = [](std::vector<CornerBox> boxes) {
    std::map<std::string, std::vector<CornerBox>> tracks;
    for (const auto& b : boxes) tracks[b.track_id].push_back(b);
    std::vector<std::vector<CornerBox>> seqs;
    std::vector<std::string> ids;
    for (auto& [id, seq] : tracks) {
      std::sort(seq.begin(), seq.end(),
                [](const CornerBox& a, const CornerBox& b) { return a.timestamp < b.timestamp; });
      seqs.push_back(seq);
      ids.push_back(id);
    }
    const std::vector<int> flags = detect_static(seqs);
    std::map<std::string, int> flag_of;
    for (size_t i = 0; i < ids.size(); ++i) flag_of[ids[i]] = flags[i];
    for (auto& b : boxes) b.static_flag = flag_of[b.track_id];
    return boxes;
  };
  const std::vector<CornerBox> veh = flag_static(data.annotations_vehicle);
  const std::vector<CornerBox> infra = flag_static(data.annotations_infra);

  // per-anchor solve on static-flagged boxes only
  const auto pairings = data.schedule.pairings();
  for (const auto& frame : pairings) {
    std::vector<CornerBox> veh_static, infra_static;
    for (const auto& b : veh)
      if (b.static_flag == 1 && std::abs(b.timestamp - frame.t_vehicle) < 1e-9)
        veh_static.push_back(b);
    for (const auto& b : infra)
      if (b.static_flag == 1 && std::abs(b.timestamp - frame.t_infra) < 1e-9)
        infra_static.push_back(b);

    const RigidTransform* base = data.extrinsic_provided.find(frame.anchor);
    if (base == nullptr)
      throw std::runtime_error("dataset provides no extrinsic for an anchor timestamp");

    AlignOutcome::Row row;
    row.anchor = frame.anchor;
    const Matching m = match_boxes(veh_static, infra_static, *base);
    row.anchors_used = static_cast<int>(m.pairs.size());

    RigidTransform refined = *base;
    if (!m.pairs.empty()) {
      const ExtrinsicCorrection corr = solve_pose_correction(*base, m);
      refined = corr.refined();
      row.residual_rms = corr.residual_rms;
      const RigidTransform* truth = data.extrinsic_delta_true.find(frame.anchor);
      if (truth != nullptr) {
        row.rot_err_deg = corr.correction.rotation.angle_to(truth->rotation) * 180.0 / M_PI;
        row.trans_err_m = (corr.correction.translation - truth->translation).norm();
      }
    }
    out.refined.timestamps.push_back(frame.anchor);
    out.refined.transforms.push_back(refined);
    out.rows.push_back(row);
  }

  const RigidTransform base_default = data.extrinsic_provided.transforms.empty()
                                          ? data.extrinsic_true
                                          : data.extrinsic_provided.transforms.front();
  out.labels = regenerate_labels(veh, infra, base_default, out.refined, pairings);

  // fill short gaps per track on that track's own capture grid
  std::map<std::string, std::vector<CornerBox>> tracks;
  for (const auto& b : out.labels.boxes) tracks[b.track_id].push_back(b);
  std::vector<CornerBox> filled;
  for (auto& [id, seq] : tracks) {
    std::sort(seq.begin(), seq.end(),
              [](const CornerBox& a, const CornerBox& b) { return a.timestamp < b.timestamp; });
    const auto& grid =
        seq.front().source == Source::vehicle ? data.schedule.t_vehicle : data.schedule.t_infra;
    const auto result = fill_gaps(seq, grid);
    filled.insert(filled.end(), result.begin(), result.end());
  }
  out.labels.boxes = std::move(filled);
  return out;
}

// ---------------------------------------------------------------------------
// Training pipeline

namespace {

// Pose sampled from a label track; translation extrapolates linearly past the
// ends (exact for constant-velocity motion), rotation clamps.
RigidTransform sample_label_track(const PoseTrajectory& track, double t) {
  const auto& keys = track.keys;
  if (keys.size() >= 2) {
    if (t < keys.front().t) {
      const double dt = keys[1].t - keys[0].t;
      const Vec3 v = (keys[1].pose.translation - keys[0].pose.translation) / dt;
      return {keys.front().pose.rotation, keys.front().pose.translation + v * (t - keys.front().t)};
    }
    if (t > keys.back().t) {
      const size_t n = keys.size();
      const double dt = keys[n - 1].t - keys[n - 2].t;
      const Vec3 v = (keys[n - 1].pose.translation - keys[n - 2].pose.translation) / dt;
      return {keys.back().pose.rotation, keys.back().pose.translation + v * (t - keys.back().t)};
    }
  }
  return query_pose(track, t);
}

}  // namespace

SceneGraph build_init_scene(const SynthOutput& data, const std::vector<CornerBox>& labels,
                            const TrainSettings& settings, uint64_t seed, TimelineMode mode) {
  SceneGraph scene = data.scene;
  Rng rng(seed ^ 0x1417ull);
  auto jitter = [&](CanonicalGaussian& g) {
    g.mean += settings.init_position_noise * rng.normal_vec3();
    for (int k = 0; k < 3; ++k)
      g.color(k) = std::clamp(g.color(k) + settings.init_color_noise * rng.normal(), 0.01, 0.99);
  };
  for (auto& g : scene.background) jitter(g);
  for (auto& a : scene.agents)
    for (auto& g : a.canonical) jitter(g);

  // pose timelines from the label tracks, queried at each source's capture times
  for (auto& agent : scene.agents) {
    // vehicle-side boxes win when both sources observed the same instant
    std::vector<const CornerBox*> track_boxes;
    for (const auto& b : labels)
      if (b.track_id == agent.id) track_boxes.push_back(&b);
    std::stable_sort(track_boxes.begin(), track_boxes.end(),
                     [](const CornerBox* a, const CornerBox* b) {
                       if (a->timestamp != b->timestamp) return a->timestamp < b->timestamp;
                       return a->source == Source::vehicle && b->source != Source::vehicle;
                     });
    PoseTrajectory track;
    track.source = Source::vehicle;
    for (const CornerBox* b : track_boxes) {
      if (!track.keys.empty() && b->timestamp <= track.keys.back().t + 1e-9) continue;
      track.keys.push_back({b->timestamp, {b->orientation, b->center}});
    }
    if (track.keys.empty())
      throw std::runtime_error("labels carry no track for agent " + agent.id);

    agent.trajectory_vehicle.keys.clear();
    agent.trajectory_infra.keys.clear();
    for (int i = 0; i < data.schedule.frame_count; ++i) {
      agent.trajectory_vehicle.keys.push_back(
          {data.schedule.t_vehicle[i], sample_label_track(track, data.schedule.t_vehicle[i])});
      agent.trajectory_infra.keys.push_back(
          {data.schedule.t_infra[i], sample_label_track(track, data.schedule.t_infra[i])});
    }
  }
  if (mode == TimelineMode::single) scene = collapse_to_single_timeline(scene, data.schedule.anchors);
  return scene;
}

TrainOutcome run_train(const SynthOutput& data, const SynthConfig& synth_cfg,
                       const TrainSettings& settings, uint64_t seed, const std::string& mode,
                       const std::string& experiment_id, int threads) {
  const TimelineMode tl = mode == "single" ? TimelineMode::single : TimelineMode::dual;

  // labels: regenerate from the dataset's annotations under the provided base
  const AlignOutcome aligned = run_align(data);
  const SceneGraph init = build_init_scene(data, aligned.labels.boxes, settings, seed, tl);

  TrainConfig tc;
  tc.weights = settings.weights;
  tc.seed = seed;
  tc.lr_mean_start = settings.lr_mean_start;
  tc.lr_mean_end = settings.lr_mean_end;
  tc.lr_color = settings.lr_color;
  tc.lr_opacity = settings.lr_opacity;
  tc.lr_covariance = settings.lr_covariance;
  tc.lr_pose_trans_start = settings.lr_pose_trans_start;
  tc.lr_pose_trans_end = settings.lr_pose_trans_end;
  tc.lr_pose_rot_start = settings.lr_pose_rot_start;
  tc.lr_pose_rot_end = settings.lr_pose_rot_end;
  tc.checkpoint_every = settings.checkpoint_every;
  tc.checkpoint_dir = settings.checkpoint_dir;
  tc.threads = threads;

  TrainOutcome out;
  out.result = optimize(init, data.dataset, tc);

  for (const auto& s : evaluate_scene(out.result.scene, data.dataset, threads)) {
    MetricRow row;
    row.experiment = experiment_id;
    row.mode = mode;
    row.delta_tau = synth_cfg.delta_tau;
    row.frame = s.frame;
    row.source = s.source;
    row.psnr_full = s.psnr_full;
    row.ssim_full = s.ssim_full;
    row.psnr_dyn = s.psnr_dyn;
    row.ssim_dyn = s.ssim_dyn;
    row.has_dynamic = s.has_dynamic;
    out.rows.push_back(row);
  }
  return out;
}

double measured_irreducible_bound(const SynthOutput& data, const SynthConfig& cfg) {
  double total = 0.0;
  for (int i = 0; i < data.schedule.frame_count; ++i) {
    MotionSpec motion;
    motion.tau_vehicle = data.schedule.t_vehicle[i];
    motion.tau_infra = data.schedule.t_infra[i];
    motion.anchor = data.schedule.anchors[i];

    for (size_t ai = 0; ai < data.scene.agents.size(); ++ai) {
      const auto& agent = data.scene.agents[ai];
      // velocity from the ground-truth vehicle timeline around this frame
      const auto& keys = agent.trajectory_vehicle.keys;
      const size_t k = std::min<size_t>(i, keys.size() - 2);
      motion.velocity =
          (keys[k + 1].pose.translation - keys[k].pose.translation) / (keys[k + 1].t - keys[k].t);

      std::vector<double> lambdas;
      for (size_t gi = 0; gi < agent.canonical.size(); ++gi) {
        const FisherMatrix fv = fisher_accumulate(
            data.scene, Source::vehicle,
            {{vehicle_camera_at(cfg, data.schedule.t_vehicle[i]), data.schedule.t_vehicle[i]}},
            static_cast<int>(ai), static_cast<int>(gi));
        const FisherMatrix ff = fisher_accumulate(
            data.scene, Source::infra, {{infra_camera(cfg), data.schedule.t_infra[i]}},
            static_cast<int>(ai), static_cast<int>(gi));
        lambdas.push_back(std::max(0.0, std::min(fv.lambda_min, ff.lambda_min)));
      }
      total += irreducible_bound(motion, lambdas);
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// CLI entry points

int cmd_synth(const ExperimentConfig& cfg, const std::string& out_dir) {
  const SynthOutput data = generate(cfg.synth, cfg.threads);
  write_dataset(data, cfg.synth, out_dir);
  std::printf("dataset written to %s (%d frames x 2 sources)\n", out_dir.c_str(),
              cfg.synth.frame_count);
  return 0;
}

int cmd_align(const ExperimentConfig& cfg, const std::string& dataset_dir,
              const std::string& out_dir) {
  (void)cfg;  // align derives everything from the dataset itself
  SynthConfig synth_cfg;
  const SynthOutput data = load_dataset(dataset_dir, synth_cfg);
  const AlignOutcome outcome = run_align(data);

  fs::create_directories(out_dir);
  save_annotations(outcome.labels.boxes, out_dir + "/labels_cooperative.txt");
  save_extrinsics(outcome.refined, out_dir + "/extrinsics_refined.txt");

  std::ofstream csv(out_dir + "/align_report.csv", std::ios::binary);
  csv << "timestamp,rot_err_deg,trans_err_m,residual_rms,anchors_used\n";
  char buf[160];
  double worst_rot = 0.0, worst_trans = 0.0;
  for (const auto& r : outcome.rows) {
    std::snprintf(buf, sizeof(buf), "%.12g,%.12g,%.12g,%.12g,%d\n", r.anchor, r.rot_err_deg,
                  r.trans_err_m, r.residual_rms, r.anchors_used);
    csv << buf;
    worst_rot = std::max(worst_rot, r.rot_err_deg);
    worst_trans = std::max(worst_trans, r.trans_err_m);
  }
  std::printf("align: %zu frames, worst recovery error %.4f deg / %.4f m\n", outcome.rows.size(),
              worst_rot, worst_trans);
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& dataset_dir,
              const std::string& out_dir) {
  SynthConfig synth_cfg;
  const SynthOutput data = load_dataset(dataset_dir, synth_cfg);
  fs::create_directories(out_dir);

  TrainSettings settings = cfg.train;
  if (settings.checkpoint_every > 0) {
    settings.checkpoint_dir = out_dir + "/checkpoints";
    fs::create_directories(settings.checkpoint_dir);
  }

  const TrainOutcome outcome =
      run_train(data, synth_cfg, settings, cfg.seed, cfg.mode, "train", cfg.threads);
  save_scene(outcome.result.scene, out_dir + "/trained_scene.json");
  write_history_csv(outcome.result.history, out_dir + "/history.csv");
  write_metric_rows_csv(outcome.rows, out_dir + "/rows.csv");
  const auto summaries = aggregate(outcome.rows);
  write_summary_csv(summaries, out_dir + "/summary.csv");
  write_text(out_dir + "/report.txt", format_report(summaries, {}));

  if (outcome.result.diverged) {
    std::fprintf(stderr, "training diverged: %s\n", outcome.result.note.c_str());
    return 1;
  }
  for (const auto& s : summaries)
    if (s.source == "pooled")
      std::printf("train[%s] dtau=%.3f: psnr_full=%.2f psnr_dyn=%.2f\n", s.mode.c_str(),
                  s.delta_tau, s.psnr_full, s.psnr_dyn);
  return 0;
}

int cmd_verify_theory(const ExperimentConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const auto checks = run_theory_checks(cfg.seed);
  write_theory_csv(checks, out_dir + "/theory.csv");
  write_text(out_dir + "/report.txt", format_report({}, checks));
  bool all_pass = true;
  for (const auto& c : checks) {
    std::printf("%s  %s (measured %.3g, expected %.3g, tol %.3g)\n", c.pass ? "pass" : "FAIL",
                c.name.c_str(), c.measured, c.expected, c.tolerance);
    all_pass = all_pass && c.pass;
  }
  return all_pass ? 0 : 1;
}

int cmd_sweep(const ExperimentConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::vector<MetricRow> all_rows;
  std::ofstream csv(out_dir + "/sweep.csv", std::ios::binary);
  csv << "delta_tau_ms,psnr_dyn_dust,psnr_dyn_single,psnr_dyn_gap,ssim_dyn_gap,"
         "measured_bound,single_dynamic_sq_loss\n";

  double prev_gap = -std::numeric_limits<double>::infinity();
  bool monotone = true;
  for (const double dtau_ms : cfg.sweep_delta_tau_ms) {
    SynthConfig synth_cfg = cfg.synth;
    synth_cfg.delta_tau = dtau_ms / 1000.0;
    const SynthOutput data = generate(synth_cfg, cfg.threads);

    const std::string tag = "dtau" + std::to_string(static_cast<int>(dtau_ms));
    const TrainOutcome dust_run = run_train(data, synth_cfg, cfg.train, cfg.seed, "dust", tag, cfg.threads);
    const TrainOutcome single_run = run_train(data, synth_cfg, cfg.train, cfg.seed, "single", tag, cfg.threads);

    std::vector<MetricRow> pair_rows = dust_run.rows;
    pair_rows.insert(pair_rows.end(), single_run.rows.begin(), single_run.rows.end());
    all_rows.insert(all_rows.end(), pair_rows.begin(), pair_rows.end());
    const auto summaries = aggregate(pair_rows);
    double dust_dyn = 0, single_dyn = 0, dust_ssim = 0, single_ssim = 0;
    for (const auto& s : summaries) {
      if (s.source != "pooled") continue;
      if (s.mode == "dust") {
        dust_dyn = s.psnr_dyn;
        dust_ssim = s.ssim_dyn;
      } else {
        single_dyn = s.psnr_dyn;
        single_ssim = s.ssim_dyn;
      }
    }
    const double gap = dust_dyn - single_dyn;
    if (gap < prev_gap - 1e-9) monotone = false;
    prev_gap = gap;

    const double bound = measured_irreducible_bound(data, synth_cfg);
    const double single_loss = dynamic_squared_loss(single_run.result.scene, data.dataset);

    char buf[256];
    std::snprintf(buf, sizeof(buf), "%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", dtau_ms,
                  dust_dyn, single_dyn, gap, dust_ssim - single_ssim, bound, single_loss);
    csv << buf;
    std::printf("sweep dtau=%gms: dust %.2f dB, single %.2f dB, gap %.2f dB\n", dtau_ms, dust_dyn,
                single_dyn, gap);
  }
  write_metric_rows_csv(all_rows, out_dir + "/rows.csv");
  const auto summaries = aggregate(all_rows);
  write_summary_csv(summaries, out_dir + "/summary.csv");
  write_text(out_dir + "/report.txt", format_report(summaries, {}));
  if (!monotone) {
    std::fprintf(stderr, "sweep: dynamic-PSNR gap is not non-decreasing in delta_tau\n");
    return 1;
  }
  return 0;
}

}  // namespace dust

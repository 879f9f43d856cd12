// dust: synthetic cooperative-reconstruction experiments with decoupled
// per-source pose timelines.
//
// Exit codes: 0 success, 1 check/convergence failure, 2 config error.

#include <cstdio>
#include <stdexcept>
#include <string>

#include <CLI11.hpp>

#include "dust/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string mode;
  long long seed = -1;
  int threads = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_mode = true) {
  cmd->add_option("--config", args.config_path, "experiment config (JSON)")->required();
  cmd->add_option("--out", args.out_dir, "output directory (default: config out_dir)");
  if (with_mode) cmd->add_option("--mode", args.mode, "timeline mode: dust | single");
  cmd->add_option("--seed", args.seed, "seed override");
  cmd->add_option("--threads", args.threads, "worker count cap");
}

dust::ExperimentConfig resolve(const CommonArgs& args) {
  dust::ExperimentConfig cfg = dust::load_experiment_config(args.config_path);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (!args.mode.empty()) {
    if (args.mode != "dust" && args.mode != "single")
      throw std::invalid_argument("config error: --mode must be 'dust' or 'single'");
    cfg.mode = args.mode;
  }
  if (args.seed >= 0) {
    cfg.seed = static_cast<uint64_t>(args.seed);
    cfg.synth.seed = cfg.seed;
  }
  if (args.threads > 0) cfg.threads = args.threads;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cooperative scene reconstruction with decoupled pose timelines"};
  app.require_subcommand(1);

  CommonArgs synth_args, align_args, train_args, verify_args, sweep_args;
  std::string align_dataset, train_dataset;

  auto* synth = app.add_subcommand("synth", "generate a synthetic two-source dataset");
  add_common(synth, synth_args, false);

  auto* align = app.add_subcommand("align", "static-anchor pose correction + label regeneration");
  add_common(align, align_args, false);
  align->add_option("--dataset", align_dataset, "dataset directory")->required();

  auto* train = app.add_subcommand("train", "joint optimization + evaluation");
  add_common(train, train_args);
  train->add_option("--dataset", train_dataset, "dataset directory")->required();

  auto* verify = app.add_subcommand("verify-theory", "run the numerical theory checks");
  add_common(verify, verify_args, false);

  auto* sweep = app.add_subcommand("sweep", "train both modes across the capture-offset sweep");
  add_common(sweep, sweep_args, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      const auto cfg = resolve(synth_args);
      return dust::cmd_synth(cfg, cfg.out_dir);
    }
    if (align->parsed()) {
      const auto cfg = resolve(align_args);
      return dust::cmd_align(cfg, align_dataset, cfg.out_dir);
    }
    if (train->parsed()) {
      const auto cfg = resolve(train_args);
      return dust::cmd_train(cfg, train_dataset, cfg.out_dir);
    }
    if (verify->parsed()) {
      const auto cfg = resolve(verify_args);
      return dust::cmd_verify_theory(cfg, cfg.out_dir);
    }
    if (sweep->parsed()) {
      const auto cfg = resolve(sweep_args);
      return dust::cmd_sweep(cfg, cfg.out_dir);
    }
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;  // config / argument errors
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

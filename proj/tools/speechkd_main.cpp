// speechkd: staged runner for the self-distillation speech pipeline.
//
// Exit codes: 0 success, 2 config/input error, 3 missing or stale dependency,
// 4 numeric error.

#include <cstdio>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "skd/config.hpp"
#include "skd/errors.hpp"
#include "skd/io.hpp"
#include "skd/pipeline.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
  bool force = false;
};

skd::Pipeline make_pipeline(const CommonOpts& opts) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(skd::read_file(opts.config_path));
  } catch (const nlohmann::json::exception& e) {
    throw skd::ConfigError("cannot parse config " + opts.config_path + ": " + e.what());
  }
  // Flag > config > default; the effective values feed the cache hash.
  if (opts.seed) j["seed"] = *opts.seed;
  if (opts.out_dir) j["out_dir"] = *opts.out_dir;
  return skd::Pipeline(skd::parse_config(j));
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool with_force = true) {
  cmd->add_option("--config", opts.config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", opts.seed, "override the config seed");
  cmd->add_option("--out", opts.out_dir, "override the output directory");
  if (with_force) {
    cmd->add_flag("--force", opts.force, "discard this stage's cache and recompute");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-distillation speech pipeline"};
  app.require_subcommand(1);

  CommonOpts opts;
  int iteration = -1;
  bool pca_ablation = false;
  std::string task;
  std::string split = "probe-test";
  std::string init_path = "demo.json";

  auto* init_cmd = app.add_subcommand("init-config", "write the bundled synthetic demo config");
  init_cmd->add_option("path", init_path, "where to write the config");

  auto* synth = app.add_subcommand("synth", "generate the synthetic corpus");
  add_common(synth, opts);

  auto* features = app.add_subcommand("features", "extract MFCC shards for every utterance");
  add_common(features, opts);

  auto* quantize = app.add_subcommand("quantize", "fit the codebook for one iteration");
  add_common(quantize, opts);
  quantize->add_option("--iteration", iteration, "iteration index")->required();

  auto* targets = app.add_subcommand("targets", "assign pseudo-labels for one iteration");
  add_common(targets, opts);
  targets->add_option("--iteration", iteration, "iteration index")->required();

  auto* pretrain = app.add_subcommand("pretrain", "train iteration 1 on MFCC-derived labels");
  add_common(pretrain, opts);

  auto* distill = app.add_subcommand("distill", "train iterations >= 2 from a teacher");
  add_common(distill, opts);
  distill->add_option("--iteration", iteration, "iteration index (default: all >= 2)");
  distill->add_flag("--pca-ablation", pca_ablation,
                    "run the iteration twice (with/without PCA supervision) and keep both "
                    "loss curves");

  auto* probe = app.add_subcommand("probe", "train downstream probes on the frozen encoder");
  add_common(probe, opts);
  probe->add_option("--task", task, "classification or ctc (default: all configured)");

  auto* eval = app.add_subcommand("eval", "evaluate a trained probe on a held-out split");
  add_common(eval, opts);
  eval->add_option("--task", task, "classification or ctc")->required();
  eval->add_option("--split", split, "probe-dev or probe-test");

  auto* report = app.add_subcommand("report", "aggregate eval records into a summary table");
  add_common(report, opts, /*with_force=*/false);

  auto* run_all = app.add_subcommand("run-all", "run every stage of the configured schedule");
  add_common(run_all, opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (init_cmd->parsed()) {
      skd::write_file_atomic(init_path, skd::default_config_json().dump(2) + "\n");
      std::fprintf(stderr, "[skd] wrote %s\n", init_path.c_str());
      return 0;
    }
    skd::Pipeline pipeline = make_pipeline(opts);
    if (synth->parsed()) {
      pipeline.cmd_synth(opts.force);
    } else if (features->parsed()) {
      pipeline.cmd_features(opts.force);
    } else if (quantize->parsed()) {
      pipeline.cmd_quantize(iteration, opts.force);
    } else if (targets->parsed()) {
      pipeline.cmd_targets(iteration, opts.force);
    } else if (pretrain->parsed()) {
      pipeline.cmd_pretrain(opts.force);
    } else if (distill->parsed()) {
      pipeline.cmd_distill(iteration, opts.force, pca_ablation);
    } else if (probe->parsed()) {
      pipeline.cmd_probe(task, opts.force);
    } else if (eval->parsed()) {
      pipeline.cmd_eval(task, split, opts.force);
    } else if (report->parsed()) {
      pipeline.cmd_report();
    } else if (run_all->parsed()) {
      pipeline.run_all(opts.force);
    }
    return 0;
  } catch (const skd::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
}

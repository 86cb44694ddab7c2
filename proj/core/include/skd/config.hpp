#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "skd/distill.hpp"
#include "skd/features.hpp"
#include "skd/manifest.hpp"
#include "skd/probes.hpp"

namespace skd {

/// Parsed experiment config. One JSON file with a section per stage; CLI
/// flags may override seed/out_dir before hashing, so the cache key reflects
/// what actually ran.
struct PipelineConfig {
  uint64_t seed = 7;
  std::filesystem::path out_dir = "runs/out";

  struct Corpus {
    int n_utts = 64;
    double duration_s = 2.0;
    int n_classes = 4;
    SplitFractions splits;
    std::vector<double> speed_factors;  // extra materialized copies per factor
    bool materialize = true;
  } corpus;

  MfccConfig features;

  struct Quantizer {
    int kmeans_max_iters = 100;
    int64_t kmeans_batch = 0;  // 0 = full-batch Lloyd
  } quantizer;

  struct Encoder {
    std::string preset = "tiny";
    nlohmann::json overrides = nlohmann::json::object();
    double mask_prob = 0.08;
    int mask_span = 10;
    double w_masked = 1.0;
    double w_unmasked = 0.1;
  } encoder;

  struct Train {
    int64_t batch_size = 4;
    double base_lr = 1e-3;
    int64_t warmup_steps = 50;
    int64_t log_every = 1;
  } train;

  std::vector<IterationPlan> iterations;

  struct Probe {
    std::vector<std::string> tasks{"classification"};
    int encoder_iteration = -1;  // -1 = last configured iteration
    int conv_layers = 3;
    int kernel = 5;
    double dropout = 0.4;
    int hidden = 80;
    int64_t batch = 4;
    int64_t steps = 2000;
    bool ff_relu = true;
    bool include_state0 = true;
    double lr = 1e-3;
    int64_t eval_every = 200;
    bool shuffle_labels = false;  // chance-level control runs
  } probe;

  /// Canonical JSON of the effective config; its FNV-1a hash keys every
  /// stage cache.
  nlohmann::json effective;
  uint64_t config_hash() const;

  int last_iteration_index() const;
  const IterationPlan& plan(int index) const;
};

PipelineConfig parse_config(const nlohmann::json& j);
PipelineConfig load_config_file(const std::filesystem::path& path);

/// The synthetic demo config bundled with the CLI (written by `init-config`).
nlohmann::json default_config_json();

}  // namespace skd

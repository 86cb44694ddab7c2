#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "skd/config.hpp"

namespace skd {

/// Stage runner. Every stage writes its artifacts plus a provenance.json
/// (config hash, derived seed, input/output checksums) under
/// <out>/<stage>/<iteration>/. A stage whose provenance matches the current
/// config hash and whose outputs are intact is skipped; a provenance written
/// under a different config hash is a stale-cache error unless force is set.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config);

  void cmd_synth(bool force = false);
  void cmd_features(bool force = false);
  void cmd_quantize(int iteration, bool force = false);
  void cmd_targets(int iteration, bool force = false);
  /// Iteration 1 training (random init, MFCC-derived labels).
  void cmd_pretrain(bool force = false);
  /// Iteration >= 2 training. iteration == -1 runs every remaining plan.
  /// pca_ablation reruns the given iteration twice (teacher supervision with
  /// and without PCA) and stores both loss curves.
  void cmd_distill(int iteration = -1, bool force = false, bool pca_ablation = false);
  void cmd_probe(const std::string& task, bool force = false);
  void cmd_eval(const std::string& task, const std::string& split, bool force = false);
  void cmd_report();
  /// Convenience: synth, features, quantize/targets/train per iteration,
  /// probes, evals, report.
  void run_all(bool force = false);

  const PipelineConfig& config() const { return config_; }
  std::filesystem::path stage_dir(const std::string& stage, int iteration = -1) const;

 private:
  struct StageGuard;

  CorpusManifest manifest() const;
  AudioBuffer audio_for(const ManifestEntry& entry) const;
  std::vector<AudioBuffer> split_audio(const CorpusManifest& m, Split split) const;
  FeatureMatrix stored_mfcc(const std::string& utterance_id) const;
  Model teacher_for(int iteration) const;  // model of iteration - 1
  uint64_t stage_seed(const std::string& stage, int iteration) const;

  void run_training_iteration(int iteration, bool force);
  void train_probe_task(const std::string& task, bool force);

  PipelineConfig config_;
};

}  // namespace skd

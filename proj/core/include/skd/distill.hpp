#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "skd/encoder.hpp"
#include "skd/features.hpp"
#include "skd/manifest.hpp"
#include "skd/optimizer.hpp"
#include "skd/quantizer.hpp"

namespace skd {

/// Where an iteration's supervision comes from. Teacher layers are hidden-
/// state indices: 0 is the transformer input, j is the output of layer j,
/// "last" resolves to the teacher depth.
struct TargetSource {
  enum class Kind { kMfcc, kTeacherLayer, kTeacherLayerPca };
  Kind kind = Kind::kMfcc;
  int layer = -1;  // hidden-state index; -1 with last=true
  bool last = false;
  int64_t pca_rank = 0;  // only for kTeacherLayerPca

  std::string describe() const;
};

enum class InitStrategy { kRandom, kBlockedAverage };

struct IterationPlan {
  int index = 1;  // i >= 1 trains; target generation for i uses model i-1
  TargetSource source;
  int64_t k = 64;  // codebook size
  EncoderConfig student;
  InitStrategy init = InitStrategy::kRandom;
  int64_t steps = 0;
};

/// Resolve a hidden-state index against a model depth; throws on range.
int resolve_layer(const TargetSource& source, int depth);

/// Hidden-state features for one utterance (no masking), kind=hidden.
FeatureMatrix teacher_layer_features(const Model& teacher, const AudioBuffer& audio,
                                     int hidden_index);

struct TargetGenResult {
  Codebook codebook;
  std::vector<PseudoLabelSequence> labels;  // aligned with assign_to order
};

/// Fit a codebook on the cluster-fit utterances (optionally after PCA) and
/// assign labels over assign_to. teacher may be null for the MFCC source.
TargetGenResult generate_targets(const Model* teacher,
                                 const std::vector<AudioBuffer>& cluster_fit,
                                 const std::vector<AudioBuffer>& assign_to,
                                 const TargetSource& source, int64_t k,
                                 const KmeansOptions& kmeans_options,
                                 const MfccConfig& mfcc_config = {});

/// Student layer s becomes the arithmetic mean of the teacher's contiguous
/// block of depth/student_depth layers; everything outside the transformer
/// stack is copied verbatim (label embeddings only when k matches). Width or
/// front-end mismatches fall back to random init with a warning; a student
/// depth that does not divide the teacher depth is a config error.
Model blocked_avg_init(const Model& teacher, const EncoderConfig& student_config,
                       uint64_t fallback_seed);

/// Structural compression Delta-S = (1 - student/teacher) * 100, in percent.
double compression_ratio(int64_t teacher_params, int64_t student_params);

struct CompressionReport {
  int64_t teacher_params = 0;
  int64_t student_params = 0;
  double delta_s_percent = 0.0;
  int depth_teacher = 0, depth_student = 0;
  int width_teacher = 0, width_student = 0;
  int heads_teacher = 0, heads_student = 0;

  nlohmann::json to_json() const;
};

CompressionReport compression_report(const EncoderConfig& teacher,
                                     const EncoderConfig& student);

struct TrainOptions {
  int64_t batch_size = 4;
  MaskSpec mask;
  TrainLossWeights loss_weights;
  AdamConfig adam;
  int64_t log_every = 1;
};

struct IterationResult {
  Model model;
  std::vector<StepMetrics> metrics;
  CompressionReport report;
};

/// One training iteration: initialize the student (from the teacher when the
/// plan says so), then plan.steps optimizer steps over seeded shuffled
/// batches of (audio, labels). Labels must be index-aligned with train_audio.
/// Writes model.ckpt, metrics.jsonl and report.json under out_dir; artifacts
/// there are treated as immutable by the pipeline layer.
IterationResult run_iteration(const IterationPlan& plan, const Model* teacher,
                              const std::vector<AudioBuffer>& train_audio,
                              const std::vector<PseudoLabelSequence>& labels,
                              const TrainOptions& options, uint64_t seed,
                              const std::filesystem::path& out_dir);

nlohmann::json metrics_to_json(const StepMetrics& m);

}  // namespace skd

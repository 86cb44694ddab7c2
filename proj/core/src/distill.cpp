#include "skd/distill.hpp"

#include <cstdio>

#include "skd/checkpoint.hpp"
#include "skd/errors.hpp"
#include "skd/io.hpp"
#include "skd/rng.hpp"

namespace skd {

std::string TargetSource::describe() const {
  switch (kind) {
    case Kind::kMfcc: return "mfcc";
    case Kind::kTeacherLayer:
      return "teacher_layer(" + (last ? std::string("last") : std::to_string(layer)) + ")";
    case Kind::kTeacherLayerPca:
      return "teacher_layer_pca(" + (last ? std::string("last") : std::to_string(layer)) + ",r" +
             std::to_string(pca_rank) + ")";
  }
  return "?";
}

int resolve_layer(const TargetSource& source, int depth) {
  const int hidden_index = source.last ? depth : source.layer;
  if (hidden_index < 0 || hidden_index > depth) {
    throw ConfigError("target layer out of range: " + std::to_string(hidden_index) +
                      " for depth " + std::to_string(depth));
  }
  return hidden_index;
}

FeatureMatrix teacher_layer_features(const Model& teacher, const AudioBuffer& audio,
                                     int hidden_index) {
  const ForwardResult fwd = forward(teacher, audio);
  const Tensor& h = fwd.hidden.at(static_cast<size_t>(hidden_index));
  FeatureMatrix features;
  features.rows = h.dim(0);
  features.cols = h.dim(1);
  features.frame_rate = 50.0;
  features.utterance_id = audio.utterance_id;
  features.kind = FeatureKind::kHidden;
  features.data.assign(h.data(), h.data() + h.numel());
  return features;
}

namespace {

FeatureMatrix source_features(const Model* teacher, const AudioBuffer& audio,
                              const TargetSource& source, const MfccConfig& mfcc_config) {
  if (source.kind == TargetSource::Kind::kMfcc) {
    return mfcc39(audio, mfcc_config);
  }
  if (!teacher) throw ConfigError("teacher-sourced targets need a teacher model");
  const int hidden_index = resolve_layer(source, teacher->config.depth);
  return teacher_layer_features(*teacher, audio, hidden_index);
}

}  // namespace

TargetGenResult generate_targets(const Model* teacher,
                                 const std::vector<AudioBuffer>& cluster_fit,
                                 const std::vector<AudioBuffer>& assign_to,
                                 const TargetSource& source, int64_t k,
                                 const KmeansOptions& kmeans_options,
                                 const MfccConfig& mfcc_config) {
  if (cluster_fit.empty()) throw ConfigError("generate_targets: no cluster-fit utterances");

  // Pool cluster-fit frames.
  std::vector<double> pooled;
  int64_t dim = -1;
  for (const AudioBuffer& audio : cluster_fit) {
    const FeatureMatrix f = source_features(teacher, audio, source, mfcc_config);
    if (dim < 0) {
      dim = f.cols;
    } else if (dim != f.cols) {
      throw ConfigError("generate_targets: inconsistent feature dims");
    }
    pooled.insert(pooled.end(), f.data.begin(), f.data.end());
  }
  const int64_t n = static_cast<int64_t>(pooled.size()) / dim;

  std::optional<PcaTransform> pca;
  if (source.kind == TargetSource::Kind::kTeacherLayerPca) {
    if (source.pca_rank < 1) throw ConfigError("generate_targets: pca_rank must be >= 1");
    pca = fit_pca(pooled.data(), n, dim, std::min<int64_t>(source.pca_rank, dim));
    std::vector<double> projected(static_cast<size_t>(n) * pca->rank());
    pca_project(*pca, pooled.data(), n, projected.data());
    pooled = std::move(projected);
    dim = pca->rank();
  }

  TargetGenResult result;
  result.codebook = fit_kmeans(pooled.data(), n, dim, k, kmeans_options);
  result.codebook.pca = std::move(pca);

  result.labels.reserve(assign_to.size());
  for (const AudioBuffer& audio : assign_to) {
    const FeatureMatrix f = source_features(teacher, audio, source, mfcc_config);
    result.labels.push_back(assign_labels(result.codebook, f));
  }
  return result;
}

Model blocked_avg_init(const Model& teacher, const EncoderConfig& student_config,
                       uint64_t fallback_seed) {
  student_config.validate();
  const EncoderConfig& tc = teacher.config;

  if (student_config.depth <= 0 || tc.depth % student_config.depth != 0) {
    throw ConfigError("blocked_avg_init: student depth must divide teacher depth");
  }
  const bool width_match = student_config.emb_dim == tc.emb_dim &&
                           student_config.ffn_dim == tc.ffn_dim &&
                           student_config.cnn_channels == tc.cnn_channels &&
                           student_config.proj_dim == tc.proj_dim &&
                           student_config.pos_conv_kernel == tc.pos_conv_kernel &&
                           student_config.pos_conv_groups == tc.pos_conv_groups;
  if (!width_match) {
    std::fprintf(stderr,
                 "[skd] blocked_avg_init: width mismatch between teacher and student; "
                 "falling back to random init\n");
    return build_model(student_config, fallback_seed);
  }

  Model student = build_model(student_config, fallback_seed);
  const int block = tc.depth / student_config.depth;

  for (auto& [name, tensor] : student.params) {
    if (!name.starts_with("layers.")) {
      if (name == "label_emb" && student_config.n_labels != tc.n_labels) {
        continue;  // keep random rows: the label space changed
      }
      tensor = teacher.params.at(name);
      continue;
    }
    // layers.SS.rest -> mean over teacher layers [SS*block, (SS+1)*block).
    const int student_layer = std::stoi(name.substr(7, 2));
    const std::string rest = name.substr(9);
    Tensor acc = Tensor::zeros_like(tensor);
    for (int b = 0; b < block; ++b) {
      char teacher_name[16];
      std::snprintf(teacher_name, sizeof(teacher_name), "layers.%02d",
                    student_layer * block + b);
      acc.axpy(1.0, teacher.params.at(std::string(teacher_name) + rest));
    }
    for (size_t i = 0; i < acc.numel(); ++i) acc[i] /= block;
    tensor = std::move(acc);
  }
  return student;
}

double compression_ratio(int64_t teacher_params, int64_t student_params) {
  if (teacher_params <= 0 || student_params <= 0) {
    throw ConfigError("compression_ratio: parameter counts must be positive");
  }
  return (1.0 - static_cast<double>(student_params) / static_cast<double>(teacher_params)) *
         100.0;
}

nlohmann::json CompressionReport::to_json() const {
  return nlohmann::json{
      {"teacher_params", teacher_params},
      {"student_params", student_params},
      {"delta_s_percent", delta_s_percent},
      {"axis_deltas",
       {{"depth", {{"teacher", depth_teacher}, {"student", depth_student}}},
        {"width", {{"teacher", width_teacher}, {"student", width_student}}},
        {"heads", {{"teacher", heads_teacher}, {"student", heads_student}}}}}};
}

CompressionReport compression_report(const EncoderConfig& teacher,
                                     const EncoderConfig& student) {
  CompressionReport report;
  report.teacher_params = param_count(teacher);
  report.student_params = param_count(student);
  report.delta_s_percent = compression_ratio(report.teacher_params, report.student_params);
  report.depth_teacher = teacher.depth;
  report.depth_student = student.depth;
  report.width_teacher = teacher.emb_dim;
  report.width_student = student.emb_dim;
  report.heads_teacher = teacher.attn_heads;
  report.heads_student = student.attn_heads;
  return report;
}

nlohmann::json metrics_to_json(const StepMetrics& m) {
  return nlohmann::json{{"step", m.step},
                        {"loss_total", m.loss_total},
                        {"loss_masked", m.loss_masked},
                        {"loss_unmasked", m.loss_unmasked},
                        {"masked_acc", m.masked_acc},
                        {"lr", m.lr}};
}

IterationResult run_iteration(const IterationPlan& plan, const Model* teacher,
                              const std::vector<AudioBuffer>& train_audio,
                              const std::vector<PseudoLabelSequence>& labels,
                              const TrainOptions& options, uint64_t seed,
                              const std::filesystem::path& out_dir) {
  if (plan.index < 1) throw ConfigError("run_iteration: training plans start at index 1");
  if (plan.steps < 1) throw ConfigError("run_iteration: steps must be >= 1");
  if (train_audio.empty()) throw ConfigError("run_iteration: no training utterances");
  if (labels.size() != train_audio.size()) {
    throw ConfigError("run_iteration: labels not aligned with training audio");
  }

  IterationResult result;
  if (plan.init == InitStrategy::kBlockedAverage) {
    if (!teacher) throw ConfigError("run_iteration: blocked_average init needs a teacher");
    result.model = blocked_avg_init(*teacher, plan.student, derive_seed(seed, "init"));
  } else {
    result.model = build_model(plan.student, derive_seed(seed, "init"));
  }
  result.report = teacher ? compression_report(teacher->config, plan.student)
                          : compression_report(plan.student, plan.student);

  AdamState state;
  adam_init(state, result.model);

  TrainOptions opts = options;
  opts.mask.seed = derive_seed(seed, "mask");
  Rng order_rng(derive_seed(seed, "order"));

  std::vector<size_t> order(train_audio.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();  // force an initial shuffle

  for (int64_t step = 0; step < plan.steps; ++step) {
    std::vector<TrainItem> batch;
    for (int64_t b = 0; b < opts.batch_size; ++b) {
      if (cursor >= order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      const size_t pick = order[cursor++];
      batch.push_back(TrainItem{&train_audio[pick], &labels[pick].labels});
    }
    const StepMetrics metrics =
        train_step(result.model, batch, opts.mask, opts.loss_weights, state, opts.adam);
    if (metrics.step % opts.log_every == 0 || metrics.step == plan.steps) {
      result.metrics.push_back(metrics);
    }
  }

  std::filesystem::create_directories(out_dir);
  save_model(out_dir / "model.ckpt", result.model, &state);
  std::vector<nlohmann::json> rows;
  rows.reserve(result.metrics.size());
  for (const auto& m : result.metrics) rows.push_back(metrics_to_json(m));
  write_jsonl(out_dir / "metrics.jsonl", rows);
  write_file_atomic(out_dir / "report.json", result.report.to_json().dump(2) + "\n");
  return result;
}

}  // namespace skd

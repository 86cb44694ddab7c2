#include "skd/pipeline.hpp"

#include <algorithm>
#include <cstdio>

#include "skd/augment.hpp"
#include "skd/checkpoint.hpp"
#include "skd/errors.hpp"
#include "skd/io.hpp"
#include "skd/rng.hpp"

namespace skd {

namespace fs = std::filesystem;

namespace {

std::string label_file_name(const std::string& utterance_id) { return utterance_id + ".labels"; }
std::string feature_file_name(const std::string& utterance_id) { return utterance_id + ".feat"; }

void assert_split(const std::vector<const ManifestEntry*>& entries, Split expected,
                  const std::string& stage) {
  for (const auto* e : entries) {
    if (e->split != expected) {
      throw ConfigError("leakage guard: stage " + stage + " touched utterance " + e->id +
                        " from split " + to_string(e->split));
    }
  }
}

}  // namespace

/// Wraps one stage execution: cache check on construction, provenance write
/// on commit.
struct Pipeline::StageGuard {
  StageGuard(const Pipeline& pipeline, std::string stage_name, int iteration, bool force)
      : stage(std::move(stage_name)),
        iter(iteration),
        dir(pipeline.stage_dir(stage, iteration)),
        config_hash(pipeline.config().config_hash()) {
    const fs::path prov_path = dir / "provenance.json";
    if (force) {
      std::error_code ec;
      fs::remove_all(dir, ec);
    } else if (fs::exists(prov_path)) {
      nlohmann::json prov;
      try {
        prov = nlohmann::json::parse(read_file(prov_path));
      } catch (...) {
        throw DependencyError("unreadable provenance in " + dir.string() +
                              "; re-run with --force");
      }
      if (prov.value("config_hash", std::string()) != checksum_hex(config_hash)) {
        throw DependencyError("stale cache: " + dir.string() +
                              " was produced under a different config; re-run with --force");
      }
      bool intact = true;
      for (const auto& [rel, checksum] : prov.value("outputs", nlohmann::json::object()).items()) {
        const fs::path p = dir / rel;
        if (!fs::exists(p) || checksum_hex(file_checksum(p)) != checksum.get<std::string>()) {
          intact = false;
          break;
        }
      }
      if (intact) {
        std::fprintf(stderr, "[skd] %s: cached\n", dir.string().c_str());
        cached = true;
        return;
      }
      std::error_code ec;
      fs::remove_all(dir, ec);
    }
    fs::create_directories(dir);
  }

  void add_input(const fs::path& path) { inputs[path.string()] = checksum_hex(file_checksum(path)); }
  void add_output(const fs::path& path) { output_paths.push_back(path); }

  void commit(uint64_t seed) {
    nlohmann::json prov;
    prov["schema_version"] = 1;
    prov["stage"] = stage;
    if (iter >= 0) prov["iteration"] = iter;
    prov["config_hash"] = checksum_hex(config_hash);
    prov["seed"] = seed;
    prov["inputs"] = inputs;
    nlohmann::json outs = nlohmann::json::object();
    for (const auto& p : output_paths) {
      outs[fs::relative(p, dir).string()] = checksum_hex(file_checksum(p));
    }
    prov["outputs"] = outs;
    write_file_atomic(dir / "provenance.json", prov.dump(2) + "\n");
    std::fprintf(stderr, "[skd] %s: done\n", dir.string().c_str());
  }

  std::string stage;
  int iter;
  fs::path dir;
  uint64_t config_hash;
  bool cached = false;
  nlohmann::json inputs = nlohmann::json::object();
  std::vector<fs::path> output_paths;
};

Pipeline::Pipeline(PipelineConfig config) : config_(std::move(config)) {}

fs::path Pipeline::stage_dir(const std::string& stage, int iteration) const {
  fs::path dir = config_.out_dir / stage;
  if (iteration >= 0) dir /= std::to_string(iteration);
  return dir;
}

uint64_t Pipeline::stage_seed(const std::string& stage, int iteration) const {
  return derive_seed(config_.seed, stage, static_cast<uint64_t>(iteration + 1));
}

CorpusManifest Pipeline::manifest() const {
  const fs::path path = stage_dir("corpus") / "manifest.jsonl";
  if (!fs::exists(path)) {
    throw DependencyError("missing corpus manifest (run the synth stage first): " +
                          path.string());
  }
  return read_manifest(path);
}

AudioBuffer Pipeline::audio_for(const ManifestEntry& entry) const {
  return load_entry_audio(entry, stage_dir("corpus"));
}

std::vector<AudioBuffer> Pipeline::split_audio(const CorpusManifest& m, Split split) const {
  std::vector<AudioBuffer> out;
  for (const auto* e : m.in_split(split)) out.push_back(audio_for(*e));
  return out;
}

FeatureMatrix Pipeline::stored_mfcc(const std::string& utterance_id) const {
  const fs::path path = stage_dir("features", 0) / feature_file_name(utterance_id);
  if (!fs::exists(path)) {
    throw DependencyError("missing feature shard (run the features stage first): " +
                          path.string());
  }
  return read_features(path);
}

Model Pipeline::teacher_for(int iteration) const {
  const fs::path path = stage_dir("train", iteration - 1) / "model.ckpt";
  if (!fs::exists(path)) {
    throw DependencyError("missing teacher checkpoint (run the train stage for iteration " +
                          std::to_string(iteration - 1) + " first): " + path.string());
  }
  return load_model(path);
}

void Pipeline::cmd_synth(bool force) {
  StageGuard guard(*this, "corpus", -1, force);
  if (guard.cached) return;
  const uint64_t seed = stage_seed("corpus", -1);

  SynthCorpus corpus = synth_corpus(seed, config_.corpus.n_utts, config_.corpus.duration_s,
                                    config_.corpus.n_classes, config_.corpus.splits);

  // Optional speed-perturbed copies, same split and class as the source.
  const size_t base_count = corpus.manifest.entries.size();
  for (double factor : config_.corpus.speed_factors) {
    for (size_t i = 0; i < base_count; ++i) {
      const ManifestEntry& src = corpus.manifest.entries[i];
      char suffix[32];
      std::snprintf(suffix, sizeof(suffix), "@sp%.2f", factor);
      ManifestEntry e;
      e.id = src.id + suffix;
      e.class_id = src.class_id;
      e.split = src.split;
      AudioBuffer perturbed = speed_perturb(corpus.buffers[i], factor);
      perturbed.utterance_id = e.id;
      e.duration_s = perturbed.duration_s();
      corpus.buffers.push_back(std::move(perturbed));
      corpus.manifest.entries.push_back(std::move(e));
    }
  }

  for (size_t i = 0; i < corpus.manifest.entries.size(); ++i) {
    ManifestEntry& e = corpus.manifest.entries[i];
    if (config_.corpus.materialize) {
      const fs::path wav_path = guard.dir / "wav" / (e.id + ".wav");
      write_wav(wav_path, corpus.buffers[i]);
      e.path = fs::path("wav") / (e.id + ".wav");
      guard.add_output(wav_path);
    } else if (!e.seed) {
      throw ConfigError("corpus: speed-perturbed entries require materialize=true");
    }
  }
  corpus.manifest.validate();
  const fs::path manifest_path = guard.dir / "manifest.jsonl";
  write_manifest(manifest_path, corpus.manifest);
  guard.add_output(manifest_path);
  guard.commit(seed);
}

void Pipeline::cmd_features(bool force) {
  StageGuard guard(*this, "features", 0, force);
  if (guard.cached) return;
  const CorpusManifest m = manifest();
  guard.add_input(stage_dir("corpus") / "manifest.jsonl");
  const uint64_t seed = stage_seed("features", 0);

  for (const auto& entry : m.entries) {
    const FeatureMatrix features = mfcc39(audio_for(entry), config_.features);
    const fs::path path = guard.dir / feature_file_name(entry.id);
    write_features(path, features);
    guard.add_output(path);
  }
  guard.commit(seed);
}

void Pipeline::cmd_quantize(int iteration, bool force) {
  const IterationPlan& plan = config_.plan(iteration);
  StageGuard guard(*this, "quantize", iteration, force);
  if (guard.cached) return;
  const uint64_t seed = stage_seed("quantize", iteration);
  const CorpusManifest m = manifest();

  const auto fit_entries = m.in_split(Split::kClusterFit);
  if (fit_entries.empty()) throw ConfigError("quantize: cluster-fit split is empty");
  assert_split(fit_entries, Split::kClusterFit, "quantize");

  // Pool supervision features over the cluster-fit split only.
  std::vector<double> pooled;
  int64_t dim = -1;
  std::optional<Model> teacher;
  if (plan.source.kind != TargetSource::Kind::kMfcc) {
    teacher = teacher_for(iteration);
    guard.add_input(stage_dir("train", iteration - 1) / "model.ckpt");
  }
  for (const auto* entry : fit_entries) {
    FeatureMatrix f;
    if (plan.source.kind == TargetSource::Kind::kMfcc) {
      f = stored_mfcc(entry->id);
    } else {
      const int hidden_index = resolve_layer(plan.source, teacher->config.depth);
      f = teacher_layer_features(*teacher, audio_for(*entry), hidden_index);
    }
    if (dim < 0) dim = f.cols;
    pooled.insert(pooled.end(), f.data.begin(), f.data.end());
  }
  const int64_t n = static_cast<int64_t>(pooled.size()) / dim;

  std::optional<PcaTransform> pca;
  if (plan.source.kind == TargetSource::Kind::kTeacherLayerPca) {
    pca = fit_pca(pooled.data(), n, dim, std::min<int64_t>(plan.source.pca_rank, dim));
    std::vector<double> projected(static_cast<size_t>(n) * pca->rank());
    pca_project(*pca, pooled.data(), n, projected.data());
    pooled = std::move(projected);
    dim = pca->rank();
  }

  KmeansOptions km;
  km.max_iters = config_.quantizer.kmeans_max_iters;
  km.batch = config_.quantizer.kmeans_batch;
  km.seed = seed;
  Codebook codebook = fit_kmeans(pooled.data(), n, dim, plan.k, km);
  codebook.pca = std::move(pca);

  const fs::path path = guard.dir / "codebook.bin";
  write_codebook(path, codebook);
  guard.add_output(path);
  guard.commit(seed);
}

void Pipeline::cmd_targets(int iteration, bool force) {
  const IterationPlan& plan = config_.plan(iteration);
  StageGuard guard(*this, "targets", iteration, force);
  if (guard.cached) return;
  const uint64_t seed = stage_seed("targets", iteration);

  const fs::path codebook_path = stage_dir("quantize", iteration) / "codebook.bin";
  if (!fs::exists(codebook_path)) {
    throw DependencyError("missing codebook (run the quantize stage for iteration " +
                          std::to_string(iteration) + " first): " + codebook_path.string());
  }
  const Codebook codebook = read_codebook(codebook_path);
  guard.add_input(codebook_path);

  const CorpusManifest m = manifest();
  const auto train_entries = m.in_split(Split::kPretrain);
  if (train_entries.empty()) throw ConfigError("targets: pretrain split is empty");
  assert_split(train_entries, Split::kPretrain, "targets");

  std::optional<Model> teacher;
  uint64_t teacher_checksum = 0;
  if (plan.source.kind != TargetSource::Kind::kMfcc) {
    teacher = teacher_for(iteration);
    teacher_checksum = teacher->checksum();
    guard.add_input(stage_dir("train", iteration - 1) / "model.ckpt");
  }

  nlohmann::json provenance;
  provenance["source"] = plan.source.describe();
  provenance["iteration"] = iteration;
  provenance["teacher_checksum"] = checksum_hex(teacher_checksum);
  provenance["k"] = plan.k;
  provenance["seed"] = seed;

  for (const auto* entry : train_entries) {
    FeatureMatrix f;
    if (plan.source.kind == TargetSource::Kind::kMfcc) {
      f = stored_mfcc(entry->id);
    } else {
      const int hidden_index = resolve_layer(plan.source, teacher->config.depth);
      f = teacher_layer_features(*teacher, audio_for(*entry), hidden_index);
    }
    const PseudoLabelSequence labels = assign_labels(codebook, f);
    const fs::path path = guard.dir / label_file_name(entry->id);
    write_labels(path, labels, provenance);
    guard.add_output(path);
  }
  guard.commit(seed);
}

void Pipeline::run_training_iteration(int iteration, bool force) {
  const IterationPlan& plan = config_.plan(iteration);
  StageGuard guard(*this, "train", iteration, force);
  if (guard.cached) return;
  const uint64_t seed = stage_seed("train", iteration);

  const CorpusManifest m = manifest();
  const auto train_entries = m.in_split(Split::kPretrain);
  assert_split(train_entries, Split::kPretrain, "train");

  std::vector<AudioBuffer> audio;
  std::vector<PseudoLabelSequence> labels;
  for (const auto* entry : train_entries) {
    const fs::path label_path = stage_dir("targets", iteration) / label_file_name(entry->id);
    if (!fs::exists(label_path)) {
      throw DependencyError("missing labels (run the targets stage for iteration " +
                            std::to_string(iteration) + " first): " + label_path.string());
    }
    nlohmann::json label_prov;
    PseudoLabelSequence seq = read_labels(label_path, &label_prov);
    if (label_prov.value("iteration", -1) != iteration) {
      throw DependencyError("label provenance mismatch for " + entry->id);
    }
    guard.add_input(label_path);
    audio.push_back(audio_for(*entry));
    labels.push_back(std::move(seq));
  }

  std::optional<Model> teacher;
  if (iteration > 1) {
    teacher = teacher_for(iteration);
    guard.add_input(stage_dir("train", iteration - 1) / "model.ckpt");
  }

  TrainOptions options;
  options.batch_size = config_.train.batch_size;
  options.mask.mask_prob = config_.encoder.mask_prob;
  options.mask.span_len = config_.encoder.mask_span;
  options.loss_weights.masked = config_.encoder.w_masked;
  options.loss_weights.unmasked = config_.encoder.w_unmasked;
  options.adam.base_lr = config_.train.base_lr;
  options.adam.warmup_steps = config_.train.warmup_steps;
  options.log_every = config_.train.log_every;

  run_iteration(plan, teacher ? &*teacher : nullptr, audio, labels, options, seed, guard.dir);
  guard.add_output(guard.dir / "model.ckpt");
  guard.add_output(guard.dir / "metrics.jsonl");
  guard.add_output(guard.dir / "report.json");
  guard.commit(seed);
}

void Pipeline::cmd_pretrain(bool force) { run_training_iteration(1, force); }

void Pipeline::cmd_distill(int iteration, bool force, bool pca_ablation) {
  if (pca_ablation) {
    const int iter = iteration < 0 ? config_.last_iteration_index() : iteration;
    const IterationPlan& base_plan = config_.plan(iter);
    if (base_plan.source.kind == TargetSource::Kind::kMfcc) {
      throw ConfigError("pca ablation needs a teacher-sourced iteration");
    }
    StageGuard guard(*this, "ablation", iter, force);
    if (guard.cached) return;
    const uint64_t seed = stage_seed("ablation", iter);

    const Model teacher = teacher_for(iter);
    guard.add_input(stage_dir("train", iter - 1) / "model.ckpt");
    const CorpusManifest m = manifest();
    const auto fit_entries = m.in_split(Split::kClusterFit);
    assert_split(fit_entries, Split::kClusterFit, "ablation");
    const auto train_entries = m.in_split(Split::kPretrain);
    assert_split(train_entries, Split::kPretrain, "ablation");
    std::vector<AudioBuffer> fit_audio;
    for (const auto* e : fit_entries) fit_audio.push_back(audio_for(*e));
    std::vector<AudioBuffer> train_audio;
    for (const auto* e : train_entries) train_audio.push_back(audio_for(*e));

    TrainOptions options;
    options.batch_size = config_.train.batch_size;
    options.mask.mask_prob = config_.encoder.mask_prob;
    options.mask.span_len = config_.encoder.mask_span;
    options.loss_weights.masked = config_.encoder.w_masked;
    options.loss_weights.unmasked = config_.encoder.w_unmasked;
    options.adam.base_lr = config_.train.base_lr;
    options.adam.warmup_steps = config_.train.warmup_steps;
    options.log_every = config_.train.log_every;

    KmeansOptions km;
    km.max_iters = config_.quantizer.kmeans_max_iters;
    km.batch = config_.quantizer.kmeans_batch;

    for (const bool with_pca : {true, false}) {
      IterationPlan plan = base_plan;
      plan.source.kind =
          with_pca ? TargetSource::Kind::kTeacherLayerPca : TargetSource::Kind::kTeacherLayer;
      if (with_pca && plan.source.pca_rank < 1) {
        throw ConfigError("pca ablation: plan has no pca_rank");
      }
      KmeansOptions km_run = km;
      km_run.seed = derive_seed(seed, with_pca ? "targets-pca" : "targets-nopca");
      const TargetGenResult targets = generate_targets(
          &teacher, fit_audio, train_audio, plan.source, plan.k, km_run, config_.features);
      const fs::path run_dir = guard.dir / (with_pca ? "pca" : "nopca");
      run_iteration(plan, &teacher, train_audio, targets.labels, options,
                    derive_seed(seed, "train"), run_dir);
      guard.add_output(run_dir / "model.ckpt");
      guard.add_output(run_dir / "metrics.jsonl");
      guard.add_output(run_dir / "report.json");
    }
    guard.commit(seed);
    return;
  }

  if (iteration < 0) {
    for (const auto& plan : config_.iterations) {
      if (plan.index >= 2) run_training_iteration(plan.index, force);
    }
    return;
  }
  if (iteration < 2) throw ConfigError("distill handles iterations >= 2; use pretrain for 1");
  run_training_iteration(iteration, force);
}

void Pipeline::train_probe_task(const std::string& task, bool force) {
  StageGuard guard(*this, "probe/" + task, -1, force);
  if (guard.cached) return;
  const uint64_t seed = stage_seed("probe-" + task, -1);

  const int encoder_iter = config_.probe.encoder_iteration > 0 ? config_.probe.encoder_iteration
                                                               : config_.last_iteration_index();
  const fs::path encoder_path = stage_dir("train", encoder_iter) / "model.ckpt";
  if (!fs::exists(encoder_path)) {
    throw DependencyError("missing encoder checkpoint (run the train stage for iteration " +
                          std::to_string(encoder_iter) + " first): " + encoder_path.string());
  }
  const Model encoder = load_model(encoder_path);
  guard.add_input(encoder_path);
  const uint64_t encoder_checksum_before = encoder.checksum();

  const CorpusManifest m = manifest();
  const auto make_examples = [&](Split split) {
    const auto entries = m.in_split(split);
    assert_split(entries, split, "probe");
    std::vector<ProbeExample> examples;
    for (const auto* e : entries) {
      ProbeExample ex;
      ex.features = extract_features(encoder, audio_for(*e), config_.probe.include_state0);
      ex.class_id = e->class_id;
      ex.tokens = {static_cast<uint32_t>(e->class_id)};
      examples.push_back(std::move(ex));
    }
    return examples;
  };

  std::vector<ProbeExample> train_examples = make_examples(Split::kProbeTrain);
  const std::vector<ProbeExample> dev_examples = make_examples(Split::kProbeDev);
  if (train_examples.empty()) throw ConfigError("probe: probe-train split is empty");

  if (config_.probe.shuffle_labels) {
    // Chance-level control: permute training labels, leave dev intact.
    Rng rng(derive_seed(seed, "shuffle-labels"));
    std::vector<int> ids;
    for (const auto& ex : train_examples) ids.push_back(ex.class_id);
    rng.shuffle(ids);
    for (size_t i = 0; i < train_examples.size(); ++i) {
      train_examples[i].class_id = ids[i];
      train_examples[i].tokens = {static_cast<uint32_t>(ids[i])};
    }
  }

  int n_classes = 0;
  for (const auto& e : m.entries) n_classes = std::max(n_classes, e.class_id + 1);

  ProbeConfig pc;
  pc.task = task == "ctc" ? ProbeConfig::Task::kCtc : ProbeConfig::Task::kClassification;
  pc.conv_layers = config_.probe.conv_layers;
  pc.kernel = config_.probe.kernel;
  pc.dropout = config_.probe.dropout;
  pc.hidden = config_.probe.hidden;
  pc.n_classes = n_classes;
  pc.input_dim = encoder.config.emb_dim;
  pc.ff_relu = config_.probe.ff_relu;
  pc.batch = config_.probe.batch;
  pc.steps = config_.probe.steps;

  ProbeTrainOptions options;
  options.adam.base_lr = config_.probe.lr;
  options.adam.warmup_steps = 1;
  options.eval_every = config_.probe.eval_every;

  ProbeTrainResult result;
  if (pc.steps == 0) {
    result.probe = build_probe(pc, derive_seed(seed, "probe-init"));
  } else {
    result = train_probe(pc, train_examples, dev_examples, options, seed);
  }

  if (encoder.checksum() != encoder_checksum_before) {
    throw NumericError("probe training mutated the frozen encoder");
  }

  save_probe(guard.dir / "probe.ckpt", result.probe);
  guard.add_output(guard.dir / "probe.ckpt");
  std::vector<nlohmann::json> rows;
  for (const auto& r : result.records) rows.push_back(r.to_json());
  write_jsonl(guard.dir / "records.jsonl", rows);
  guard.add_output(guard.dir / "records.jsonl");
  std::vector<nlohmann::json> loss_rows;
  for (size_t i = 0; i < result.loss_curve.size(); ++i) {
    loss_rows.push_back({{"step", i + 1}, {"loss", result.loss_curve[i]}});
  }
  write_jsonl(guard.dir / "loss.jsonl", loss_rows);
  guard.add_output(guard.dir / "loss.jsonl");
  guard.commit(seed);
}

void Pipeline::cmd_probe(const std::string& task, bool force) {
  if (task.empty()) {
    for (const auto& t : config_.probe.tasks) train_probe_task(t, force);
  } else {
    train_probe_task(task, force);
  }
}

void Pipeline::cmd_eval(const std::string& task, const std::string& split_name, bool force) {
  const Split split = split_from_string(split_name);
  if (split != Split::kProbeDev && split != Split::kProbeTest) {
    throw ConfigError("eval runs on probe-dev or probe-test only");
  }
  StageGuard guard(*this, "eval/" + task + "/" + split_name, -1, force);
  if (guard.cached) return;
  const uint64_t seed = stage_seed("eval-" + task + "-" + split_name, -1);

  const fs::path probe_path = stage_dir("probe/" + task) / "probe.ckpt";
  if (!fs::exists(probe_path)) {
    throw DependencyError("missing probe checkpoint (run the probe stage first): " +
                          probe_path.string());
  }
  const ProbeModel probe = load_probe(probe_path);
  guard.add_input(probe_path);

  const int encoder_iter = config_.probe.encoder_iteration > 0 ? config_.probe.encoder_iteration
                                                               : config_.last_iteration_index();
  const fs::path encoder_path = stage_dir("train", encoder_iter) / "model.ckpt";
  const Model encoder = load_model(encoder_path);
  guard.add_input(encoder_path);

  const CorpusManifest m = manifest();
  const auto entries = m.in_split(split);
  assert_split(entries, split, "eval");
  if (entries.empty()) throw ConfigError("eval: split " + split_name + " is empty");

  std::vector<ProbeExample> examples;
  for (const auto* e : entries) {
    ProbeExample ex;
    ex.features = extract_features(encoder, audio_for(*e), config_.probe.include_state0);
    ex.class_id = e->class_id;
    ex.tokens = {static_cast<uint32_t>(e->class_id)};
    examples.push_back(std::move(ex));
  }

  const EvalRecord record = evaluate_probe(probe, examples, split_name);
  nlohmann::json row = record.to_json();
  row["encoder_iteration"] = encoder_iter;
  write_jsonl(guard.dir / "records.jsonl", {row});
  guard.add_output(guard.dir / "records.jsonl");
  guard.commit(seed);
}

void Pipeline::cmd_report() {
  const fs::path report_dir = config_.out_dir / "report";
  fs::create_directories(report_dir);

  nlohmann::json report;
  report["rows"] = nlohmann::json::array();

  // Per-iteration compression accounting.
  nlohmann::json models = nlohmann::json::object();
  for (const auto& plan : config_.iterations) {
    const fs::path report_path = stage_dir("train", plan.index) / "report.json";
    if (!fs::exists(report_path)) continue;
    models["iter" + std::to_string(plan.index)] = nlohmann::json::parse(read_file(report_path));
  }
  report["models"] = models;

  // Eval rows.
  const fs::path eval_root = config_.out_dir / "eval";
  bool any_records = false;
  if (fs::exists(eval_root)) {
    std::vector<fs::path> record_files;
    for (const auto& p : fs::recursive_directory_iterator(eval_root)) {
      if (p.is_regular_file() && p.path().filename() == "records.jsonl") {
        record_files.push_back(p.path());
      }
    }
    std::sort(record_files.begin(), record_files.end());
    for (const auto& file : record_files) {
      for (const auto& row : read_jsonl(file)) {
        const int iter = row.value("encoder_iteration", config_.last_iteration_index());
        const std::string model = "iter" + std::to_string(iter);
        nlohmann::json out_row;
        out_row["model"] = model;
        out_row["task"] = row.at("task");
        out_row["metric"] = row.at("metric");
        out_row["value"] = row.at("value");
        out_row["split"] = row.at("split");
        out_row["n_items"] = row.at("n_items");
        if (models.contains(model)) {
          out_row["params"] = models[model]["student_params"];
          out_row["delta_s_percent"] = models[model]["delta_s_percent"];
        }
        report["rows"].push_back(out_row);
        any_records = true;
      }
    }
  }
  if (!any_records) {
    std::fprintf(stderr, "[skd] report: no eval records found; writing empty report\n");
  }

  // PCA-supervision ablation curves, when present.
  nlohmann::json ablation = nlohmann::json::object();
  const fs::path ablation_root = config_.out_dir / "ablation";
  if (fs::exists(ablation_root)) {
    for (const auto& iter_dir : fs::directory_iterator(ablation_root)) {
      if (!iter_dir.is_directory()) continue;
      nlohmann::json curves = nlohmann::json::object();
      for (const char* variant : {"pca", "nopca"}) {
        const fs::path metrics = iter_dir.path() / variant / "metrics.jsonl";
        if (!fs::exists(metrics)) continue;
        nlohmann::json curve = nlohmann::json::array();
        for (const auto& row : read_jsonl(metrics)) {
          curve.push_back({{"step", row.at("step")}, {"loss", row.at("loss_total")}});
        }
        curves[variant] = curve;
      }
      if (!curves.empty()) ablation[iter_dir.path().filename().string()] = curves;
    }
  }
  report["ablation"] = ablation;

  // Text rendering.
  std::string text;
  text += "model   task            metric    value      split       n    params      dS%\n";
  text += "-----------------------------------------------------------------------------\n";
  for (const auto& row : report["rows"]) {
    char line[256];
    std::snprintf(line, sizeof(line), "%-7s %-15s %-9s %-10.4f %-11s %-4lld %-11lld %.1f\n",
                  row.at("model").get<std::string>().c_str(),
                  row.at("task").get<std::string>().c_str(),
                  row.at("metric").get<std::string>().c_str(), row.at("value").get<double>(),
                  row.at("split").get<std::string>().c_str(),
                  static_cast<long long>(row.at("n_items").get<int64_t>()),
                  static_cast<long long>(row.value("params", int64_t{0})),
                  row.value("delta_s_percent", 0.0));
    text += line;
  }
  if (!ablation.empty()) {
    text += "\nablation (pca vs nopca loss curves): see report.json\n";
  }

  write_file_atomic(report_dir / "report.json", report.dump(2) + "\n");
  write_file_atomic(report_dir / "report.txt", text);
  std::fprintf(stderr, "[skd] report written to %s\n", report_dir.string().c_str());
}

void Pipeline::run_all(bool force) {
  cmd_synth(force);
  cmd_features(force);
  for (const auto& plan : config_.iterations) {
    cmd_quantize(plan.index, force);
    cmd_targets(plan.index, force);
    run_training_iteration(plan.index, force);
  }
  for (const auto& task : config_.probe.tasks) train_probe_task(task, force);
  for (const auto& task : config_.probe.tasks) cmd_eval(task, "probe-test", force);
  cmd_report();
}

}  // namespace skd

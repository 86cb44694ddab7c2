#include "skd/config.hpp"

#include "skd/errors.hpp"
#include "skd/io.hpp"
#include "skd/rng.hpp"

namespace skd {

namespace {

TargetSource parse_target_source(const nlohmann::json& it) {
  TargetSource source;
  const std::string kind = it.at("target_source").get<std::string>();
  if (kind == "mfcc") {
    source.kind = TargetSource::Kind::kMfcc;
    return source;
  }
  if (kind == "teacher_layer") {
    source.kind = TargetSource::Kind::kTeacherLayer;
  } else if (kind == "teacher_layer_pca") {
    source.kind = TargetSource::Kind::kTeacherLayerPca;
    source.pca_rank = it.at("pca_rank").get<int64_t>();
  } else {
    throw ConfigError("unknown target_source: " + kind);
  }
  const auto& layer = it.at("layer");
  if (layer.is_string()) {
    if (layer.get<std::string>() != "last") {
      throw ConfigError("layer must be an integer or \"last\"");
    }
    source.last = true;
  } else {
    source.layer = layer.get<int>();
  }
  return source;
}

EncoderConfig resolve_encoder_config(const nlohmann::json& iteration,
                                     const PipelineConfig::Encoder& defaults, int64_t k) {
  const std::string preset = iteration.value("preset", defaults.preset);
  nlohmann::json j = EncoderConfig::preset(preset).to_json();
  for (const auto& [key, value] : defaults.overrides.items()) j[key] = value;
  if (iteration.contains("overrides")) {
    for (const auto& [key, value] : iteration.at("overrides").items()) j[key] = value;
  }
  j["n_labels"] = k;
  return EncoderConfig::from_json(j);
}

}  // namespace

uint64_t PipelineConfig::config_hash() const { return fnv1a64(effective.dump()); }

int PipelineConfig::last_iteration_index() const {
  if (iterations.empty()) throw ConfigError("config has no iterations");
  return iterations.back().index;
}

const IterationPlan& PipelineConfig::plan(int index) const {
  for (const auto& p : iterations) {
    if (p.index == index) return p;
  }
  throw ConfigError("no iteration plan with index " + std::to_string(index));
}

PipelineConfig parse_config(const nlohmann::json& j) {
  PipelineConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  cfg.out_dir = j.value("out_dir", cfg.out_dir.string());

  if (j.contains("corpus")) {
    const auto& c = j.at("corpus");
    cfg.corpus.n_utts = c.value("n_utts", cfg.corpus.n_utts);
    cfg.corpus.duration_s = c.value("duration_s", cfg.corpus.duration_s);
    cfg.corpus.n_classes = c.value("n_classes", cfg.corpus.n_classes);
    cfg.corpus.materialize = c.value("materialize", cfg.corpus.materialize);
    if (c.contains("speed_factors")) {
      cfg.corpus.speed_factors = c.at("speed_factors").get<std::vector<double>>();
    }
    if (c.contains("splits")) {
      const auto& s = c.at("splits");
      cfg.corpus.splits.pretrain = s.value("pretrain", cfg.corpus.splits.pretrain);
      cfg.corpus.splits.cluster_fit = s.value("cluster_fit", cfg.corpus.splits.cluster_fit);
      cfg.corpus.splits.probe_train = s.value("probe_train", cfg.corpus.splits.probe_train);
      cfg.corpus.splits.probe_dev = s.value("probe_dev", cfg.corpus.splits.probe_dev);
      cfg.corpus.splits.probe_test = s.value("probe_test", cfg.corpus.splits.probe_test);
    }
  }

  if (j.contains("features")) {
    const auto& f = j.at("features");
    cfg.features.win = f.value("win", cfg.features.win);
    cfg.features.hop = f.value("hop", cfg.features.hop);
    cfg.features.n_mels = f.value("n_mels", cfg.features.n_mels);
    cfg.features.n_ceps = f.value("n_ceps", cfg.features.n_ceps);
  }

  if (j.contains("quantizer")) {
    const auto& q = j.at("quantizer");
    cfg.quantizer.kmeans_max_iters = q.value("kmeans_max_iters", cfg.quantizer.kmeans_max_iters);
    cfg.quantizer.kmeans_batch = q.value("kmeans_batch", cfg.quantizer.kmeans_batch);
  }

  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    cfg.encoder.preset = e.value("preset", cfg.encoder.preset);
    if (e.contains("overrides")) cfg.encoder.overrides = e.at("overrides");
    cfg.encoder.mask_prob = e.value("mask_prob", cfg.encoder.mask_prob);
    cfg.encoder.mask_span = e.value("mask_span", cfg.encoder.mask_span);
    cfg.encoder.w_masked = e.value("w_masked", cfg.encoder.w_masked);
    cfg.encoder.w_unmasked = e.value("w_unmasked", cfg.encoder.w_unmasked);
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.base_lr = t.value("base_lr", cfg.train.base_lr);
    cfg.train.warmup_steps = t.value("warmup_steps", cfg.train.warmup_steps);
    cfg.train.log_every = t.value("log_every", cfg.train.log_every);
  }

  if (!j.contains("iterations") || j.at("iterations").empty()) {
    throw ConfigError("config needs a non-empty iterations list");
  }
  int prev_index = 0;
  for (const auto& it : j.at("iterations")) {
    IterationPlan plan;
    plan.index = it.at("index").get<int>();
    if (plan.index != prev_index + 1) {
      throw ConfigError("iteration indices must be consecutive starting at 1");
    }
    prev_index = plan.index;
    plan.source = parse_target_source(it);
    if (plan.index == 1 && plan.source.kind != TargetSource::Kind::kMfcc) {
      throw ConfigError("iteration 1 must use mfcc targets (there is no teacher yet)");
    }
    plan.k = it.value("k", int64_t{64});
    plan.student = resolve_encoder_config(it, cfg.encoder, plan.k);
    const std::string init = it.value("init", "random");
    if (init == "random") {
      plan.init = InitStrategy::kRandom;
    } else if (init == "blocked_average") {
      plan.init = InitStrategy::kBlockedAverage;
    } else {
      throw ConfigError("unknown init strategy: " + init);
    }
    if (plan.index == 1 && plan.init == InitStrategy::kBlockedAverage) {
      throw ConfigError("iteration 1 cannot use blocked_average (no teacher)");
    }
    plan.steps = it.value("steps", int64_t{100});
    cfg.iterations.push_back(std::move(plan));
  }

  if (j.contains("probe")) {
    const auto& p = j.at("probe");
    if (p.contains("tasks")) cfg.probe.tasks = p.at("tasks").get<std::vector<std::string>>();
    cfg.probe.encoder_iteration = p.value("encoder_iteration", cfg.probe.encoder_iteration);
    cfg.probe.conv_layers = p.value("conv_layers", cfg.probe.conv_layers);
    cfg.probe.kernel = p.value("kernel", cfg.probe.kernel);
    cfg.probe.dropout = p.value("dropout", cfg.probe.dropout);
    cfg.probe.hidden = p.value("hidden", cfg.probe.hidden);
    cfg.probe.batch = p.value("batch", cfg.probe.batch);
    cfg.probe.steps = p.value("steps", cfg.probe.steps);
    cfg.probe.ff_relu = p.value("ff_relu", cfg.probe.ff_relu);
    cfg.probe.include_state0 = p.value("include_state0", cfg.probe.include_state0);
    cfg.probe.lr = p.value("lr", cfg.probe.lr);
    cfg.probe.eval_every = p.value("eval_every", cfg.probe.eval_every);
    cfg.probe.shuffle_labels = p.value("shuffle_labels", cfg.probe.shuffle_labels);
  }
  for (const auto& task : cfg.probe.tasks) {
    if (task != "classification" && task != "ctc") {
      throw ConfigError("unknown probe task: " + task);
    }
  }

  cfg.effective = j;
  cfg.effective["seed"] = cfg.seed;
  cfg.effective["out_dir"] = cfg.out_dir.string();
  return cfg;
}

PipelineConfig load_config_file(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
  return parse_config(j);
}

nlohmann::json default_config_json() {
  return nlohmann::json{
      {"seed", 7},
      {"out_dir", "runs/demo"},
      {"corpus",
       {{"n_utts", 64},
        {"duration_s", 2.0},
        {"n_classes", 4},
        {"materialize", true},
        {"splits",
         {{"pretrain", 0.55},
          {"cluster_fit", 0.15},
          {"probe_train", 0.15},
          {"probe_dev", 0.075},
          {"probe_test", 0.075}}}}},
      {"features", {{"win", 400}, {"hop", 320}, {"n_mels", 26}, {"n_ceps", 13}}},
      {"quantizer", {{"kmeans_max_iters", 60}, {"kmeans_batch", 0}}},
      {"encoder",
       {{"preset", "tiny"},
        {"mask_prob", 0.08},
        {"mask_span", 10},
        {"w_masked", 1.0},
        {"w_unmasked", 0.1}}},
      {"train",
       {{"batch_size", 4}, {"base_lr", 1e-3}, {"warmup_steps", 40}, {"log_every", 1}}},
      {"iterations",
       nlohmann::json::array(
           {{{"index", 1}, {"target_source", "mfcc"}, {"k", 64}, {"preset", "tiny"},
             {"init", "random"}, {"steps", 300}},
            {{"index", 2}, {"target_source", "teacher_layer"}, {"layer", 1}, {"k", 64},
             {"preset", "tiny"}, {"init", "random"}, {"steps", 300}},
            {{"index", 3}, {"target_source", "teacher_layer_pca"}, {"layer", "last"},
             {"pca_rank", 16}, {"k", 64}, {"preset", "tiny-shallow"},
             {"init", "blocked_average"}, {"steps", 400}}})},
      {"probe",
       {{"tasks", nlohmann::json::array({"classification", "ctc"})},
        {"conv_layers", 3},
        {"kernel", 5},
        {"dropout", 0.4},
        {"hidden", 80},
        {"batch", 4},
        {"steps", 1500},
        {"eval_every", 250},
        {"lr", 1e-3}}}};
}

}  // namespace skd

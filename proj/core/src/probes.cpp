#include "skd/probes.hpp"

#include <cmath>
#include <cstring>

#include "skd/checkpoint.hpp"
#include "skd/errors.hpp"
#include "skd/rng.hpp"

namespace skd {

FeatureMatrix extract_features(const Model& encoder, const AudioBuffer& audio,
                               bool include_state0) {
  const ForwardResult fwd = forward(encoder, audio);
  const size_t first = include_state0 ? 0 : 1;
  const size_t count = fwd.hidden.size() - first;

  FeatureMatrix features;
  features.rows = fwd.hidden.front().dim(0);
  features.cols = fwd.hidden.front().dim(1);
  features.frame_rate = 50.0;
  features.utterance_id = audio.utterance_id;
  features.kind = FeatureKind::kHidden;
  features.data.assign(static_cast<size_t>(features.rows * features.cols), 0.0);
  for (size_t s = first; s < fwd.hidden.size(); ++s) {
    const Tensor& h = fwd.hidden[s];
    for (size_t i = 0; i < h.numel(); ++i) features.data[i] += h[i];
  }
  for (auto& v : features.data) v /= static_cast<double>(count);
  return features;
}

std::vector<double> self_attention_pool(const double* seq, int64_t t_count, int64_t dim,
                                        const double* score, std::vector<double>* alpha_out) {
  if (t_count < 1) throw ConfigError("self_attention_pool: need T >= 1");
  std::vector<double> scores(static_cast<size_t>(t_count));
  double max_s = -1e300;
  for (int64_t t = 0; t < t_count; ++t) {
    double acc = 0.0;
    for (int64_t c = 0; c < dim; ++c) acc += score[c] * seq[t * dim + c];
    scores[static_cast<size_t>(t)] = acc;
    max_s = std::max(max_s, acc);
  }
  double denom = 0.0;
  for (auto& s : scores) {
    s = std::exp(s - max_s);
    denom += s;
  }
  std::vector<double> out(static_cast<size_t>(dim), 0.0);
  for (int64_t t = 0; t < t_count; ++t) {
    const double a = scores[static_cast<size_t>(t)] / denom;
    scores[static_cast<size_t>(t)] = a;
    for (int64_t c = 0; c < dim; ++c) out[static_cast<size_t>(c)] += a * seq[t * dim + c];
  }
  if (alpha_out) *alpha_out = scores;
  return out;
}

void ProbeConfig::validate() const {
  if (conv_layers < 1) throw ConfigError("probe: conv_layers must be >= 1");
  if (kernel < 1) throw ConfigError("probe: kernel must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("probe: dropout must lie in [0, 1)");
  if (hidden < 1) throw ConfigError("probe: hidden must be >= 1");
  if (task == Task::kClassification && n_classes < 2) {
    throw ConfigError("probe: classification needs n_classes >= 2");
  }
  if (task == Task::kCtc && n_classes < 1) throw ConfigError("probe: ctc needs n_classes >= 1");
  if (input_dim < 1) throw ConfigError("probe: input_dim unset");
}

nlohmann::json ProbeConfig::to_json() const {
  return nlohmann::json{{"task", task == Task::kCtc ? "ctc" : "classification"},
                        {"conv_layers", conv_layers},
                        {"kernel", kernel},
                        {"dropout", dropout},
                        {"hidden", hidden},
                        {"n_classes", n_classes},
                        {"input_dim", input_dim},
                        {"ff_relu", ff_relu},
                        {"batch", batch},
                        {"steps", steps}};
}

ProbeConfig ProbeConfig::from_json(const nlohmann::json& j) {
  ProbeConfig c;
  const std::string task = j.at("task").get<std::string>();
  if (task == "ctc") {
    c.task = Task::kCtc;
  } else if (task == "classification") {
    c.task = Task::kClassification;
  } else {
    throw ConfigError("unknown probe task: " + task);
  }
  c.conv_layers = j.at("conv_layers").get<int>();
  c.kernel = j.at("kernel").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.hidden = j.at("hidden").get<int>();
  c.n_classes = j.at("n_classes").get<int>();
  c.input_dim = j.at("input_dim").get<int>();
  c.ff_relu = j.at("ff_relu").get<bool>();
  c.batch = j.at("batch").get<int64_t>();
  c.steps = j.at("steps").get<int64_t>();
  c.validate();
  return c;
}

ProbeModel build_probe(const ProbeConfig& config, uint64_t seed) {
  config.validate();
  ProbeModel probe;
  probe.config = config;
  const Rng root(seed);

  auto add_uniform = [&](const std::string& name, std::vector<int64_t> shape, double fan_in,
                         double fan_out) {
    Tensor t(shape);
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    Rng rng = root.child(name);
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-a, a);
    probe.params.emplace(name, std::move(t));
  };
  auto add_zeros = [&](const std::string& name, std::vector<int64_t> shape) {
    probe.params.emplace(name, Tensor(std::move(shape)));
  };

  for (int i = 0; i < config.conv_layers; ++i) {
    const int64_t in = (i == 0) ? config.input_dim : config.hidden;
    const std::string p = "conv." + std::to_string(i);
    add_uniform(p + ".weight", {config.hidden, in, config.kernel},
                static_cast<double>(in * config.kernel),
                static_cast<double>(config.hidden * config.kernel));
    add_zeros(p + ".bias", {config.hidden});
  }
  if (config.task == ProbeConfig::Task::kClassification) {
    add_uniform("pool.score", {config.hidden}, config.hidden, config.hidden);
  }
  add_uniform("ff.weight", {config.hidden, config.hidden}, config.hidden, config.hidden);
  add_zeros("ff.bias", {config.hidden});
  add_uniform("out.weight", {config.hidden, config.output_dim()}, config.hidden,
              config.output_dim());
  add_zeros("out.bias", {config.output_dim()});
  return probe;
}

namespace {

// Length-preserving temporal convolution with edge replication.
void conv_replicate_forward(const Tensor& in, const Tensor& w, const Tensor& b, Tensor& out) {
  const int64_t rows = in.dim(0), c_in = in.dim(1);
  const int64_t c_out = w.dim(0), kernel = w.dim(2);
  const int64_t pad = (kernel - 1) / 2;
  for (int64_t t = 0; t < rows; ++t) {
    double* orow = out.data() + t * c_out;
    for (int64_t o = 0; o < c_out; ++o) orow[o] = b[o];
    for (int64_t j = 0; j < kernel; ++j) {
      int64_t src = t + j - pad;
      src = src < 0 ? 0 : (src >= rows ? rows - 1 : src);
      const double* irow = in.data() + src * c_in;
      for (int64_t o = 0; o < c_out; ++o) {
        const double* wrow = w.data() + (o * c_in) * kernel + j;
        double acc = 0.0;
        for (int64_t c = 0; c < c_in; ++c) acc += irow[c] * wrow[c * kernel];
        orow[o] += acc;
      }
    }
  }
}

void conv_replicate_backward(const Tensor& dout, const Tensor& in, const Tensor& w, Tensor& din,
                             Tensor& dw, Tensor& db) {
  const int64_t rows = in.dim(0), c_in = in.dim(1);
  const int64_t c_out = w.dim(0), kernel = w.dim(2);
  const int64_t pad = (kernel - 1) / 2;
  for (int64_t t = 0; t < rows; ++t) {
    const double* drow = dout.data() + t * c_out;
    for (int64_t o = 0; o < c_out; ++o) {
      const double g = drow[o];
      if (g == 0.0) continue;
      db[o] += g;
      for (int64_t j = 0; j < kernel; ++j) {
        int64_t src = t + j - pad;
        src = src < 0 ? 0 : (src >= rows ? rows - 1 : src);
        const double* irow = in.data() + src * c_in;
        double* dirow = din.data() + src * c_in;
        const double* wrow = w.data() + (o * c_in) * kernel + j;
        double* dwrow = dw.data() + (o * c_in) * kernel + j;
        for (int64_t c = 0; c < c_in; ++c) {
          dirow[c] += g * wrow[c * kernel];
          dwrow[c * kernel] += g * irow[c];
        }
      }
    }
  }
}

void linear_row_forward(const double* x, const Tensor& w, const Tensor& b, double* y) {
  const int64_t in = w.dim(0), out = w.dim(1);
  for (int64_t o = 0; o < out; ++o) y[o] = b[o];
  for (int64_t i = 0; i < in; ++i) {
    const double xv = x[i];
    if (xv == 0.0) continue;
    const double* wrow = w.data() + i * out;
    for (int64_t o = 0; o < out; ++o) y[o] += xv * wrow[o];
  }
}

}  // namespace

Tensor probe_forward(const ProbeModel& probe, const FeatureMatrix& features, bool train_mode,
                     uint64_t dropout_seed, ProbeTrace* trace) {
  const ProbeConfig& cfg = probe.config;
  if (features.cols != cfg.input_dim) {
    throw ConfigError("probe_forward: feature dim does not match probe input_dim");
  }
  if (features.rows < 1) throw ConfigError("probe_forward: empty feature sequence");

  ProbeTrace local;
  ProbeTrace& tr = trace ? *trace : local;
  const int64_t t_count = features.rows;

  tr.input = Tensor({t_count, cfg.input_dim});
  std::copy(features.data.begin(), features.data.end(), tr.input.data());

  tr.conv_pre.clear();
  tr.conv_out.clear();
  tr.drop_mask.clear();
  const Rng drop_root = Rng(dropout_seed);

  const Tensor* cur = &tr.input;
  for (int i = 0; i < cfg.conv_layers; ++i) {
    const std::string p = "conv." + std::to_string(i);
    Tensor pre({t_count, cfg.hidden});
    conv_replicate_forward(*cur, probe.params.at(p + ".weight"), probe.params.at(p + ".bias"),
                           pre);
    Tensor out = Tensor::zeros_like(pre);
    Tensor mask;
    if (train_mode && cfg.dropout > 0.0) {
      mask = Tensor::zeros_like(pre);
      Rng rng = drop_root.child(static_cast<uint64_t>(i));
      const double keep = 1.0 - cfg.dropout;
      for (size_t j = 0; j < mask.numel(); ++j) {
        mask[j] = rng.next_double() < keep ? 1.0 / keep : 0.0;
      }
    }
    for (size_t j = 0; j < pre.numel(); ++j) {
      const double relu = pre[j] > 0.0 ? pre[j] : 0.0;
      out[j] = mask.numel() ? relu * mask[j] : relu;
    }
    tr.conv_pre.push_back(std::move(pre));
    tr.drop_mask.push_back(std::move(mask));
    tr.conv_out.push_back(std::move(out));
    cur = &tr.conv_out.back();
  }

  const Tensor& w_ff = probe.params.at("ff.weight");
  const Tensor& b_ff = probe.params.at("ff.bias");
  const Tensor& w_out = probe.params.at("out.weight");
  const Tensor& b_out = probe.params.at("out.bias");

  if (cfg.task == ProbeConfig::Task::kClassification) {
    const std::vector<double> pooled = self_attention_pool(
        cur->data(), t_count, cfg.hidden, probe.params.at("pool.score").data(), &tr.alpha);
    tr.pooled = Tensor({1, cfg.hidden});
    std::copy(pooled.begin(), pooled.end(), tr.pooled.data());

    tr.ff_pre = Tensor({1, cfg.hidden});
    linear_row_forward(tr.pooled.data(), w_ff, b_ff, tr.ff_pre.data());
    Tensor ff_act({1, cfg.hidden});
    for (size_t j = 0; j < ff_act.numel(); ++j) {
      ff_act[j] = cfg.ff_relu && tr.ff_pre[j] < 0.0 ? 0.0 : tr.ff_pre[j];
    }
    tr.logits = Tensor({1, cfg.output_dim()});
    linear_row_forward(ff_act.data(), w_out, b_out, tr.logits.data());
  } else {
    tr.ff_pre = Tensor({t_count, cfg.hidden});
    tr.logits = Tensor({t_count, cfg.output_dim()});
    std::vector<double> ff_act(static_cast<size_t>(cfg.hidden));
    for (int64_t t = 0; t < t_count; ++t) {
      linear_row_forward(cur->data() + t * cfg.hidden, w_ff, b_ff, tr.ff_pre.data() + t * cfg.hidden);
      for (int64_t c = 0; c < cfg.hidden; ++c) {
        const double v = tr.ff_pre.at(t, c);
        ff_act[static_cast<size_t>(c)] = cfg.ff_relu && v < 0.0 ? 0.0 : v;
      }
      linear_row_forward(ff_act.data(), w_out, b_out, tr.logits.data() + t * cfg.output_dim());
    }
  }
  return tr.logits;
}

TensorMap probe_backward(const ProbeModel& probe, const ProbeTrace& trace,
                         const Tensor& d_logits) {
  const ProbeConfig& cfg = probe.config;
  TensorMap grads;
  for (const auto& [name, tensor] : probe.params) grads.emplace(name, Tensor::zeros_like(tensor));

  const Tensor& w_ff = probe.params.at("ff.weight");
  const Tensor& w_out = probe.params.at("out.weight");
  const int64_t t_count = trace.input.dim(0);
  const Tensor& conv_top = trace.conv_out.back();

  Tensor d_conv_top = Tensor::zeros_like(conv_top);

  auto backprop_row = [&](const double* d_out_row, const double* ff_pre_row,
                          const double* conv_row, double* d_conv_row) {
    const int64_t hidden = cfg.hidden;
    const int64_t out_dim = cfg.output_dim();
    std::vector<double> ff_act(static_cast<size_t>(hidden));
    for (int64_t c = 0; c < hidden; ++c) {
      const double v = ff_pre_row[c];
      ff_act[static_cast<size_t>(c)] = cfg.ff_relu && v < 0.0 ? 0.0 : v;
    }
    // out layer
    Tensor& dw_out = grads.at("out.weight");
    Tensor& db_out = grads.at("out.bias");
    std::vector<double> d_ff_act(static_cast<size_t>(hidden), 0.0);
    for (int64_t o = 0; o < out_dim; ++o) {
      const double g = d_out_row[o];
      if (g == 0.0) continue;
      db_out[static_cast<size_t>(o)] += g;
      for (int64_t c = 0; c < hidden; ++c) {
        dw_out.at(c, o) += ff_act[static_cast<size_t>(c)] * g;
        d_ff_act[static_cast<size_t>(c)] += w_out.at(c, o) * g;
      }
    }
    // ff layer
    Tensor& dw_ff = grads.at("ff.weight");
    Tensor& db_ff = grads.at("ff.bias");
    for (int64_t c = 0; c < hidden; ++c) {
      const double d_pre =
          cfg.ff_relu && ff_pre_row[c] <= 0.0 ? 0.0 : d_ff_act[static_cast<size_t>(c)];
      if (d_pre == 0.0) continue;
      db_ff[static_cast<size_t>(c)] += d_pre;
      for (int64_t i = 0; i < hidden; ++i) {
        dw_ff.at(i, c) += conv_row[i] * d_pre;
        d_conv_row[i] += w_ff.at(i, c) * d_pre;
      }
    }
  };

  if (cfg.task == ProbeConfig::Task::kClassification) {
    Tensor d_pooled({1, cfg.hidden});
    backprop_row(d_logits.data(), trace.ff_pre.data(), trace.pooled.data(), d_pooled.data());

    // Pool backward: scores s_t = score . x_t, alpha = softmax(s),
    // pooled = sum alpha_t x_t.
    const Tensor& score = probe.params.at("pool.score");
    Tensor& d_score = grads.at("pool.score");
    const int64_t hidden = cfg.hidden;
    std::vector<double> da(static_cast<size_t>(t_count));
    double dot = 0.0;
    for (int64_t t = 0; t < t_count; ++t) {
      const double* xt = conv_top.data() + t * hidden;
      double acc = 0.0;
      for (int64_t c = 0; c < hidden; ++c) acc += d_pooled[static_cast<size_t>(c)] * xt[c];
      da[static_cast<size_t>(t)] = acc;
      dot += acc * trace.alpha[static_cast<size_t>(t)];
    }
    for (int64_t t = 0; t < t_count; ++t) {
      const double alpha_t = trace.alpha[static_cast<size_t>(t)];
      const double ds = alpha_t * (da[static_cast<size_t>(t)] - dot);
      const double* xt = conv_top.data() + t * hidden;
      double* d_xt = d_conv_top.data() + t * hidden;
      for (int64_t c = 0; c < hidden; ++c) {
        d_score[static_cast<size_t>(c)] += ds * xt[c];
        d_xt[c] += alpha_t * d_pooled[static_cast<size_t>(c)] + ds * score[static_cast<size_t>(c)];
      }
    }
  } else {
    for (int64_t t = 0; t < t_count; ++t) {
      backprop_row(d_logits.data() + t * cfg.output_dim(), trace.ff_pre.data() + t * cfg.hidden,
                   conv_top.data() + t * cfg.hidden, d_conv_top.data() + t * cfg.hidden);
    }
  }

  // Conv stack backward.
  Tensor d_out = std::move(d_conv_top);
  for (int i = cfg.conv_layers - 1; i >= 0; --i) {
    const Tensor& pre = trace.conv_pre[static_cast<size_t>(i)];
    const Tensor& mask = trace.drop_mask[static_cast<size_t>(i)];
    Tensor d_pre = Tensor::zeros_like(pre);
    for (size_t j = 0; j < d_pre.numel(); ++j) {
      double g = d_out[j];
      if (mask.numel()) g *= mask[j];
      d_pre[j] = pre[j] > 0.0 ? g : 0.0;
    }
    const Tensor& input = (i == 0) ? trace.input : trace.conv_out[static_cast<size_t>(i - 1)];
    Tensor d_input = Tensor::zeros_like(input);
    const std::string p = "conv." + std::to_string(i);
    conv_replicate_backward(d_pre, input, probe.params.at(p + ".weight"), d_input,
                            grads.at(p + ".weight"), grads.at(p + ".bias"));
    d_out = std::move(d_input);
  }
  return grads;
}

nlohmann::json EvalRecord::to_json() const {
  return nlohmann::json{{"task", task},   {"metric", metric},   {"value", value},
                        {"split", split}, {"n_items", n_items}, {"step", step}};
}

EvalRecord evaluate_probe(const ProbeModel& probe, const std::vector<ProbeExample>& examples,
                          const std::string& split_name, int64_t step) {
  if (examples.empty()) throw ConfigError("evaluate_probe: empty split");
  EvalRecord record;
  record.split = split_name;
  record.n_items = static_cast<int64_t>(examples.size());
  record.step = step;

  if (probe.config.task == ProbeConfig::Task::kClassification) {
    record.task = "classification";
    record.metric = "accuracy";
    int64_t hits = 0;
    for (const auto& ex : examples) {
      const Tensor logits = probe_forward(probe, ex.features, /*train_mode=*/false, 0);
      int64_t arg_max = 0;
      for (int64_t c = 1; c < logits.dim(1); ++c) {
        if (logits[static_cast<size_t>(c)] > logits[static_cast<size_t>(arg_max)]) arg_max = c;
      }
      if (arg_max == ex.class_id) ++hits;
    }
    record.value = static_cast<double>(hits) / static_cast<double>(examples.size());
  } else {
    record.task = "ctc";
    record.metric = "wer";
    int64_t edits = 0, ref_len = 0;
    for (const auto& ex : examples) {
      if (ex.tokens.empty()) throw ConfigError("evaluate_probe: empty CTC reference");
      const Tensor logits = probe_forward(probe, ex.features, /*train_mode=*/false, 0);
      const auto hyp = greedy_decode(logits);
      edits += edit_distance(ex.tokens, hyp);
      ref_len += static_cast<int64_t>(ex.tokens.size());
    }
    record.value = static_cast<double>(edits) / static_cast<double>(ref_len);
  }
  return record;
}

ProbeTrainResult train_probe(const ProbeConfig& config, const std::vector<ProbeExample>& train,
                             const std::vector<ProbeExample>& dev,
                             const ProbeTrainOptions& options, uint64_t seed) {
  if (train.empty()) throw ConfigError("train_probe: empty training split");
  ProbeTrainResult result;
  result.probe = build_probe(config, derive_seed(seed, "probe-init"));

  AdamState state;
  adam_init(state, result.probe.params);
  Rng order_rng(derive_seed(seed, "probe-order"));
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t cursor = order.size();

  for (int64_t step = 1; step <= config.steps; ++step) {
    TensorMap grad_sum;
    for (const auto& [name, t] : result.probe.params) {
      grad_sum.emplace(name, Tensor::zeros_like(t));
    }
    double loss_sum = 0.0;
    const int64_t batch = std::min<int64_t>(config.batch, static_cast<int64_t>(train.size()));
    for (int64_t b = 0; b < batch; ++b) {
      if (cursor >= order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      const ProbeExample& ex = train[order[cursor++]];
      const uint64_t drop_seed =
          derive_seed(seed, "dropout", static_cast<uint64_t>(step) * 100003 + b);
      ProbeTrace trace;
      const Tensor logits = probe_forward(result.probe, ex.features, /*train_mode=*/true,
                                          drop_seed, &trace);
      Tensor d_logits;
      double loss;
      if (config.task == ProbeConfig::Task::kClassification) {
        // Row softmax CE against the class id.
        const int64_t k = logits.dim(1);
        double max_v = logits[0];
        for (int64_t c = 1; c < k; ++c) max_v = std::max(max_v, logits[static_cast<size_t>(c)]);
        double denom = 0.0;
        for (int64_t c = 0; c < k; ++c) denom += std::exp(logits[static_cast<size_t>(c)] - max_v);
        loss = -(logits[static_cast<size_t>(ex.class_id)] - max_v - std::log(denom));
        d_logits = Tensor({1, k});
        for (int64_t c = 0; c < k; ++c) {
          const double p = std::exp(logits[static_cast<size_t>(c)] - max_v) / denom;
          d_logits[static_cast<size_t>(c)] = p - (c == ex.class_id ? 1.0 : 0.0);
        }
      } else {
        loss = ctc_loss(logits, ex.tokens, &d_logits);
      }
      loss_sum += loss;
      const TensorMap grads = probe_backward(result.probe, trace, d_logits);
      for (auto& [name, g] : grad_sum) g.axpy(1.0 / batch, grads.at(name));
    }
    result.loss_curve.push_back(loss_sum / batch);
    adam_step(result.probe.params, grad_sum, state, options.adam);

    if (!dev.empty() && (step % options.eval_every == 0 || step == config.steps)) {
      result.records.push_back(evaluate_probe(result.probe, dev, "probe-dev", step));
    }
  }
  return result;
}

void save_probe(const std::filesystem::path& path, const ProbeModel& probe) {
  Container container;
  container.kind = "probe";
  container.config = probe.config.to_json();
  container.params = probe.params;
  save_container(path, container);
}

ProbeModel load_probe(const std::filesystem::path& path) {
  Container container = load_container(path);
  if (container.kind != "probe") throw ConfigError("not a probe checkpoint: " + path.string());
  ProbeModel probe;
  probe.config = ProbeConfig::from_json(container.config);
  probe.params = std::move(container.params);
  return probe;
}

}  // namespace skd

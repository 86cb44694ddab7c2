#include "skd/optimizer.hpp"

#include <cmath>
#include <cstdlib>

#include "skd/errors.hpp"
#include "skd/rng.hpp"

namespace skd {

double schedule_lr(const AdamConfig& config, int64_t step) {
  if (step < 1) throw ConfigError("schedule_lr: step is 1-indexed");
  const double warmup = static_cast<double>(std::max<int64_t>(config.warmup_steps, 1));
  const double s = static_cast<double>(step);
  return config.base_lr * std::min(s / warmup, std::sqrt(warmup / s));
}

void adam_init(AdamState& state, const TensorMap& params) {
  state.step = 0;
  state.m.clear();
  state.v.clear();
  for (const auto& [name, tensor] : params) {
    state.m.emplace(name, Tensor::zeros_like(tensor));
    state.v.emplace(name, Tensor::zeros_like(tensor));
  }
}

void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state,
               const AdamConfig& config) {
  if (state.m.empty()) adam_init(state, params);
  state.step += 1;
  const double lr = schedule_lr(config, state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (auto& [name, param] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (size_t i = 0; i < param.numel(); ++i) {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      param[i] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

StepMetrics train_step(Model& model, const std::vector<TrainItem>& batch,
                       const MaskSpec& mask_spec, const TrainLossWeights& weights,
                       AdamState& state, const AdamConfig& adam) {
  if (batch.empty()) throw ConfigError("train_step: empty batch");
  const int64_t step = state.step + 1;

  TensorMap grad_sum;
  for (const auto& [name, tensor] : model.params) {
    grad_sum.emplace(name, Tensor::zeros_like(tensor));
  }

  StepMetrics metrics;
  metrics.step = step;
  int64_t masked_hits = 0, masked_total = 0;
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  for (size_t idx = 0; idx < batch.size(); ++idx) {
    const TrainItem& item = batch[idx];
    const int64_t t_cnn = cnn_output_length(static_cast<int64_t>(item.audio->samples.size()));
    const int64_t t_labels = static_cast<int64_t>(item.labels->size());
    if (std::llabs(t_cnn - t_labels) > 2) {
      throw ConfigError("train_step: label/feature alignment gap exceeds 2 frames for " +
                        item.audio->utterance_id);
    }
    const int64_t t_use = std::min(t_cnn, t_labels);

    MaskSpec item_spec = mask_spec;
    item_spec.seed = derive_seed(mask_spec.seed, "mask",
                                 static_cast<uint64_t>(step) * 100003 + idx);
    const std::vector<uint8_t> mask = mask_spans(t_cnn, item_spec);

    EncoderTrace trace;
    const ForwardResult fwd = forward(model, *item.audio, &mask, &trace);

    // Loss over the aligned prefix; rows past it get zero gradient.
    std::vector<uint32_t> labels(item.labels->begin(), item.labels->begin() + t_use);
    std::vector<uint8_t> mask_use(mask.begin(), mask.begin() + t_use);
    Tensor logits_use({t_use, fwd.logits.dim(1)});
    std::copy(fwd.logits.data(), fwd.logits.data() + t_use * fwd.logits.dim(1),
              logits_use.data());
    Tensor d_logits_use;
    const LossBreakdown loss = masked_pred_loss(logits_use, labels, mask_use, weights.masked,
                                                weights.unmasked, &d_logits_use);

    Tensor d_logits = Tensor::zeros_like(fwd.logits);
    std::copy(d_logits_use.data(), d_logits_use.data() + t_use * fwd.logits.dim(1),
              d_logits.data());

    const TensorMap grads = backward(model, trace, d_logits);
    for (auto& [name, g] : grad_sum) g.axpy(inv_batch, grads.at(name));

    metrics.loss_total += loss.total * inv_batch;
    metrics.loss_masked += loss.masked_ce * inv_batch;
    metrics.loss_unmasked += loss.unmasked_ce * inv_batch;
    masked_hits += static_cast<int64_t>(std::llround(loss.masked_acc * loss.masked_count));
    masked_total += loss.masked_count;
  }

  metrics.masked_acc = masked_total ? static_cast<double>(masked_hits) / masked_total : 0.0;
  adam_step(model, grad_sum, state, adam);
  metrics.lr = schedule_lr(adam, step);
  return metrics;
}

}  // namespace skd

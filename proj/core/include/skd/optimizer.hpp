#pragma once

#include <cstdint>
#include <vector>

#include "skd/encoder.hpp"

namespace skd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double base_lr = 1e-3;
  int64_t warmup_steps = 50;
};

/// Linear warmup to base_lr, then inverse-sqrt decay. step is 1-indexed.
double schedule_lr(const AdamConfig& config, int64_t step);

struct AdamState {
  int64_t step = 0;  // completed updates
  TensorMap m;
  TensorMap v;
};

void adam_init(AdamState& state, const TensorMap& params);
inline void adam_init(AdamState& state, const Model& model) { adam_init(state, model.params); }

/// One bias-corrected Adam update; increments state.step.
void adam_step(TensorMap& params, const TensorMap& grads, AdamState& state,
               const AdamConfig& config);
inline void adam_step(Model& model, const TensorMap& grads, AdamState& state,
                      const AdamConfig& config) {
  adam_step(model.params, grads, state, config);
}

struct TrainItem {
  const AudioBuffer* audio = nullptr;
  const std::vector<uint32_t>* labels = nullptr;
};

struct StepMetrics {
  int64_t step = 0;
  double loss_total = 0.0;
  double loss_masked = 0.0;
  double loss_unmasked = 0.0;
  double masked_acc = 0.0;
  double lr = 0.0;
};

struct TrainLossWeights {
  double masked = 1.0;
  double unmasked = 0.1;
};

/// One optimizer step over a batch: per-utterance forward/backward with a
/// fresh span mask (seeded from mask_spec.seed, the step and the batch slot),
/// gradients averaged over the batch. Label sequences may differ from the
/// CNN output length by at most 2 frames; the longer side is trimmed.
StepMetrics train_step(Model& model, const std::vector<TrainItem>& batch,
                       const MaskSpec& mask_spec, const TrainLossWeights& weights,
                       AdamState& state, const AdamConfig& adam);

}  // namespace skd

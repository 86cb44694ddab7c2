#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "skd/encoder.hpp"
#include "skd/features.hpp"
#include "skd/optimizer.hpp"

namespace skd {

/// Frozen-encoder features: element-wise mean over the encoder's hidden
/// states (the projected CNN output counts as state 0 and can be excluded).
FeatureMatrix extract_features(const Model& encoder, const AudioBuffer& audio,
                               bool include_state0 = true);

/// alpha = softmax_t(score . seq_t); returns sum_t alpha_t * seq_t.
std::vector<double> self_attention_pool(const double* seq, int64_t t_count, int64_t dim,
                                        const double* score, std::vector<double>* alpha = nullptr);

struct ProbeConfig {
  enum class Task { kClassification, kCtc };
  Task task = Task::kClassification;
  int conv_layers = 3;
  int kernel = 5;
  double dropout = 0.4;
  int hidden = 80;
  int n_classes = 2;  // classification labels, or CTC vocabulary (blank appended)
  int input_dim = 0;  // encoder emb_dim, set when the probe is built
  bool ff_relu = true;
  int64_t batch = 4;
  int64_t steps = 10000;

  int output_dim() const {
    return task == Task::kCtc ? n_classes + 1 : n_classes;
  }
  void validate() const;
  nlohmann::json to_json() const;
  static ProbeConfig from_json(const nlohmann::json& j);
};

struct ProbeModel {
  ProbeConfig config;
  TensorMap params;
  uint64_t checksum() const { return tensor_map_checksum(params); }
};

ProbeModel build_probe(const ProbeConfig& config, uint64_t seed);

struct ProbeTrace {
  Tensor input;
  std::vector<Tensor> conv_pre;   // pre-ReLU
  std::vector<Tensor> conv_out;   // post ReLU (+dropout), input to the next layer
  std::vector<Tensor> drop_mask;  // multiplicative masks; empty rows in eval mode
  std::vector<double> alpha;      // pooling weights (classification)
  Tensor pooled;                  // [1, hidden]
  Tensor ff_pre;                  // [rows, hidden]
  Tensor logits;                  // [1, n_classes] or [T, n_classes+1]
};

/// Classification probes return one logit row; CTC probes return T rows of
/// n_classes+1 (blank last). Dropout fires only in train mode and is
/// deterministic in dropout_seed.
Tensor probe_forward(const ProbeModel& probe, const FeatureMatrix& features, bool train_mode,
                     uint64_t dropout_seed, ProbeTrace* trace = nullptr);

TensorMap probe_backward(const ProbeModel& probe, const ProbeTrace& trace,
                         const Tensor& d_logits);

// --- CTC / metrics -------------------------------------------------------

/// Negative log probability of the target under the standard CTC forward
/// algorithm in log space; blank index = V = logits.dim(1)-1. If d_logits is
/// given, it receives the exact gradient. Throws ConfigError when the target
/// cannot be aligned (T too short, incl. repeat constraints) or a label is
/// out of range.
double ctc_loss(const Tensor& logits, const std::vector<uint32_t>& target,
                Tensor* d_logits = nullptr);

/// Per-frame argmax, collapse repeats, drop blanks.
std::vector<uint32_t> greedy_decode(const Tensor& logits);

int64_t edit_distance(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b);

/// Levenshtein(ref, hyp) / |ref|; empty reference is an error.
double wer(const std::vector<uint32_t>& reference, const std::vector<uint32_t>& hypothesis);

// --- probe training ------------------------------------------------------

struct ProbeExample {
  FeatureMatrix features;
  int class_id = 0;
  std::vector<uint32_t> tokens;  // CTC targets
};

struct EvalRecord {
  std::string task;
  std::string metric;
  double value = 0.0;
  std::string split;
  int64_t n_items = 0;
  int64_t step = 0;

  nlohmann::json to_json() const;
};

EvalRecord evaluate_probe(const ProbeModel& probe, const std::vector<ProbeExample>& examples,
                          const std::string& split_name, int64_t step = 0);

struct ProbeTrainOptions {
  AdamConfig adam;
  int64_t eval_every = 200;
};

struct ProbeTrainResult {
  ProbeModel probe;
  std::vector<EvalRecord> records;
  std::vector<double> loss_curve;
};

/// Cross-entropy (or CTC) training of the probe head on pre-extracted
/// features; the encoder is not touched here by construction. Deterministic
/// in seed.
ProbeTrainResult train_probe(const ProbeConfig& config,
                             const std::vector<ProbeExample>& train,
                             const std::vector<ProbeExample>& dev,
                             const ProbeTrainOptions& options, uint64_t seed);

void save_probe(const std::filesystem::path& path, const ProbeModel& probe);
ProbeModel load_probe(const std::filesystem::path& path);

}  // namespace skd

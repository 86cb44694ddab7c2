#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "skd/audio.hpp"
#include "skd/tensor.hpp"

namespace skd {

enum class HeadKind { kCosine, kLinear };

/// Architecture hyperparameters. The 7-layer CNN front end (strides 5,2,2,2,
/// 2,2,2; kernels 10,3,3,3,3,2,2) is fixed: its x320 downsampling is what
/// keeps 50 Hz labels aligned with the transformer input.
struct EncoderConfig {
  static constexpr std::array<int, 7> kCnnStrides{5, 2, 2, 2, 2, 2, 2};
  static constexpr std::array<int, 7> kCnnKernels{10, 3, 3, 3, 3, 2, 2};

  int cnn_channels = 512;
  int depth = 24;       // transformer layers (l)
  int emb_dim = 1024;   // d_emb
  int ffn_dim = 4096;   // d_ffn
  int attn_heads = 16;  // h_attn
  int proj_dim = 768;   // d_p
  int n_labels = 1000;  // label-embedding rows (k)
  int pos_conv_kernel = 128;
  int pos_conv_groups = 16;
  HeadKind head = HeadKind::kCosine;
  double temperature = 0.1;  // cosine-head logit scale

  void validate() const;

  /// Named presets. "H-L", "H-S" and "H-ST" are the full-scale architecture
  /// rows; "tiny*" and "grad-tiny" are desk-scale shapes used by tests and
  /// the bundled configs.
  static EncoderConfig preset(const std::string& name);

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);

  bool operator==(const EncoderConfig&) const = default;
};

/// Parameter tensor names and shapes implied by a config, sorted by name.
std::vector<std::pair<std::string, std::vector<int64_t>>> parameter_shapes(
    const EncoderConfig& config);

/// Total parameter count without allocating tensors.
int64_t param_count(const EncoderConfig& config);

struct Model {
  EncoderConfig config;
  TensorMap params;

  int64_t n_params() const { return static_cast<int64_t>(total_numel(params)); }
  uint64_t checksum() const { return tensor_map_checksum(params); }
};

/// Random init: every weight tensor draws from U(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)); biases and layernorm offsets start at 0,
/// layernorm gains at 1. Deterministic given seed (per-tensor child streams).
Model build_model(const EncoderConfig& config, uint64_t seed);

/// Output length of the CNN stack for a raw-sample count, per-layer formula
/// L_out = floor((L_in - kernel) / stride) + 1. Returns 0 when the input is
/// shorter than the receptive field.
int64_t cnn_output_length(int64_t n_samples);
std::vector<int64_t> cnn_layer_lengths(int64_t n_samples);

struct MaskSpec {
  double mask_prob = 0.08;  // per-frame span-start probability
  int span_len = 10;
  uint64_t seed = 0;
};

/// Span mask: each frame starts a span with probability mask_prob; spans of
/// span_len frames are unioned and clipped at T.
std::vector<uint8_t> mask_spans(int64_t t_count, const MaskSpec& spec);

// Forward activations cached for the exact backward pass.
struct LayerNormCache {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

struct LayerTrace {
  Tensor ln1_out, q, k, v;
  Tensor attn_probs;  // [heads, T, T]
  Tensor ctx;         // [T, d] concatenated head contexts
  Tensor resid1;      // [T, d]
  Tensor ln2_out;
  Tensor ffn_pre;  // [T, ffn] pre-GELU
  LayerNormCache ln1, ln2;
};

struct EncoderTrace {
  Tensor audio_in;                // [N, 1]
  std::vector<Tensor> cnn_pre;    // pre-GELU per conv layer
  std::vector<Tensor> cnn_post;   // post-GELU per conv layer
  Tensor cnn_ln_out;              // [T, C]
  LayerNormCache cnn_ln;
  Tensor projected;               // [T, d] before mask substitution
  std::vector<uint8_t> mask;      // length T (empty means no masking)
  Tensor masked;                  // [T, d]
  Tensor pos_pre;                 // [T, d] positional conv pre-GELU
  std::vector<Tensor> hidden;     // hidden[0] = transformer input, then per layer
  std::vector<LayerTrace> layers;
  Tensor final_ln_out;            // [T, d]
  LayerNormCache final_ln;
  Tensor proj;                    // [T, d_p]
  Tensor logits;                  // [T, n_labels]
};

struct ForwardResult {
  Tensor logits;               // [T, n_labels]
  std::vector<Tensor> hidden;  // depth+1 states of [T, d]
};

/// CNN front end alone: audio -> [T, channels] post-GELU features.
Tensor cnn_forward(const Model& model, const AudioBuffer& audio);

/// Full forward. mask may be null (no masking, e.g. feature extraction).
/// When trace is non-null all intermediates are retained for backward().
/// Throws NumericError naming the first layer that produced a non-finite
/// value.
ForwardResult forward(const Model& model, const AudioBuffer& audio,
                      const std::vector<uint8_t>* mask = nullptr,
                      EncoderTrace* trace = nullptr);

struct LossBreakdown {
  double total = 0.0;
  double masked_ce = 0.0;    // mean CE over masked frames (0 when none)
  double unmasked_ce = 0.0;  // mean CE over unmasked frames (0 when none)
  int64_t masked_count = 0;
  int64_t unmasked_count = 0;
  double masked_acc = 0.0;  // argmax accuracy over masked frames
};

/// Weighted dual cross-entropy over masked and unmasked regions:
/// total = w_masked * mean CE(masked) + w_unmasked * mean CE(unmasked).
/// If d_logits is non-null it receives d(total)/d(logits).
LossBreakdown masked_pred_loss(const Tensor& logits, const std::vector<uint32_t>& labels,
                               const std::vector<uint8_t>& mask, double w_masked,
                               double w_unmasked, Tensor* d_logits = nullptr);

/// Exact reverse-mode gradients for every parameter, given the trace from a
/// forward() call and d(loss)/d(logits).
TensorMap backward(const Model& model, const EncoderTrace& trace, const Tensor& d_logits);

}  // namespace skd

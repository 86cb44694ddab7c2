#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "skd/audio.hpp"

namespace skd {

enum class FeatureKind { kMfcc, kHidden, kProjected };
std::string to_string(FeatureKind k);
FeatureKind feature_kind_from_string(const std::string& s);

/// T x D sequence of frame vectors with an explicit frame rate.
struct FeatureMatrix {
  std::vector<double> data;  // row-major T x D
  int64_t rows = 0;          // T (time)
  int64_t cols = 0;          // D (feature dim)
  double frame_rate = 0.0;   // frames per second
  std::string utterance_id;
  FeatureKind kind = FeatureKind::kMfcc;

  double& at(int64_t t, int64_t d) { return data[static_cast<size_t>(t * cols + d)]; }
  double at(int64_t t, int64_t d) const { return data[static_cast<size_t>(t * cols + d)]; }
  double* row(int64_t t) { return data.data() + t * cols; }
  const double* row(int64_t t) const { return data.data() + t * cols; }
};

/// Number of analysis frames for a signal of n samples: 1 + floor((n-win)/hop).
int64_t frame_count(int64_t n_samples, int win, int hop);

/// Hann-weighted frames, T x win. Throws ConfigError when the signal is
/// shorter than one window.
std::vector<std::vector<double>> frame(const AudioBuffer& audio, int win, int hop);

struct MfccConfig {
  int win = 400;   // 25 ms at 16 kHz
  int hop = 320;   // 20 ms; matches the encoder's x320 downsampling
  int n_mels = 26;
  int n_ceps = 13;
};

/// 39-dim MFCC: 13 cepstra (c0 replaced by log frame energy) plus delta and
/// delta-delta from a +-2 frame regression. frame_rate = sample_rate / hop.
FeatureMatrix mfcc39(const AudioBuffer& audio, const MfccConfig& cfg = {});

/// Regression deltas with edge replication over a +-window frame context.
/// Input and output are T x D row-major.
std::vector<double> delta(const std::vector<double>& features, int64_t rows, int64_t cols,
                          int window = 2);

// Feature shard file: JSON header {utterance_id, T, D, frame_rate, kind}
// followed by row-major little-endian f32.
void write_features(const std::filesystem::path& path, const FeatureMatrix& features);
FeatureMatrix read_features(const std::filesystem::path& path);

}  // namespace skd

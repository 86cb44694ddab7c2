#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace skd {

/// Mono PCM signal, amplitudes in [-1, 1].
struct AudioBuffer {
  std::vector<double> samples;
  int sample_rate = 16000;
  std::string utterance_id;

  double duration_s() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

/// Load a RIFF/WAVE file. Only 16-bit signed PCM mono is supported; samples
/// are rescaled to [-1, 1] by division by 32768.
AudioBuffer load_wav(const std::filesystem::path& path);

/// Write 16-bit PCM mono. Values are clamped to [-1, 1] and quantized with
/// round-half-away-from-zero, so load(write(load(x))) is bit-exact.
void write_wav(const std::filesystem::path& path, const AudioBuffer& audio);

/// Linear-interpolation resampling in time: output length = round(N / factor),
/// sample_rate unchanged. factor must lie in [0.5, 2.0]; 1.0 is the identity.
AudioBuffer speed_perturb(const AudioBuffer& audio, double factor);

/// One synthetic utterance: a stack of class-dependent harmonics plus a low
/// noise floor, deterministic in (seed). Class c gets fundamental
/// 180 + 90*c Hz with per-utterance detune and phase.
AudioBuffer synth_utterance(uint64_t seed, int class_id, double duration_s, int sample_rate = 16000);

}  // namespace skd

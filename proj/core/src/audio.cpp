#include "skd/audio.hpp"

#include <cmath>
#include <cstring>

#include "skd/errors.hpp"
#include "skd/io.hpp"
#include "skd/rng.hpp"

namespace skd {

namespace {

uint32_t read_u32le(const std::string& b, size_t off) {
  uint32_t v;
  std::memcpy(&v, b.data() + off, 4);
  return v;
}

uint16_t read_u16le(const std::string& b, size_t off) {
  uint16_t v;
  std::memcpy(&v, b.data() + off, 2);
  return v;
}

void put_u32le(std::string& b, uint32_t v) { b.append(reinterpret_cast<const char*>(&v), 4); }
void put_u16le(std::string& b, uint16_t v) { b.append(reinterpret_cast<const char*>(&v), 2); }

}  // namespace

AudioBuffer load_wav(const std::filesystem::path& path) {
  const std::string b = read_file(path);
  if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0) {
    throw ConfigError("not a RIFF/WAVE file: " + path.string());
  }

  // Walk chunks; require a PCM fmt chunk before data.
  size_t pos = 12;
  bool have_fmt = false;
  uint16_t channels = 0, bits = 0, format = 0;
  uint32_t rate = 0;
  AudioBuffer audio;
  audio.utterance_id = path.stem().string();

  while (pos + 8 <= b.size()) {
    const std::string id = b.substr(pos, 4);
    const uint32_t size = read_u32le(b, pos + 4);
    pos += 8;
    if (pos + size > b.size()) throw ConfigError("truncated WAV chunk: " + path.string());
    if (id == "fmt ") {
      if (size < 16) throw ConfigError("short fmt chunk: " + path.string());
      format = read_u16le(b, pos);
      channels = read_u16le(b, pos + 2);
      rate = read_u32le(b, pos + 4);
      bits = read_u16le(b, pos + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw ConfigError("data chunk before fmt: " + path.string());
      if (format != 1 || bits != 16) {
        throw ConfigError("unsupported WAV format (need 16-bit PCM): " + path.string());
      }
      if (channels != 1) {
        throw ConfigError("unsupported WAV channel count (need mono): " + path.string());
      }
      if (rate == 0) throw ConfigError("zero sample rate: " + path.string());
      const size_t n = size / 2;
      audio.sample_rate = static_cast<int>(rate);
      audio.samples.resize(n);
      for (size_t i = 0; i < n; ++i) {
        int16_t s;
        std::memcpy(&s, b.data() + pos + i * 2, 2);
        audio.samples[i] = static_cast<double>(s) / 32768.0;
      }
      return audio;
    }
    pos += size + (size & 1);  // chunks are word-aligned
  }
  throw ConfigError("no data chunk: " + path.string());
}

void write_wav(const std::filesystem::path& path, const AudioBuffer& audio) {
  if (audio.sample_rate <= 0) throw ConfigError("write_wav: sample_rate must be positive");
  const uint32_t n = static_cast<uint32_t>(audio.samples.size());
  const uint32_t data_bytes = n * 2;

  std::string b;
  b.reserve(44 + data_bytes);
  b += "RIFF";
  put_u32le(b, 36 + data_bytes);
  b += "WAVE";
  b += "fmt ";
  put_u32le(b, 16);
  put_u16le(b, 1);  // PCM
  put_u16le(b, 1);  // mono
  put_u32le(b, static_cast<uint32_t>(audio.sample_rate));
  put_u32le(b, static_cast<uint32_t>(audio.sample_rate) * 2);  // byte rate
  put_u16le(b, 2);                                             // block align
  put_u16le(b, 16);                                            // bits
  b += "data";
  put_u32le(b, data_bytes);
  for (double v : audio.samples) {
    double scaled = std::round(v * 32768.0);
    if (scaled > 32767.0) scaled = 32767.0;
    if (scaled < -32768.0) scaled = -32768.0;
    const int16_t s = static_cast<int16_t>(scaled);
    b.append(reinterpret_cast<const char*>(&s), 2);
  }
  write_file_atomic(path, b);
}

AudioBuffer speed_perturb(const AudioBuffer& audio, double factor) {
  if (!(factor >= 0.5 && factor <= 2.0)) {
    throw ConfigError("speed_perturb: factor must lie in [0.5, 2.0]");
  }
  const size_t n = audio.samples.size();
  AudioBuffer out;
  out.sample_rate = audio.sample_rate;
  out.utterance_id = audio.utterance_id;
  if (n == 0) return out;

  const size_t m = static_cast<size_t>(std::llround(static_cast<double>(n) / factor));
  out.samples.resize(m);
  for (size_t i = 0; i < m; ++i) {
    const double pos = static_cast<double>(i) * factor;
    const size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= n) {
      out.samples[i] = audio.samples[n - 1];
      continue;
    }
    const double frac = pos - static_cast<double>(lo);
    out.samples[i] = audio.samples[lo] * (1.0 - frac) + audio.samples[lo + 1] * frac;
  }
  return out;
}

AudioBuffer synth_utterance(uint64_t seed, int class_id, double duration_s, int sample_rate) {
  if (duration_s <= 0.0) throw ConfigError("synth_utterance: duration must be positive");
  if (class_id < 0) throw ConfigError("synth_utterance: class_id must be nonnegative");

  Rng rng(seed);
  const size_t n = static_cast<size_t>(std::llround(duration_s * sample_rate));

  // Harmonic stack: class-dependent fundamental, four partials with a fixed
  // 1/k amplitude rolloff, small per-utterance detune so utterances within a
  // class are not identical.
  const double f0 = (180.0 + 90.0 * class_id) * rng.uniform(0.98, 1.02);
  const double partial_amp[4] = {1.0, 0.5, 1.0 / 3.0, 0.25};
  double phase[4];
  for (auto& p : phase) p = rng.uniform(0.0, 2.0 * M_PI);

  const double tone_gain = 0.25;
  const double noise_gain = 0.005;

  AudioBuffer audio;
  audio.sample_rate = sample_rate;
  audio.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sample_rate;
    double v = 0.0;
    for (int h = 0; h < 4; ++h) {
      v += partial_amp[h] * std::sin(2.0 * M_PI * f0 * (h + 1) * t + phase[h]);
    }
    v = tone_gain * v + noise_gain * rng.uniform(-1.0, 1.0);
    if (v > 1.0) v = 1.0;
    if (v < -1.0) v = -1.0;
    audio.samples[i] = v;
  }
  return audio;
}

}  // namespace skd

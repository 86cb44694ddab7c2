#include "skd/features.hpp"

#include <cmath>
#include <complex>

#include "skd/errors.hpp"
#include "skd/io.hpp"

namespace skd {

namespace {

constexpr double kLogFloor = 1e-10;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Iterative radix-2 FFT, in place.
void fft(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

size_t next_pow2(size_t n) {
  size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Triangular mel filterbank over FFT bins 0..nfft/2.
std::vector<std::vector<double>> mel_filterbank(int n_mels, int nfft, int sample_rate) {
  const int n_bins = nfft / 2 + 1;
  const double mel_lo = hz_to_mel(0.0);
  const double mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));
  }
  std::vector<std::vector<double>> bank(n_mels, std::vector<double>(n_bins, 0.0));
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / nfft;
      if (f > lo && f < mid) {
        bank[m][k] = (f - lo) / (mid - lo);
      } else if (f >= mid && f < hi) {
        bank[m][k] = (hi - f) / (hi - mid);
      }
    }
  }
  return bank;
}

}  // namespace

std::string to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::kMfcc: return "mfcc";
    case FeatureKind::kHidden: return "hidden";
    case FeatureKind::kProjected: return "projected";
  }
  throw ConfigError("bad feature kind");
}

FeatureKind feature_kind_from_string(const std::string& s) {
  if (s == "mfcc") return FeatureKind::kMfcc;
  if (s == "hidden") return FeatureKind::kHidden;
  if (s == "projected") return FeatureKind::kProjected;
  throw ConfigError("unknown feature kind: " + s);
}

int64_t frame_count(int64_t n_samples, int win, int hop) {
  if (n_samples < win) return 0;
  return 1 + (n_samples - win) / hop;
}

std::vector<std::vector<double>> frame(const AudioBuffer& audio, int win, int hop) {
  const int64_t n = static_cast<int64_t>(audio.samples.size());
  if (win <= 0 || hop <= 0) throw ConfigError("frame: win and hop must be positive");
  if (n < win) throw ConfigError("frame: signal shorter than one window");

  // Periodic Hann window.
  std::vector<double> hann(win);
  for (int i = 0; i < win; ++i) {
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / win);
  }

  const int64_t t_count = frame_count(n, win, hop);
  std::vector<std::vector<double>> windows(t_count, std::vector<double>(win));
  for (int64_t t = 0; t < t_count; ++t) {
    const int64_t start = t * hop;
    for (int i = 0; i < win; ++i) {
      windows[t][i] = audio.samples[start + i] * hann[i];
    }
  }
  return windows;
}

std::vector<double> delta(const std::vector<double>& features, int64_t rows, int64_t cols,
                          int window) {
  if (rows < 1 || cols < 1) throw ConfigError("delta: empty input");
  double denom = 0.0;
  for (int n = 1; n <= window; ++n) denom += 2.0 * n * n;

  std::vector<double> out(features.size(), 0.0);
  auto clamp = [rows](int64_t t) { return t < 0 ? 0 : (t >= rows ? rows - 1 : t); };
  for (int64_t t = 0; t < rows; ++t) {
    for (int64_t d = 0; d < cols; ++d) {
      double acc = 0.0;
      for (int n = 1; n <= window; ++n) {
        acc += n * (features[clamp(t + n) * cols + d] - features[clamp(t - n) * cols + d]);
      }
      out[t * cols + d] = acc / denom;
    }
  }
  return out;
}

FeatureMatrix mfcc39(const AudioBuffer& audio, const MfccConfig& cfg) {
  if (audio.samples.empty()) throw ConfigError("mfcc39: empty audio");
  if (audio.sample_rate != 16000) throw ConfigError("mfcc39: expects 16 kHz input");

  const auto windows = frame(audio, cfg.win, cfg.hop);
  const int64_t t_count = static_cast<int64_t>(windows.size());
  const size_t nfft = next_pow2(static_cast<size_t>(cfg.win));
  const int n_bins = static_cast<int>(nfft / 2 + 1);
  const auto bank = mel_filterbank(cfg.n_mels, static_cast<int>(nfft), audio.sample_rate);

  // Orthonormal DCT-II, n_ceps x n_mels.
  std::vector<double> dct(static_cast<size_t>(cfg.n_ceps) * cfg.n_mels);
  for (int j = 0; j < cfg.n_ceps; ++j) {
    const double scale = std::sqrt((j == 0 ? 1.0 : 2.0) / cfg.n_mels);
    for (int i = 0; i < cfg.n_mels; ++i) {
      dct[j * cfg.n_mels + i] = scale * std::cos(M_PI / cfg.n_mels * (i + 0.5) * j);
    }
  }

  std::vector<double> ceps(static_cast<size_t>(t_count) * cfg.n_ceps);
  std::vector<std::complex<double>> buf(nfft);
  std::vector<double> power(n_bins), logmel(cfg.n_mels);
  for (int64_t t = 0; t < t_count; ++t) {
    double energy = 0.0;
    for (int i = 0; i < cfg.win; ++i) energy += windows[t][i] * windows[t][i];

    for (size_t i = 0; i < nfft; ++i) {
      buf[i] = {i < static_cast<size_t>(cfg.win) ? windows[t][i] : 0.0, 0.0};
    }
    fft(buf);
    for (int k = 0; k < n_bins; ++k) power[k] = std::norm(buf[k]);

    for (int m = 0; m < cfg.n_mels; ++m) {
      double e = 0.0;
      for (int k = 0; k < n_bins; ++k) e += bank[m][k] * power[k];
      logmel[m] = std::log(std::max(e, kLogFloor));
    }
    for (int j = 0; j < cfg.n_ceps; ++j) {
      double acc = 0.0;
      for (int m = 0; m < cfg.n_mels; ++m) acc += dct[j * cfg.n_mels + m] * logmel[m];
      ceps[t * cfg.n_ceps + j] = acc;
    }
    // c0 carries the frame log energy instead of the DCT DC term.
    ceps[t * cfg.n_ceps] = std::log(std::max(energy, kLogFloor));
  }

  const auto d1 = delta(ceps, t_count, cfg.n_ceps, 2);
  const auto d2 = delta(d1, t_count, cfg.n_ceps, 2);

  FeatureMatrix features;
  features.rows = t_count;
  features.cols = 3 * cfg.n_ceps;
  features.frame_rate = static_cast<double>(audio.sample_rate) / cfg.hop;
  features.utterance_id = audio.utterance_id;
  features.kind = FeatureKind::kMfcc;
  features.data.resize(static_cast<size_t>(t_count) * features.cols);
  for (int64_t t = 0; t < t_count; ++t) {
    for (int j = 0; j < cfg.n_ceps; ++j) {
      features.at(t, j) = ceps[t * cfg.n_ceps + j];
      features.at(t, cfg.n_ceps + j) = d1[t * cfg.n_ceps + j];
      features.at(t, 2 * cfg.n_ceps + j) = d2[t * cfg.n_ceps + j];
    }
  }
  return features;
}

void write_features(const std::filesystem::path& path, const FeatureMatrix& features) {
  nlohmann::json header;
  header["utterance_id"] = features.utterance_id;
  header["T"] = features.rows;
  header["D"] = features.cols;
  header["frame_rate"] = features.frame_rate;
  header["kind"] = to_string(features.kind);
  write_header_payload(path, header, pack_f32(features.data));
}

FeatureMatrix read_features(const std::filesystem::path& path) {
  const auto hp = read_header_payload(path);
  FeatureMatrix features;
  features.utterance_id = hp.header.at("utterance_id").get<std::string>();
  features.rows = hp.header.at("T").get<int64_t>();
  features.cols = hp.header.at("D").get<int64_t>();
  features.frame_rate = hp.header.at("frame_rate").get<double>();
  features.kind = feature_kind_from_string(hp.header.at("kind").get<std::string>());
  features.data =
      unpack_f32(hp.payload, 0, static_cast<size_t>(features.rows) * features.cols);
  return features;
}

}  // namespace skd

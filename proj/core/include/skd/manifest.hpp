#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "skd/audio.hpp"

namespace skd {

enum class Split { kPretrain, kClusterFit, kProbeTrain, kProbeDev, kProbeTest };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

/// One corpus entry. Synthetic entries carry a generator seed; materialized
/// entries carry a path (relative to the manifest directory). Both may be set.
struct ManifestEntry {
  std::string id;
  std::optional<std::string> path;
  std::optional<uint64_t> seed;
  double duration_s = 0.0;
  Split split = Split::kPretrain;
  int class_id = 0;
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> in_split(Split s) const;
  const ManifestEntry& find(const std::string& id) const;
  /// Uniqueness of ids; throws ConfigError on violation.
  void validate() const;
};

struct SplitFractions {
  double pretrain = 0.55;
  double cluster_fit = 0.15;
  double probe_train = 0.15;
  double probe_dev = 0.075;
  double probe_test = 0.075;
};

/// Deterministic synthetic corpus: n_utts utterances of fixed duration,
/// classes assigned round-robin, split sizes by largest-remainder rounding of
/// the fractions. Returned buffers are index-aligned with manifest entries.
struct SynthCorpus {
  CorpusManifest manifest;
  std::vector<AudioBuffer> buffers;
};
SynthCorpus synth_corpus(uint64_t seed, int n_utts, double duration_s, int n_classes,
                         const SplitFractions& fractions = {});

/// Load audio for an entry: prefers the materialized path, falls back to the
/// generator seed.
AudioBuffer load_entry_audio(const ManifestEntry& entry, const std::filesystem::path& base_dir);

CorpusManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const CorpusManifest& manifest);

}  // namespace skd

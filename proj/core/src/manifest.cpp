#include "skd/manifest.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "skd/errors.hpp"
#include "skd/io.hpp"
#include "skd/rng.hpp"

namespace skd {

std::string to_string(Split s) {
  switch (s) {
    case Split::kPretrain: return "pretrain";
    case Split::kClusterFit: return "cluster-fit";
    case Split::kProbeTrain: return "probe-train";
    case Split::kProbeDev: return "probe-dev";
    case Split::kProbeTest: return "probe-test";
  }
  throw ConfigError("bad split enum");
}

Split split_from_string(const std::string& s) {
  if (s == "pretrain") return Split::kPretrain;
  if (s == "cluster-fit") return Split::kClusterFit;
  if (s == "probe-train") return Split::kProbeTrain;
  if (s == "probe-dev") return Split::kProbeDev;
  if (s == "probe-test") return Split::kProbeTest;
  throw ConfigError("unknown split tag: " + s);
}

std::vector<const ManifestEntry*> CorpusManifest::in_split(Split s) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == s) out.push_back(&e);
  }
  return out;
}

const ManifestEntry& CorpusManifest::find(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.id == id) return e;
  }
  throw DependencyError("utterance not in manifest: " + id);
}

void CorpusManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (!ids.insert(e.id).second) {
      throw ConfigError("duplicate utterance id in manifest: " + e.id);
    }
    if (e.duration_s <= 0.0) throw ConfigError("nonpositive duration for " + e.id);
    if (!e.path && !e.seed) throw ConfigError("entry has neither path nor seed: " + e.id);
  }
}

SynthCorpus synth_corpus(uint64_t seed, int n_utts, double duration_s, int n_classes,
                         const SplitFractions& fractions) {
  if (n_utts < 1) throw ConfigError("synth_corpus: n_utts must be >= 1");
  if (duration_s <= 0.0) throw ConfigError("synth_corpus: duration must be positive");
  if (n_classes < 1) throw ConfigError("synth_corpus: n_classes must be >= 1");

  // Split sizes by largest remainder so counts sum to n_utts exactly.
  const double fr[5] = {fractions.pretrain, fractions.cluster_fit, fractions.probe_train,
                        fractions.probe_dev, fractions.probe_test};
  const Split split_order[5] = {Split::kPretrain, Split::kClusterFit, Split::kProbeTrain,
                                Split::kProbeDev, Split::kProbeTest};
  double fsum = 0.0;
  for (double f : fr) {
    if (f < 0.0) throw ConfigError("synth_corpus: negative split fraction");
    fsum += f;
  }
  if (fsum <= 0.0) throw ConfigError("synth_corpus: split fractions sum to zero");

  int counts[5];
  double rema[5];
  int assigned = 0;
  for (int i = 0; i < 5; ++i) {
    const double exact = n_utts * fr[i] / fsum;
    counts[i] = static_cast<int>(std::floor(exact));
    rema[i] = exact - counts[i];
    assigned += counts[i];
  }
  while (assigned < n_utts) {
    int best = 0;
    for (int i = 1; i < 5; ++i) {
      if (rema[i] > rema[best]) best = i;
    }
    counts[best] += 1;
    rema[best] = -1.0;
    assigned += 1;
  }

  Rng rng(seed);
  SynthCorpus corpus;
  int split_idx = 0;
  int left_in_split = counts[0];
  for (int u = 0; u < n_utts; ++u) {
    while (left_in_split == 0 && split_idx < 4) {
      ++split_idx;
      left_in_split = counts[split_idx];
    }
    ManifestEntry e;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "utt%04d", u);
    e.id = idbuf;
    e.class_id = u % n_classes;
    e.duration_s = duration_s;
    e.split = split_order[split_idx];
    e.seed = rng.child(static_cast<uint64_t>(u)).next_u64();
    corpus.buffers.push_back(synth_utterance(*e.seed, e.class_id, duration_s));
    corpus.buffers.back().utterance_id = e.id;
    corpus.manifest.entries.push_back(std::move(e));
    if (left_in_split > 0) --left_in_split;
  }
  corpus.manifest.validate();
  return corpus;
}

AudioBuffer load_entry_audio(const ManifestEntry& entry, const std::filesystem::path& base_dir) {
  if (entry.path) {
    AudioBuffer audio = load_wav(base_dir / *entry.path);
    audio.utterance_id = entry.id;
    return audio;
  }
  if (entry.seed) {
    AudioBuffer audio = synth_utterance(*entry.seed, entry.class_id, entry.duration_s);
    audio.utterance_id = entry.id;
    return audio;
  }
  throw DependencyError("entry has neither path nor seed: " + entry.id);
}

CorpusManifest read_manifest(const std::filesystem::path& path) {
  CorpusManifest manifest;
  for (const auto& row : read_jsonl(path)) {
    ManifestEntry e;
    e.id = row.at("id").get<std::string>();
    if (row.contains("path")) e.path = row.at("path").get<std::string>();
    if (row.contains("seed")) e.seed = row.at("seed").get<uint64_t>();
    e.duration_s = row.at("duration_s").get<double>();
    e.split = split_from_string(row.at("split").get<std::string>());
    e.class_id = row.value("class", 0);
    manifest.entries.push_back(std::move(e));
  }
  manifest.validate();
  return manifest;
}

void write_manifest(const std::filesystem::path& path, const CorpusManifest& manifest) {
  std::vector<nlohmann::json> rows;
  for (const auto& e : manifest.entries) {
    nlohmann::json row;
    row["id"] = e.id;
    if (e.path) row["path"] = *e.path;
    if (e.seed) row["seed"] = *e.seed;
    row["duration_s"] = e.duration_s;
    row["split"] = to_string(e.split);
    row["class"] = e.class_id;
    rows.push_back(std::move(row));
  }
  write_jsonl(path, rows);
}

}  // namespace skd

#include "skd/augment.hpp"

#include "skd/errors.hpp"
#include "skd/rng.hpp"

namespace skd {

FeatureMatrix spec_augment(const FeatureMatrix& features, const SpecAugmentPolicy& policy,
                           uint64_t seed) {
  const int64_t t_count = features.rows;
  const int64_t dims = features.cols;
  if (policy.max_t > t_count) throw ConfigError("spec_augment: max_t exceeds frame count");
  if (policy.max_f > dims) throw ConfigError("spec_augment: max_f exceeds feature dim");
  if (policy.n_time_masks < 0 || policy.n_freq_masks < 0) {
    throw ConfigError("spec_augment: negative mask count");
  }

  FeatureMatrix out = features;
  if (out.data.empty()) return out;

  double mean = 0.0;
  for (double v : features.data) mean += v;
  mean /= static_cast<double>(features.data.size());

  Rng rng(seed);
  for (int m = 0; m < policy.n_time_masks; ++m) {
    const int64_t w = static_cast<int64_t>(rng.below(static_cast<uint64_t>(policy.max_t) + 1));
    const int64_t start = static_cast<int64_t>(rng.below(static_cast<uint64_t>(t_count - w) + 1));
    for (int64_t t = start; t < start + w; ++t) {
      for (int64_t d = 0; d < dims; ++d) out.at(t, d) = mean;
    }
  }
  for (int m = 0; m < policy.n_freq_masks; ++m) {
    const int64_t w = static_cast<int64_t>(rng.below(static_cast<uint64_t>(policy.max_f) + 1));
    const int64_t start = static_cast<int64_t>(rng.below(static_cast<uint64_t>(dims - w) + 1));
    for (int64_t t = 0; t < t_count; ++t) {
      for (int64_t d = start; d < start + w; ++d) out.at(t, d) = mean;
    }
  }
  return out;
}

}  // namespace skd

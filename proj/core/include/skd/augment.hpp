#pragma once

#include <cstdint>

#include "skd/features.hpp"

namespace skd {

struct SpecAugmentPolicy {
  int n_time_masks = 0;
  int max_t = 0;  // max time-mask width, frames
  int n_freq_masks = 0;
  int max_f = 0;  // max frequency-mask width, feature dims
};

/// SpecAugment-style masking: masked time/frequency bands are filled with the
/// scalar mean of the input matrix; everything else is copied bit-exactly.
/// Deterministic given the seed. Mask widths are drawn uniformly in
/// [0, max] and starts uniformly over valid positions.
FeatureMatrix spec_augment(const FeatureMatrix& features, const SpecAugmentPolicy& policy,
                           uint64_t seed);

}  // namespace skd

#pragma once

#include <cstdint>

#include "percgan/refnet.hpp"

namespace percgan {

/// Supervised stand-in for classification pretraining of a small chain
/// trunk: four-way shape recognition on procedural images.
struct TrunkFitConfig {
  std::int64_t steps = 1500;
  std::int64_t batch_size = 32;  // rounded down to a multiple of 4
  double lr = 1e-3;
  std::int64_t resolution = 32;
  std::uint64_t seed = 1;
};

struct TrunkFitResult {
  ReferenceNet net{nullptr};  // frozen, original (unmodified) layers
  double final_loss = 0.0;
  double holdout_accuracy = 0.0;
};

/// Trains `arch` with a global-average-pool + linear head and returns the
/// trunk alone. Images are fed in [-1, 1], so the trunk carries symmetric
/// normalization statistics.
TrunkFitResult fit_reference_trunk(const ArchDescriptor& arch, const TrunkFitConfig& cfg = {});

}  // namespace percgan

#pragma once

#include <vector>

#include "detgen/detectors.hpp"
#include "detgen/world.hpp"

namespace detgen {

struct RewardVector {
  double sem = 0.0;
  double feat = 0.0;
  double align = 0.0;

  double component(int k) const { return k == 0 ? sem : (k == 1 ? feat : align); }
};

struct FusionConfig {
  double weight_sem = 1.0;
  double weight_feat = 1.0;
  double weight_align = 1.0;
  double std_guard = 1e-8;

  double weight(int k) const {
    return k == 0 ? weight_sem : (k == 1 ? weight_feat : weight_align);
  }
};

struct AdvantageGroup {
  std::vector<RewardVector> rewards;
  std::vector<double> advantages;
  RewardVector mean;
  RewardVector stddev;  // population std, before the guard
};

RewardVector score_sample(const DetectorSuite& detectors, const Sample& s,
                          int user_class);

// Per-dimension z-score over the group (population std, guarded), summed
// across dimensions. Requires at least two group members.
AdvantageGroup fuse_advantages(const std::vector<RewardVector>& group,
                               const FusionConfig& cfg = {});

}  // namespace detgen

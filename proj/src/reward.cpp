#include "detgen/reward.hpp"

#include <cmath>

#include "detgen/common.hpp"

namespace detgen {

RewardVector score_sample(const DetectorSuite& detectors, const Sample& s,
                          int user_class) {
  RewardVector r;
  r.sem = semantic_reward(detectors.semantic, s);
  r.feat = feature_reward(detectors.feature, s);
  r.align = alignment_reward(detectors.alignment, s, user_class);
  return r;
}

AdvantageGroup fuse_advantages(const std::vector<RewardVector>& group,
                               const FusionConfig& cfg) {
  const std::size_t n = group.size();
  require(n >= 2, "fuse_advantages: group size must be >= 2");
  AdvantageGroup out;
  out.rewards = group;
  out.advantages.assign(n, 0.0);

  double means[3] = {0.0, 0.0, 0.0};
  double stds[3] = {0.0, 0.0, 0.0};
  for (int k = 0; k < 3; ++k) {
    for (const auto& r : group) means[k] += r.component(k);
    means[k] /= static_cast<double>(n);
    for (const auto& r : group) {
      const double d = r.component(k) - means[k];
      stds[k] += d * d;
    }
    stds[k] = std::sqrt(stds[k] / static_cast<double>(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    double a = 0.0;
    for (int k = 0; k < 3; ++k) {
      a += cfg.weight(k) * (group[i].component(k) - means[k]) / (stds[k] + cfg.std_guard);
    }
    require_finite(a, "fused advantage");
    out.advantages[i] = a;
  }
  out.mean = {means[0], means[1], means[2]};
  out.stddev = {stds[0], stds[1], stds[2]};
  return out;
}

}  // namespace detgen

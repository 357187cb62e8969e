#include "detgen/reward.hpp"

#include <algorithm>
#include <cmath>

#include <doctest.h>

#include "detgen/common.hpp"
#include "detgen/rng.hpp"

using namespace detgen;

namespace {

// independently coded mean/std/z-sum oracle
std::vector<double> oracle_advantages(const std::vector<RewardVector>& group,
                                      double guard = 1e-8) {
  const std::size_t n = group.size();
  std::vector<double> out(n, 0.0);
  for (int k = 0; k < 3; ++k) {
    std::vector<double> vals;
    for (const auto& r : group) vals.push_back(r.component(k));
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : vals) var += (v - mean) * (v - mean);
    const double stdev = std::sqrt(var / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) out[i] += (vals[i] - mean) / (stdev + guard);
  }
  return out;
}

std::vector<RewardVector> random_group(Rng& rng, std::size_t n) {
  std::vector<RewardVector> g;
  for (std::size_t i = 0; i < n; ++i) {
    g.push_back({rng.uniform01(), rng.uniform01(), rng.uniform01()});
  }
  return g;
}

}  // namespace

TEST_CASE("fuse: identical vectors give exactly zero advantages") {
  std::vector<RewardVector> group(5, RewardVector{0.4, 0.6, 0.1});
  const AdvantageGroup fused = fuse_advantages(group);
  for (double a : fused.advantages) CHECK(a == 0.0);
}

TEST_CASE("fuse: symmetric triple matches the closed-form z-scores") {
  std::vector<RewardVector> group = {{0.1, 0.5, 0.5}, {0.2, 0.5, 0.5}, {0.3, 0.5, 0.5}};
  const AdvantageGroup fused = fuse_advantages(group);
  CHECK(fused.advantages[0] == doctest::Approx(-1.2247).epsilon(1e-4));
  CHECK(fused.advantages[1] == doctest::Approx(0.0).scale(1.0).epsilon(1e-4));
  CHECK(std::abs(fused.advantages[1]) < 1e-4);
  CHECK(fused.advantages[2] == doctest::Approx(1.2247).epsilon(1e-4));
}

TEST_CASE("fuse: random batches match the brute-force oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 25; ++trial) {
    const auto group = random_group(rng, 2 + rng.below(10));
    const AdvantageGroup fused = fuse_advantages(group);
    const auto want = oracle_advantages(group);
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(fused.advantages[i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("fuse: advantages sum to zero within 1e-9") {
  Rng rng(32);
  for (int trial = 0; trial < 25; ++trial) {
    const auto group = random_group(rng, 8);
    const AdvantageGroup fused = fuse_advantages(group);
    double sum = 0.0;
    for (double a : fused.advantages) sum += a;
    CHECK(std::abs(sum) <= 1e-9);
  }
}

TEST_CASE("fuse: N < 2 rejected") {
  std::vector<RewardVector> one = {{0.5, 0.5, 0.5}};
  CHECK_THROWS_AS(fuse_advantages(one), ConfigError);
  CHECK_THROWS_AS(fuse_advantages({}), ConfigError);
}

TEST_CASE("fuse: invariant under positive affine rescaling of one dimension") {
  Rng rng(33);
  const auto group = random_group(rng, 8);
  const auto base = fuse_advantages(group).advantages;
  auto scaled = group;
  for (auto& r : scaled) r.feat = 3.7 * r.feat + 0.21;
  const auto after = fuse_advantages(scaled).advantages;
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(after[i] == doctest::Approx(base[i]).epsilon(1e-6));
  }
}

TEST_CASE("fuse: permutation equivariance") {
  Rng rng(34);
  auto group = random_group(rng, 6);
  const auto base = fuse_advantages(group).advantages;
  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  std::vector<RewardVector> permuted;
  for (std::size_t i : perm) permuted.push_back(group[i]);
  const auto after = fuse_advantages(permuted).advantages;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    CHECK(after[i] == doctest::Approx(base[perm[i]]).epsilon(1e-12));
  }
}

TEST_CASE("fuse: raising one sample's reward never lowers its advantage") {
  Rng rng(35);
  for (int trial = 0; trial < 40; ++trial) {
    auto group = random_group(rng, 5);
    const std::size_t i = rng.below(group.size());
    const double before = fuse_advantages(group).advantages[i];
    group[i].sem += 0.05;
    const double after = fuse_advantages(group).advantages[i];
    CHECK(after >= before - 1e-12);
  }
}

TEST_CASE("fuse: constant shift across the group changes nothing") {
  Rng rng(36);
  const auto group = random_group(rng, 8);
  const auto base = fuse_advantages(group).advantages;
  auto shifted = group;
  for (auto& r : shifted) {
    r.sem += 0.2;
    r.feat += 0.2;
    r.align += 0.2;
  }
  const auto after = fuse_advantages(shifted).advantages;
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(after[i] == doctest::Approx(base[i]).epsilon(1e-9));
  }
}

TEST_CASE("fuse: configurable weights scale each dimension's z-score") {
  std::vector<RewardVector> group = {{0.1, 0.9, 0.5}, {0.2, 0.8, 0.5}, {0.3, 0.7, 0.5}};
  FusionConfig cfg;
  cfg.weight_sem = 0.0;
  cfg.weight_feat = 0.0;
  cfg.weight_align = 1.0;
  const auto only_align = fuse_advantages(group, cfg).advantages;
  for (double a : only_align) CHECK(a == 0.0);  // align dimension is constant
}

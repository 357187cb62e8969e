#pragma once

#include <optional>
#include <string>
#include <vector>

#include "detgen/adam.hpp"
#include "detgen/detectors.hpp"
#include "detgen/flow.hpp"
#include "detgen/policy.hpp"
#include "detgen/reward.hpp"
#include "detgen/rng.hpp"

namespace detgen {

enum class AdvantageScope { kGroup, kBatch };

AdvantageScope advantage_scope_from_name(const std::string& name);
std::string advantage_scope_name(AdvantageScope s);

struct GrpoConfig {
  int group_size = 8;
  double clip_eps = 0.2;
  double kl_beta = 0.01;
  double stage1_lr = 1e-4;
  double stage2_lr = 3e-5;
  int stage1_groups = 32;
  int stage2_groups = 12;
  int total_steps = 230;
  int window_len = 5;
  double rewrite_fraction = 0.5;
  AdvantageScope advantage_scope = AdvantageScope::kGroup;
  int inner_epochs = 1;
  FusionConfig fusion;

  void validate() const;
};

// min(ratio * A, clamp(ratio, 1-eps, 1+eps) * A)
double clipped_surrogate(double ratio, double advantage, double eps);
// d(surrogate)/d(ratio); exactly 0 in the clip dead zone.
double clipped_surrogate_ratio_grad(double ratio, double advantage, double eps);

// Exact categorical KL(pi_theta || pi_ref) at one position of a recorded
// trajectory; 0 exactly at PAD-forced positions.
double kl_token(const PromptPolicy& cur, const PromptPolicy& ref,
                const PromptTrajectory& traj, int position);

// Closed-form Gaussian KL with the shared theta-independent sigma:
// ||mean_cur - mean_ref||^2 / (2 sigma^2).
double kl_step(const FlowModel& cur, const FlowModel& ref,
               const WindowStep& step, const PromptSeq& cond);

struct StepMetrics {
  int stage = 0;
  int step = 0;
  RewardVector mean_reward;
  double mean_advantage_abs = 0.0;
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
  double mean_ratio = 0.0;
  double loss = 0.0;
};

struct LossStats {
  double clip_fraction = 0.0;
  double mean_kl = 0.0;
  double mean_ratio = 0.0;
};

// ---------------- stage 1: prompt-policy optimization ----------------

struct Stage1Group {
  int user_class = 0;
  std::vector<PromptTrajectory> trajectories;
  std::vector<RewardVector> rewards;
  std::vector<double> advantages;
};

struct Stage1Batch {
  std::vector<Stage1Group> groups;
};

// Loss(theta) over a batch collected under theta_old (recorded inside the
// trajectories); accumulates parameter gradients when grads is non-null.
double stage1_loss(const PromptPolicy& theta, const PromptPolicy& reference,
                   const Stage1Batch& batch, const GrpoConfig& cfg,
                   PolicyGrads* grads, LossStats* stats);

class Stage1Trainer {
 public:
  Stage1Trainer(PromptPolicy policy, const FlowModel* generator,
                const DetectorSuite* detectors, const GrpoConfig& cfg);

  StepMetrics step(Rng& rng);

  Stage1Batch collect(const PromptPolicy& actor, Rng& rng) const;

  const PromptPolicy& policy() const { return policy_; }
  const PromptPolicy& reference() const { return reference_; }
  const GrpoConfig& config() const { return cfg_; }

 private:
  PromptPolicy policy_;     // theta
  PromptPolicy reference_;  // theta_ref, frozen for the stage
  const FlowModel* generator_;
  const DetectorSuite* detectors_;
  GrpoConfig cfg_;
  Adam opt_;
  int step_index_ = 0;
};

// ---------------- stage 2: generator optimization ----------------

struct Stage2Group {
  int user_class = 0;
  bool rewritten = false;
  PromptSeq condition;
  std::vector<TrajectoryRecord> trajectories;
  std::vector<RewardVector> rewards;
  std::vector<double> advantages;
};

struct Stage2Batch {
  std::vector<Stage2Group> groups;
};

double stage2_loss(const FlowModel& theta, const FlowModel& reference,
                   const Stage2Batch& batch, const GrpoConfig& cfg,
                   FlowGrads* grads, LossStats* stats);

class Stage2Trainer {
 public:
  // Rejects eta == 0 up front: step ratios would be undefined.
  Stage2Trainer(FlowModel generator, const PromptPolicy* frozen_policy,
                const DetectorSuite* detectors, const GrpoConfig& cfg);

  StepMetrics step(Rng& rng);

  Stage2Batch collect(const FlowModel& actor, Rng& rng) const;

  const FlowModel& generator() const { return generator_; }
  const FlowModel& reference() const { return reference_; }
  const GrpoConfig& config() const { return cfg_; }

 private:
  FlowModel generator_;  // theta
  FlowModel reference_;  // theta_ref, frozen for the stage
  const PromptPolicy* policy_;
  const DetectorSuite* detectors_;
  GrpoConfig cfg_;
  Adam opt_;
  int step_index_ = 0;
};

// Shared by both stages: per-group fusion, or one pooled normalization over
// the whole step when scope is kBatch.
void assign_advantages(std::vector<std::vector<RewardVector>> reward_groups,
                       AdvantageScope scope, const FusionConfig& fusion,
                       std::vector<std::vector<double>>* advantages_out);

}  // namespace detgen

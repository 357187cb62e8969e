#include "detgen/grpo.hpp"

#include <algorithm>
#include <cmath>

#include "detgen/common.hpp"

namespace detgen {

AdvantageScope advantage_scope_from_name(const std::string& name) {
  if (name == "group") return AdvantageScope::kGroup;
  if (name == "batch") return AdvantageScope::kBatch;
  throw ConfigError("advantage_scope must be 'group' or 'batch', got " + name);
}

std::string advantage_scope_name(AdvantageScope s) {
  return s == AdvantageScope::kGroup ? "group" : "batch";
}

void GrpoConfig::validate() const {
  require(group_size >= 2, "grpo: group_size must be >= 2");
  require(clip_eps > 0.0 && clip_eps < 1.0, "grpo: clip_eps must be in (0, 1)");
  require(kl_beta >= 0.0, "grpo: kl_beta must be >= 0");
  require(stage1_groups >= 1 && stage2_groups >= 1, "grpo: groups per step must be >= 1");
  require(total_steps >= 1, "grpo: total_steps must be >= 1");
  require(window_len >= 1, "grpo: window_len must be >= 1");
  require(rewrite_fraction >= 0.0 && rewrite_fraction <= 1.0,
          "grpo: rewrite_fraction must be in [0, 1]");
  require(inner_epochs >= 1, "grpo: inner_epochs must be >= 1");
}

double clipped_surrogate(double ratio, double advantage, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return std::min(ratio * advantage, clipped * advantage);
}

double clipped_surrogate_ratio_grad(double ratio, double advantage, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  const double unclipped_term = ratio * advantage;
  const double clipped_term = clipped * advantage;
  if (unclipped_term <= clipped_term) {
    return advantage;  // min picks the raw branch (ties included)
  }
  // min picks the clipped branch: zero gradient outside the clip range
  return (ratio > 1.0 - eps && ratio < 1.0 + eps) ? advantage : 0.0;
}

double kl_token(const PromptPolicy& cur, const PromptPolicy& ref,
                const PromptTrajectory& traj, int position) {
  require(position >= 1 && position < cur.prompt_len(), "kl_token: bad position");
  std::vector<int> prefix(traj.prompt.tokens.begin(),
                          traj.prompt.tokens.begin() + position);
  if (position_forced(cur.vocab, prefix)) return 0.0;
  const Tensor p = position_probs(cur, prefix, traj.prompt.user_class, position);
  const Tensor q = position_probs(ref, prefix, traj.prompt.user_class, position);
  double kl = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    if (p.data[v] > 0.0) kl += p.data[v] * (std::log(p.data[v]) - std::log(q.data[v]));
  }
  return kl;
}

double kl_step(const FlowModel& cur, const FlowModel& ref,
               const WindowStep& step, const PromptSeq& cond) {
  require(step.sigma > 0.0, "kl_step: sigma is zero");
  const Tensor cond_cur = cur.condition_vector(cond);
  const Tensor cond_ref = ref.condition_vector(cond);
  Tensor mean_cur = step.x_from;
  Tensor mean_ref = step.x_from;
  const Tensor v_cur = cur.velocity_at(step.x_from, step.t, cond_cur);
  const Tensor v_ref = ref.velocity_at(step.x_from, step.t, cond_ref);
  for (std::size_t j = 0; j < mean_cur.size(); ++j) {
    mean_cur.data[j] -= cur.step_size() * v_cur.data[j];
    mean_ref.data[j] -= ref.step_size() * v_ref.data[j];
  }
  return squared_distance(mean_cur, mean_ref) / (2.0 * step.sigma * step.sigma);
}

void assign_advantages(std::vector<std::vector<RewardVector>> reward_groups,
                       AdvantageScope scope, const FusionConfig& fusion,
                       std::vector<std::vector<double>>* advantages_out) {
  advantages_out->clear();
  if (scope == AdvantageScope::kGroup) {
    for (const auto& group : reward_groups) {
      advantages_out->push_back(fuse_advantages(group, fusion).advantages);
    }
    return;
  }
  std::vector<RewardVector> pooled;
  for (const auto& group : reward_groups)
    pooled.insert(pooled.end(), group.begin(), group.end());
  const AdvantageGroup fused = fuse_advantages(pooled, fusion);
  std::size_t cursor = 0;
  for (const auto& group : reward_groups) {
    advantages_out->emplace_back(fused.advantages.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 fused.advantages.begin() + static_cast<std::ptrdiff_t>(cursor + group.size()));
    cursor += group.size();
  }
}

// ---------------- stage 1 ----------------

double stage1_loss(const PromptPolicy& theta, const PromptPolicy& reference,
                   const Stage1Batch& batch, const GrpoConfig& cfg,
                   PolicyGrads* grads, LossStats* stats) {
  require(!batch.groups.empty(), "stage1_loss: empty batch");
  const int tmax = theta.prompt_len();
  const double t_norm = static_cast<double>(tmax - 1);
  const double group_norm = static_cast<double>(batch.groups.size());
  const double temp = theta.temperature;
  require(temp > 0.0, "stage1_loss: temperature must be positive");

  double loss = 0.0;
  double clip_hits = 0.0, kl_sum = 0.0, ratio_sum = 0.0;
  std::size_t terms = 0;

  for (const auto& group : batch.groups) {
    const double n_norm = static_cast<double>(group.trajectories.size());
    const double weight = 1.0 / (group_norm * n_norm * t_norm);
    for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
      const PromptTrajectory& traj = group.trajectories[i];
      const double adv = group.advantages[i];
      for (int pos = 1; pos < tmax; ++pos) {
        std::vector<int> prefix(traj.prompt.tokens.begin(),
                                traj.prompt.tokens.begin() + pos);
        ++terms;
        if (position_forced(theta.vocab, prefix)) {
          // ratio == 1 and KL == 0 at PAD-forced positions
          loss -= weight * adv;
          ratio_sum += 1.0;
          continue;
        }
        const Tensor p = position_probs(theta, prefix, traj.prompt.user_class, pos);
        const Tensor q = position_probs(reference, prefix, traj.prompt.user_class, pos);
        const int tok = traj.prompt.tokens[static_cast<std::size_t>(pos)];
        const double lp = std::log(p.data[static_cast<std::size_t>(tok)]);
        const double ratio = std::exp(lp - traj.logp_old[static_cast<std::size_t>(pos)]);
        const double surr = clipped_surrogate(ratio, adv, cfg.clip_eps);
        double kl = 0.0;
        for (std::size_t v = 0; v < p.size(); ++v) {
          if (p.data[v] > 0.0)
            kl += p.data[v] * (std::log(p.data[v]) - std::log(q.data[v]));
        }
        loss -= weight * (surr - cfg.kl_beta * kl);
        ratio_sum += ratio;
        kl_sum += kl;
        if (ratio < 1.0 - cfg.clip_eps || ratio > 1.0 + cfg.clip_eps) clip_hits += 1.0;

        if (grads != nullptr) {
          // d loss / d logits, combining the surrogate and KL pieces
          const double dsurr_dratio = clipped_surrogate_ratio_grad(ratio, adv, cfg.clip_eps);
          const double dloss_dlp = -weight * dsurr_dratio * ratio;
          Tensor logits_grad = Tensor::zeros(p.shape);
          for (std::size_t v = 0; v < p.size(); ++v) {
            const double indicator = static_cast<int>(v) == tok ? 1.0 : 0.0;
            double g = dloss_dlp * (indicator - p.data[v]) / temp;
            if (p.data[v] > 0.0) {
              const double log_ratio = std::log(p.data[v]) - std::log(q.data[v]);
              g += weight * cfg.kl_beta * p.data[v] * (log_ratio - kl) / temp;
            }
            logits_grad.data[v] = g;
          }
          position_logits_backward(theta, prefix, traj.prompt.user_class, pos,
                                   logits_grad, *grads);
        }
      }
    }
  }
  if (!std::isfinite(loss)) throw NumericError("stage1_loss: non-finite loss");
  if (stats != nullptr) {
    stats->clip_fraction = clip_hits / static_cast<double>(terms);
    stats->mean_kl = kl_sum / static_cast<double>(terms);
    stats->mean_ratio = ratio_sum / static_cast<double>(terms);
  }
  return loss;
}

Stage1Trainer::Stage1Trainer(PromptPolicy policy, const FlowModel* generator,
                             const DetectorSuite* detectors, const GrpoConfig& cfg)
    : policy_(std::move(policy)),
      reference_(policy_),
      generator_(generator),
      detectors_(detectors),
      cfg_(cfg),
      opt_({cfg.stage1_lr, 0.9, 0.999, 1e-8}) {
  cfg_.validate();
  require(generator_ != nullptr && detectors_ != nullptr,
          "stage1: generator and detectors are required");
}

Stage1Batch Stage1Trainer::collect(const PromptPolicy& actor, Rng& rng) const {
  Stage1Batch batch;
  std::vector<std::vector<RewardVector>> reward_groups;
  for (int g = 0; g < cfg_.stage1_groups; ++g) {
    Rng group_rng = rng.stream(static_cast<std::uint64_t>(g));
    Stage1Group group;
    group.user_class = static_cast<int>(
        group_rng.below(static_cast<std::uint64_t>(policy_.world.num_classes)));
    const PromptSeq user = user_prompt(policy_.world, policy_.vocab, group.user_class);
    Rng roll_rng = group_rng.named("rollout");
    group.trajectories = rollout(actor, reference_, user, cfg_.group_size, roll_rng);
    for (int i = 0; i < cfg_.group_size; ++i) {
      Rng gen_rng = group_rng.stream(1000 + static_cast<std::uint64_t>(i));
      const OdeResult ode = sample_ode(*generator_, group.trajectories[static_cast<std::size_t>(i)].prompt,
                                       gen_rng, "stage1");
      group.rewards.push_back(score_sample(*detectors_, ode.sample, group.user_class));
    }
    reward_groups.push_back(group.rewards);
    batch.groups.push_back(std::move(group));
  }
  std::vector<std::vector<double>> advantages;
  assign_advantages(std::move(reward_groups), cfg_.advantage_scope, cfg_.fusion, &advantages);
  for (std::size_t g = 0; g < batch.groups.size(); ++g) {
    batch.groups[g].advantages = std::move(advantages[g]);
  }
  return batch;
}

StepMetrics Stage1Trainer::step(Rng& rng) {
  const PromptPolicy theta_old = policy_;  // refresh at the top of every step
  Rng step_rng = rng.stream(static_cast<std::uint64_t>(step_index_));
  Stage1Batch batch = collect(theta_old, step_rng);

  StepMetrics metrics;
  metrics.stage = 1;
  metrics.step = step_index_;
  double adv_abs = 0.0;
  std::size_t count = 0;
  for (const auto& g : batch.groups) {
    for (std::size_t i = 0; i < g.rewards.size(); ++i) {
      metrics.mean_reward.sem += g.rewards[i].sem;
      metrics.mean_reward.feat += g.rewards[i].feat;
      metrics.mean_reward.align += g.rewards[i].align;
      adv_abs += std::abs(g.advantages[i]);
      ++count;
    }
  }
  metrics.mean_reward.sem /= static_cast<double>(count);
  metrics.mean_reward.feat /= static_cast<double>(count);
  metrics.mean_reward.align /= static_cast<double>(count);
  metrics.mean_advantage_abs = adv_abs / static_cast<double>(count);

  for (int e = 0; e < cfg_.inner_epochs; ++e) {
    PolicyGrads grads = PolicyGrads::zeros_like(policy_);
    LossStats stats;
    const double loss = stage1_loss(policy_, reference_, batch, cfg_, &grads, &stats);
    if (e == 0) {
      metrics.loss = loss;
      metrics.clip_fraction = stats.clip_fraction;
      metrics.mean_kl = stats.mean_kl;
      metrics.mean_ratio = stats.mean_ratio;
    }
    opt_.step(policy_param_refs(policy_, &grads));
  }
  ++step_index_;
  return metrics;
}

// ---------------- stage 2 ----------------

double stage2_loss(const FlowModel& theta, const FlowModel& reference,
                   const Stage2Batch& batch, const GrpoConfig& cfg,
                   FlowGrads* grads, LossStats* stats) {
  require(!batch.groups.empty(), "stage2_loss: empty batch");
  const double group_norm = static_cast<double>(batch.groups.size());
  const double dt = theta.step_size();

  double loss = 0.0;
  double clip_hits = 0.0, kl_sum = 0.0, ratio_sum = 0.0;
  std::size_t terms = 0;

  for (const auto& group : batch.groups) {
    const double n_norm = static_cast<double>(group.trajectories.size());
    const Tensor cond_ref = reference.condition_vector(group.condition);
    const Tensor cond_cur = theta.condition_vector(group.condition);
    for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
      const TrajectoryRecord& rec = group.trajectories[i];
      const double adv = group.advantages[i];
      const double weight = 1.0 / (group_norm * n_norm * static_cast<double>(rec.window.size()));
      for (const WindowStep& w : rec.window) {
        require(w.sigma > 0.0, "stage2_loss: sigma is zero inside the window");
        const double inv_var = 1.0 / (w.sigma * w.sigma);

        const Tensor v_cur = theta.velocity_at(w.x_from, w.t, cond_cur);
        Tensor mean_cur = w.x_from;
        for (std::size_t j = 0; j < mean_cur.size(); ++j)
          mean_cur.data[j] -= dt * v_cur.data[j];
        const double lp = gaussian_logdensity(w.x_to, mean_cur, w.sigma);
        const double ratio = std::exp(lp - w.logdensity_old);
        const double surr = clipped_surrogate(ratio, adv, cfg.clip_eps);

        const Tensor v_ref = reference.velocity_at(w.x_from, w.t, cond_ref);
        Tensor mean_ref = w.x_from;
        for (std::size_t j = 0; j < mean_ref.size(); ++j)
          mean_ref.data[j] -= dt * v_ref.data[j];
        const double kl = squared_distance(mean_cur, mean_ref) * 0.5 * inv_var;

        loss -= weight * (surr - cfg.kl_beta * kl);
        ratio_sum += ratio;
        kl_sum += kl;
        if (ratio < 1.0 - cfg.clip_eps || ratio > 1.0 + cfg.clip_eps) clip_hits += 1.0;
        ++terms;

        if (grads != nullptr) {
          const double dsurr_dratio = clipped_surrogate_ratio_grad(ratio, adv, cfg.clip_eps);
          const double dloss_dlp = -weight * dsurr_dratio * ratio;
          // combined gradient on mean_cur from the log-density and KL pieces
          Tensor upstream_v = Tensor::zeros(mean_cur.shape);
          for (std::size_t j = 0; j < mean_cur.size(); ++j) {
            const double dmean = dloss_dlp * (w.x_to.data[j] - mean_cur.data[j]) * inv_var +
                                 weight * cfg.kl_beta * (mean_cur.data[j] - mean_ref.data[j]) * inv_var;
            upstream_v.data[j] = -dt * dmean;
          }
          velocity_backward(theta, w.x_from, w.t, group.condition, upstream_v, *grads);
        }
      }
    }
  }
  if (!std::isfinite(loss)) throw NumericError("stage2_loss: non-finite loss");
  if (stats != nullptr) {
    stats->clip_fraction = clip_hits / static_cast<double>(terms);
    stats->mean_kl = kl_sum / static_cast<double>(terms);
    stats->mean_ratio = ratio_sum / static_cast<double>(terms);
  }
  return loss;
}

Stage2Trainer::Stage2Trainer(FlowModel generator, const PromptPolicy* frozen_policy,
                             const DetectorSuite* detectors, const GrpoConfig& cfg)
    : generator_(std::move(generator)),
      reference_(generator_),
      policy_(frozen_policy),
      detectors_(detectors),
      cfg_(cfg),
      opt_({cfg.stage2_lr, 0.9, 0.999, 1e-8}) {
  cfg_.validate();
  require(detectors_ != nullptr, "stage2: detectors are required");
  require(generator_.eta > 0.0,
          "stage2: eta must be positive (step ratios are undefined at eta = 0)");
  require(cfg_.window_len < generator_.t_steps,
          "stage2: window_len must be smaller than t_steps");
  require(cfg_.rewrite_fraction == 0.0 || policy_ != nullptr,
          "stage2: rewrite_fraction > 0 needs a frozen policy");
}

Stage2Batch Stage2Trainer::collect(const FlowModel& actor, Rng& rng) const {
  Stage2Batch batch;
  std::vector<std::vector<RewardVector>> reward_groups;
  for (int g = 0; g < cfg_.stage2_groups; ++g) {
    Rng group_rng = rng.stream(static_cast<std::uint64_t>(g));
    Stage2Group group;
    group.user_class = static_cast<int>(
        group_rng.below(static_cast<std::uint64_t>(generator_.world.num_classes)));
    const PromptSeq user = user_prompt(generator_.world, generator_.vocab, group.user_class);
    group.rewritten = group_rng.uniform01() < cfg_.rewrite_fraction;
    if (group.rewritten) {
      Rng rewrite_rng = group_rng.named("rewrite");
      group.condition = rollout(*policy_, *policy_, user, 1, rewrite_rng)[0].prompt;
    } else {
      group.condition = user;
    }
    const int window_start =
        cfg_.window_len +
        static_cast<int>(group_rng.below(static_cast<std::uint64_t>(
            generator_.t_steps - cfg_.window_len)));
    Rng window_rng = group_rng.named("window");
    group.trajectories = sample_sde_window(actor, group.condition, window_start,
                                           cfg_.window_len, cfg_.group_size,
                                           window_rng, "stage2");
    for (const auto& rec : group.trajectories) {
      group.rewards.push_back(score_sample(*detectors_, rec.final_sample, group.user_class));
    }
    reward_groups.push_back(group.rewards);
    batch.groups.push_back(std::move(group));
  }
  std::vector<std::vector<double>> advantages;
  assign_advantages(std::move(reward_groups), cfg_.advantage_scope, cfg_.fusion, &advantages);
  for (std::size_t g = 0; g < batch.groups.size(); ++g) {
    batch.groups[g].advantages = std::move(advantages[g]);
  }
  return batch;
}

StepMetrics Stage2Trainer::step(Rng& rng) {
  const FlowModel theta_old = generator_;
  Rng step_rng = rng.stream(static_cast<std::uint64_t>(step_index_));
  Stage2Batch batch = collect(theta_old, step_rng);

  StepMetrics metrics;
  metrics.stage = 2;
  metrics.step = step_index_;
  double adv_abs = 0.0;
  std::size_t count = 0;
  for (const auto& g : batch.groups) {
    for (std::size_t i = 0; i < g.rewards.size(); ++i) {
      metrics.mean_reward.sem += g.rewards[i].sem;
      metrics.mean_reward.feat += g.rewards[i].feat;
      metrics.mean_reward.align += g.rewards[i].align;
      adv_abs += std::abs(g.advantages[i]);
      ++count;
    }
  }
  metrics.mean_reward.sem /= static_cast<double>(count);
  metrics.mean_reward.feat /= static_cast<double>(count);
  metrics.mean_reward.align /= static_cast<double>(count);
  metrics.mean_advantage_abs = adv_abs / static_cast<double>(count);

  for (int e = 0; e < cfg_.inner_epochs; ++e) {
    FlowGrads grads = FlowGrads::zeros_like(generator_);
    LossStats stats;
    const double loss = stage2_loss(generator_, reference_, batch, cfg_, &grads, &stats);
    if (e == 0) {
      metrics.loss = loss;
      metrics.clip_fraction = stats.clip_fraction;
      metrics.mean_kl = stats.mean_kl;
      metrics.mean_ratio = stats.mean_ratio;
    }
    opt_.step(flow_param_refs(generator_, &grads));
  }
  ++step_index_;
  return metrics;
}

}  // namespace detgen

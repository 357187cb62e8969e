#include "detgen/grpo.hpp"

#include <cmath>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "detgen/common.hpp"
#include "detgen/manifest.hpp"
#include "detgen/metrics.hpp"
#include "detgen/rng.hpp"
#include "testutil.hpp"

using namespace detgen;
namespace tu = detgen::testutil;

namespace {

WorldSpec mini_world() {
  WorldSpec w;
  w.num_classes = 2;
  w.sub_modes = 1;
  w.style_tokens = 1;
  w.prompt_len = 4;
  w.validate();
  return w;
}

PromptPolicy mini_policy(const WorldSpec& w, std::uint64_t seed) {
  PolicyConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden = {12};
  const Vocabulary vocab(w);
  Rng rng(seed);
  return PromptPolicy::create(w, vocab, cfg, rng);
}

FlowModel mini_flow(const WorldSpec& w, std::uint64_t seed, double eta = 0.7) {
  FlowConfig cfg;
  cfg.t_steps = 4;
  cfg.eta = eta;
  cfg.hidden = {12};
  cfg.cond_dim = 4;
  const Vocabulary vocab(w);
  Rng rng(seed);
  return FlowModel::create(w, vocab, cfg, rng);
}

DetectorSuite mini_detectors(const WorldSpec& w, std::uint64_t seed) {
  const Vocabulary vocab(w);
  Rng data_rng(seed);
  const auto real = sample_real(w, vocab, 400, data_rng);
  auto fake = real;
  for (auto& s : fake) {
    s.x.data[0] += 1.0;
    s.origin = "generated:test";
  }
  DetectorTrainConfig cfg;
  cfg.steps = 200;
  cfg.batch = 32;
  cfg.anchor_count = 64;
  cfg.feature_hidden = 8;
  cfg.heldout_hidden = 12;
  cfg.alignment_hidden = 12;
  Rng train_rng(seed + 1);
  return train_detectors(real, fake, w, cfg, train_rng);
}

GrpoConfig mini_grpo() {
  GrpoConfig cfg;
  cfg.group_size = 2;
  cfg.stage1_groups = 2;
  cfg.stage2_groups = 2;
  cfg.window_len = 2;
  cfg.total_steps = 2;
  return cfg;
}

Stage1Batch handmade_stage1_batch(const PromptPolicy& actor, const PromptPolicy& ref,
                                  int groups, int n, Rng& rng) {
  Stage1Batch batch;
  for (int g = 0; g < groups; ++g) {
    Stage1Group group;
    group.user_class = g % actor.world.num_classes;
    const PromptSeq user = user_prompt(actor.world, actor.vocab, group.user_class);
    Rng roll = rng.stream(static_cast<std::uint64_t>(g));
    group.trajectories = rollout(actor, ref, user, n, roll);
    for (int i = 0; i < n; ++i) {
      group.rewards.push_back({0.5, 0.5, 0.5});
      group.advantages.push_back(i % 2 == 0 ? 0.8 : -0.8);
    }
    batch.groups.push_back(std::move(group));
  }
  return batch;
}

}  // namespace

TEST_CASE("clipped surrogate: table cases from the objective") {
  CHECK(clipped_surrogate(1.5, 1.0, 0.2) == 1.2);
  CHECK(clipped_surrogate(1.0, 0.37, 0.2) == 0.37);
  CHECK(clipped_surrogate(1.0, -2.5, 0.35) == -2.5);
  CHECK(clipped_surrogate(0.5, -1.0, 0.2) == -0.8);
}

TEST_CASE("clipped surrogate: dead-zone gradient is exactly zero") {
  // rho above 1+eps with positive advantage
  CHECK(clipped_surrogate_ratio_grad(1.5, 1.0, 0.2) == 0.0);
  // rho below 1-eps with negative advantage
  CHECK(clipped_surrogate_ratio_grad(0.5, -1.0, 0.2) == 0.0);
  // interior keeps the raw gradient
  CHECK(clipped_surrogate_ratio_grad(1.0, 0.7, 0.2) == 0.7);
  CHECK(clipped_surrogate_ratio_grad(1.1, -0.7, 0.2) == -0.7);
  // rho below 1-eps with positive advantage: raw branch is the min, grad = A
  CHECK(clipped_surrogate_ratio_grad(0.5, 1.0, 0.2) == 1.0);
}

TEST_CASE("kl_token: identical parameters give exactly zero") {
  const WorldSpec w = mini_world();
  const PromptPolicy p = mini_policy(w, 1);
  Rng rng(2);
  const auto trajs = rollout(p, p, user_prompt(w, p.vocab, 0), 1, rng);
  for (int pos = 1; pos < w.prompt_len; ++pos) {
    CHECK(kl_token(p, p, trajs[0], pos) == 0.0);
  }
}

TEST_CASE("kl_token: hand-computed two-category case") {
  // effective distributions (0.9, 0.1) vs (0.5, 0.5); other tokens get
  // exp(-1000) == 0 mass exactly
  WorldSpec w;
  w.num_classes = 1;
  w.sub_modes = 1;
  w.style_tokens = 1;
  w.prompt_len = 4;
  w.validate();
  PromptPolicy cur = mini_policy(w, 3);
  PromptPolicy ref = cur;
  for (auto& wt : cur.encoder.weights) wt.fill(0.0);
  for (auto& wt : ref.encoder.weights) wt.fill(0.0);
  cur.encoder.biases.back() =
      Tensor::vector({-1000.0, std::log(0.9), std::log(0.1), -1000.0});
  ref.encoder.biases.back() =
      Tensor::vector({-1000.0, std::log(0.5), std::log(0.5), -1000.0});

  PromptTrajectory traj;
  traj.prompt = user_prompt(w, cur.vocab, 0);
  traj.prompt.tokens[1] = cur.vocab.sub_token(0);
  traj.logp_old.assign(4, 0.0);
  traj.logp_ref.assign(4, 0.0);

  const double want = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  CHECK(want == doctest::Approx(0.3681).epsilon(1e-3));
  CHECK(kl_token(cur, ref, traj, 1) == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("kl_token: nonnegative over random parameter pairs") {
  const WorldSpec w = mini_world();
  Rng seed_rng(4);
  int evals = 0;
  for (int pair = 0; pair < 200; ++pair) {
    const PromptPolicy a = mini_policy(w, 100 + seed_rng.next_u64() % 100000);
    const PromptPolicy b = mini_policy(w, 200000 + seed_rng.next_u64() % 100000);
    Rng rng(5 + static_cast<std::uint64_t>(pair));
    const auto trajs =
        rollout(a, b, user_prompt(w, a.vocab, pair % w.num_classes), 1, rng);
    for (int rep = 0; rep < 50; ++rep) {
      for (int pos = 1; pos < w.prompt_len; ++pos) {
        CHECK(kl_token(a, b, trajs[0], pos) >= 0.0);
        ++evals;
      }
    }
  }
  CHECK(evals >= 10000);
}

TEST_CASE("kl_step: identical means 0; unit-gap closed form; MC agreement") {
  const WorldSpec w = mini_world();
  const FlowModel a = mini_flow(w, 6);
  const Vocabulary vocab(w);
  const PromptSeq cond = user_prompt(w, vocab, 0);

  WindowStep step;
  step.step = 2;
  step.t = 0.5;
  step.sigma = 1.0;
  step.x_from = Tensor::vector({0.3, -0.4});
  step.x_to = Tensor::vector({0.1, 0.0});
  CHECK(kl_step(a, a, step, cond) == 0.0);

  // zero-weight nets whose bias difference makes the means differ by (1, 0)
  FlowModel cur = a;
  FlowModel ref = a;
  for (auto& wt : cur.velocity.weights) wt.fill(0.0);
  for (auto& wt : ref.velocity.weights) wt.fill(0.0);
  for (auto& b : cur.velocity.biases) b.fill(0.0);
  for (auto& b : ref.velocity.biases) b.fill(0.0);
  ref.velocity.biases.back() =
      Tensor::vector({-1.0 / cur.step_size(), 0.0});  // mean_ref = x + (1,0)
  CHECK(kl_step(cur, ref, step, cond) == doctest::Approx(0.5).epsilon(1e-12));

  // Monte-Carlo KL estimate within 3 standard errors of the closed form
  const Tensor cvec_cur = cur.condition_vector(cond);
  const Tensor cvec_ref = ref.condition_vector(cond);
  Tensor mean_cur = step.x_from;
  Tensor mean_ref = step.x_from;
  const Tensor v_cur = cur.velocity_at(step.x_from, step.t, cvec_cur);
  const Tensor v_ref = ref.velocity_at(step.x_from, step.t, cvec_ref);
  for (std::size_t j = 0; j < 2; ++j) {
    mean_cur.data[j] -= cur.step_size() * v_cur.data[j];
    mean_ref.data[j] -= ref.step_size() * v_ref.data[j];
  }
  Rng mc(7);
  const int n = 100000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    Tensor draw = mean_cur;
    for (std::size_t j = 0; j < 2; ++j) draw.data[j] += step.sigma * mc.normal();
    const double term = gaussian_logdensity(draw, mean_cur, step.sigma) -
                        gaussian_logdensity(draw, mean_ref, step.sigma);
    sum += term;
    sumsq += term * term;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sumsq / n - mean * mean) / n);
  CHECK(std::abs(mean - 0.5) <= 3.0 * se);
}

TEST_CASE("stage1: ratios are exactly 1 right after refreshing theta_old") {
  const WorldSpec w = mini_world();
  const PromptPolicy p = mini_policy(w, 8);
  Rng rng(9);
  Stage1Batch batch = handmade_stage1_batch(p, p, 2, 2, rng);
  LossStats stats;
  stage1_loss(p, p, batch, mini_grpo(), nullptr, &stats);
  CHECK(std::abs(stats.mean_ratio - 1.0) <= 1e-12);
  CHECK(stats.mean_kl == 0.0);
  CHECK(stats.clip_fraction == 0.0);
}

TEST_CASE("stage1: loss gradient matches finite differences off-policy") {
  const WorldSpec w = mini_world();
  PromptPolicy actor = mini_policy(w, 10);
  const PromptPolicy ref = mini_policy(w, 11);
  Rng rng(12);
  Stage1Batch batch = handmade_stage1_batch(actor, ref, 2, 2, rng);

  // evaluate at slightly perturbed parameters so ratios leave 1
  PromptPolicy theta = actor;
  Rng noise(13);
  for (auto& wt : theta.encoder.weights) {
    for (double& v : wt.data) v += 0.02 * noise.normal();
  }
  const GrpoConfig cfg = mini_grpo();
  PolicyGrads grads = PolicyGrads::zeros_like(theta);
  stage1_loss(theta, ref, batch, cfg, &grads, nullptr);

  auto refs = policy_param_refs(theta, &grads);
  const auto fd = tu::finite_difference_grad(
      refs, [&]() { return stage1_loss(theta, ref, batch, cfg, nullptr, nullptr); });
  CHECK(tu::relative_error(tu::flatten_grads(refs), fd) <= 1e-3);
}

TEST_CASE("stage1: first-step gradient equals REINFORCE with baseline") {
  // theta == theta_old == theta_ref: rho = 1 and KL = 0, so the analytic
  // gradient must match finite differences of the plain policy-gradient
  // objective -(1/G)(1/N)(1/T) sum A_i log pi(y_t)
  const WorldSpec w = mini_world();
  PromptPolicy p = mini_policy(w, 14);
  Rng rng(15);
  Stage1Batch batch = handmade_stage1_batch(p, p, 2, 2, rng);
  const GrpoConfig cfg = mini_grpo();

  PolicyGrads grads = PolicyGrads::zeros_like(p);
  stage1_loss(p, p, batch, cfg, &grads, nullptr);
  auto refs = policy_param_refs(p, &grads);

  const double t_norm = static_cast<double>(w.prompt_len - 1);
  const auto reinforce = [&]() {
    double loss = 0.0;
    for (const auto& group : batch.groups) {
      for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
        for (int pos = 1; pos < w.prompt_len; ++pos) {
          loss -= group.advantages[i] *
                  token_logprob(p, group.trajectories[i], pos) /
                  (static_cast<double>(batch.groups.size()) *
                   static_cast<double>(group.trajectories.size()) * t_norm);
        }
      }
    }
    return loss;
  };
  const auto fd = tu::finite_difference_grad(refs, reinforce);
  CHECK(tu::relative_error(tu::flatten_grads(refs), fd) <= 1e-3);
}

TEST_CASE("stage1 trainer: zero advantages at theta_ref leave parameters unchanged") {
  const WorldSpec w = mini_world();
  const FlowModel generator = mini_flow(w, 16);
  // zero-weight detectors: every sample scores identically
  DetectorSuite suite = mini_detectors(w, 17);
  suite.semantic.head.weights[0].fill(0.0);
  suite.semantic.head.biases[0].fill(0.0);
  suite.feature.net.weights.back().fill(0.0);
  suite.feature.net.biases.back().fill(0.0);
  suite.alignment.net.weights.back().fill(0.0);
  suite.alignment.net.biases.back().fill(0.0);

  Stage1Trainer trainer(mini_policy(w, 18), &generator, &suite, mini_grpo());
  const std::string before = trainer.policy().to_json().dump();
  Rng rng(19);
  const StepMetrics m = trainer.step(rng);
  CHECK(trainer.policy().to_json().dump() == before);
  CHECK(m.mean_advantage_abs == 0.0);
  // uniform heads: sem = 0.5, feat = 0.5, align = 1/K
  CHECK(m.mean_reward.sem == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.mean_reward.feat == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.mean_reward.align == doctest::Approx(1.0 / w.num_classes).epsilon(1e-12));
}

TEST_CASE("stage1 trainer: generator and detectors stay frozen; runs are deterministic") {
  const WorldSpec w = mini_world();
  const FlowModel generator = mini_flow(w, 20);
  const DetectorSuite suite = mini_detectors(w, 21);
  const std::string gen_hash = sha256_hex(generator.to_json().dump());
  const std::string det_hash = sha256_hex(suite.to_json().dump());

  const auto run = [&]() {
    Stage1Trainer trainer(mini_policy(w, 22), &generator, &suite, mini_grpo());
    Rng rng(23);
    std::string metrics;
    for (int s = 0; s < 3; ++s) metrics += metrics_json(trainer.step(rng)).dump() + "\n";
    return std::make_pair(metrics, trainer.policy().to_json().dump());
  };
  const auto [metrics1, params1] = run();
  const auto [metrics2, params2] = run();
  CHECK(metrics1 == metrics2);
  CHECK(params1 == params2);
  CHECK(sha256_hex(generator.to_json().dump()) == gen_hash);
  CHECK(sha256_hex(suite.to_json().dump()) == det_hash);
}

TEST_CASE("stage2: eta = 0 is rejected before any training") {
  const WorldSpec w = mini_world();
  FlowModel generator = mini_flow(w, 24, 0.0);
  const DetectorSuite suite = mini_detectors(w, 25);
  const PromptPolicy policy = mini_policy(w, 26);
  CHECK_THROWS_AS(Stage2Trainer(std::move(generator), &policy, &suite, mini_grpo()),
                  ConfigError);
}

TEST_CASE("stage2: step ratios are exactly 1 right after refresh") {
  const WorldSpec w = mini_world();
  const FlowModel gen = mini_flow(w, 27);
  const DetectorSuite suite = mini_detectors(w, 28);
  const PromptPolicy policy = mini_policy(w, 29);
  Stage2Trainer trainer(gen, &policy, &suite, mini_grpo());
  Rng rng(30);
  Stage2Batch batch = trainer.collect(trainer.generator(), rng);
  LossStats stats;
  stage2_loss(trainer.generator(), trainer.reference(), batch, mini_grpo(), nullptr, &stats);
  CHECK(std::abs(stats.mean_ratio - 1.0) <= 1e-12);
  CHECK(stats.mean_kl == 0.0);
}

TEST_CASE("stage2: loss gradient matches finite differences off-policy") {
  const WorldSpec w = mini_world();
  const FlowModel actor = mini_flow(w, 31);
  const FlowModel ref = mini_flow(w, 32);
  const DetectorSuite suite = mini_detectors(w, 33);
  const PromptPolicy policy = mini_policy(w, 34);
  const GrpoConfig cfg = mini_grpo();
  Stage2Trainer trainer(actor, &policy, &suite, cfg);
  Rng rng(35);
  Stage2Batch batch = trainer.collect(actor, rng);

  FlowModel theta = actor;
  Rng noise(36);
  for (auto& wt : theta.velocity.weights) {
    for (double& v : wt.data) v += 0.01 * noise.normal();
  }
  FlowGrads grads = FlowGrads::zeros_like(theta);
  stage2_loss(theta, ref, batch, cfg, &grads, nullptr);
  auto refs = flow_param_refs(theta, &grads);
  const auto fd = tu::finite_difference_grad(
      refs, [&]() { return stage2_loss(theta, ref, batch, cfg, nullptr, nullptr); });
  CHECK(tu::relative_error(tu::flatten_grads(refs), fd) <= 1e-3);
}

TEST_CASE("stage2 trainer: policy and detectors stay frozen; runs are deterministic") {
  const WorldSpec w = mini_world();
  const FlowModel gen = mini_flow(w, 37);
  const DetectorSuite suite = mini_detectors(w, 38);
  const PromptPolicy policy = mini_policy(w, 39);
  const std::string pol_hash = sha256_hex(policy.to_json().dump());
  const std::string det_hash = sha256_hex(suite.to_json().dump());

  const auto run = [&]() {
    Stage2Trainer trainer(gen, &policy, &suite, mini_grpo());
    Rng rng(40);
    std::string metrics;
    for (int s = 0; s < 3; ++s) metrics += metrics_json(trainer.step(rng)).dump() + "\n";
    return std::make_pair(metrics, trainer.generator().to_json().dump());
  };
  const auto [m1, g1] = run();
  const auto [m2, g2] = run();
  CHECK(m1 == m2);
  CHECK(g1 == g2);
  CHECK(sha256_hex(policy.to_json().dump()) == pol_hash);
  CHECK(sha256_hex(suite.to_json().dump()) == det_hash);
}

TEST_CASE("objective invariance: shifting all rewards leaves loss unchanged") {
  const WorldSpec w = mini_world();
  const PromptPolicy p = mini_policy(w, 41);
  Rng rng(42);
  Stage1Batch batch = handmade_stage1_batch(p, p, 2, 3, rng);
  // recompute advantages from rewards, then from shifted rewards
  Rng reward_rng(43);
  for (auto& g : batch.groups) {
    for (auto& r : g.rewards) {
      r = {reward_rng.uniform01(), reward_rng.uniform01(), reward_rng.uniform01()};
    }
    g.advantages = fuse_advantages(g.rewards).advantages;
  }
  const GrpoConfig cfg = mini_grpo();
  const double base = stage1_loss(p, p, batch, cfg, nullptr, nullptr);

  for (auto& g : batch.groups) {
    auto shifted = g.rewards;
    for (auto& r : shifted) {
      r.sem += 0.17;
      r.feat += 0.17;
      r.align += 0.17;
    }
    g.advantages = fuse_advantages(shifted).advantages;
  }
  const double after = stage1_loss(p, p, batch, cfg, nullptr, nullptr);
  CHECK(after == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("assign_advantages: batch scope pools the whole step") {
  std::vector<std::vector<RewardVector>> groups = {
      {{0.1, 0.5, 0.5}, {0.2, 0.5, 0.5}},
      {{0.8, 0.5, 0.5}, {0.9, 0.5, 0.5}},
  };
  FusionConfig fusion;
  std::vector<std::vector<double>> by_group, by_batch;
  assign_advantages(groups, AdvantageScope::kGroup, fusion, &by_group);
  assign_advantages(groups, AdvantageScope::kBatch, fusion, &by_batch);
  // per group the two members are symmetric around the group mean
  CHECK(by_group[0][0] == doctest::Approx(-by_group[0][1]));
  CHECK(by_group[1][0] == doctest::Approx(-by_group[1][1]));
  // pooled scope matches fusing the concatenated list
  std::vector<RewardVector> pooled;
  for (const auto& g : groups) pooled.insert(pooled.end(), g.begin(), g.end());
  const auto fused = fuse_advantages(pooled, fusion).advantages;
  CHECK(by_batch[0][0] == doctest::Approx(fused[0]));
  CHECK(by_batch[1][1] == doctest::Approx(fused[3]));
  // and the two scopes genuinely differ here
  CHECK(std::abs(by_batch[0][0] - by_group[0][0]) > 1e-6);
}

#include "detgen/detectors.hpp"

#include <cmath>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "detgen/common.hpp"
#include "detgen/manifest.hpp"
#include "detgen/rng.hpp"
#include "testutil.hpp"

using namespace detgen;
namespace tu = detgen::testutil;

namespace {

WorldSpec small_world() {
  WorldSpec w;
  w.num_classes = 4;
  w.sub_modes = 2;
  w.style_tokens = 2;
  w.validate();
  return w;
}

SemanticDetector zero_weight_semantic(const WorldSpec& w) {
  SemanticDetector det;
  det.stats.world = w;
  det.stats.density_k = 2;
  det.stats.anchors = Tensor({4, 2}, {0, 0, 1, 0, 0, 1, 1, 1});
  const std::size_t ns = det.stats.num_stats();
  det.stat_mean = Tensor::zeros({ns});
  det.stat_std = Tensor::zeros({ns});
  det.stat_std.fill(1.0);
  Rng rng(1);
  det.head = Mlp::create({ns, 2}, rng);
  det.head.weights[0].fill(0.0);
  det.head.biases[0].fill(0.0);
  return det;
}

Sample sample_at(double x, double y) {
  Sample s;
  s.x = Tensor::vector({x, y});
  s.origin = "test";
  return s;
}

DetectorTrainConfig fast_config() {
  DetectorTrainConfig cfg;
  cfg.steps = 400;
  cfg.batch = 64;
  cfg.anchor_count = 128;
  cfg.feature_hidden = 16;
  cfg.heldout_hidden = 24;
  cfg.alignment_hidden = 24;
  return cfg;
}

}  // namespace

TEST_CASE("semantic reward: equal logits give exactly 0.5") {
  const WorldSpec w = small_world();
  const SemanticDetector det = zero_weight_semantic(w);
  CHECK(semantic_reward(det, sample_at(0.3, -0.7)) == 0.5);
}

TEST_CASE("semantic reward: stable for logit gaps up to 700") {
  const WorldSpec w = small_world();
  SemanticDetector det = zero_weight_semantic(w);
  det.head.biases[0] = Tensor::vector({-350.0, 350.0});  // gap +700 toward real
  const double hi = semantic_reward(det, sample_at(0.0, 0.0));
  CHECK(hi == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::isfinite(hi));
  det.head.biases[0] = Tensor::vector({350.0, -350.0});
  const double lo = semantic_reward(det, sample_at(0.0, 0.0));
  CHECK(lo >= 0.0);
  CHECK(lo <= 1e-300 * 1e300);  // finite
  CHECK(std::isfinite(lo));
}

TEST_CASE("semantic reward: matches an independent two-term softmax") {
  const WorldSpec w = small_world();
  SemanticDetector det = zero_weight_semantic(w);
  Rng rng(77);
  for (int i = 0; i < 20; ++i) {
    const double lf = rng.uniform(-5, 5);
    const double lr = rng.uniform(-5, 5);
    det.head.biases[0] = Tensor::vector({lf, lr});
    const double want = std::exp(lr) / (std::exp(lf) + std::exp(lr));
    CHECK(semantic_reward(det, sample_at(0.1, 0.2)) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("semantic reward: invariant under a common logit shift") {
  const WorldSpec w = small_world();
  SemanticDetector det = zero_weight_semantic(w);
  det.head.biases[0] = Tensor::vector({0.4, -1.1});
  const double base = semantic_reward(det, sample_at(1.0, 1.0));
  det.head.biases[0] = Tensor::vector({0.4 + 123.0, -1.1 + 123.0});
  CHECK(semantic_reward(det, sample_at(1.0, 1.0)) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("feature reward: logit 0 gives 0.5 and the complement identity holds") {
  Rng rng(3);
  FeatureDetector det{Mlp::create({2, 4, 4, 1}, rng)};
  det.net.weights.back().fill(0.0);
  det.net.biases.back().fill(0.0);
  CHECK(feature_reward(det, sample_at(0.0, 0.0)) == 0.5);

  Rng rng2(4);
  FeatureDetector det2{Mlp::create({2, 4, 4, 1}, rng2)};
  for (int i = 0; i < 20; ++i) {
    const Sample s = sample_at(rng2.normal(), rng2.normal());
    CHECK(feature_reward(det2, s) + det2.fake_probability(s.x) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("feature reward: large positive fake logit drives the reward to 0") {
  Rng rng(5);
  FeatureDetector det{Mlp::create({2, 4, 4, 1}, rng)};
  det.net.weights.back().fill(0.0);
  det.net.biases.back() = Tensor::vector({40.0});
  CHECK(feature_reward(det, sample_at(1.0, -1.0)) < 1e-15);
}

TEST_CASE("alignment reward: uniform logits give 1/K and probabilities sum to 1") {
  const WorldSpec w = small_world();
  Rng rng(6);
  AlignmentClassifier clf{Mlp::create({2, 8, static_cast<std::size_t>(w.num_classes)}, rng)};
  clf.net.weights.back().fill(0.0);
  clf.net.biases.back().fill(0.0);
  CHECK(alignment_reward(clf, sample_at(0.5, 0.5), 0) == doctest::Approx(0.25));

  Rng rng2(7);
  AlignmentClassifier clf2{Mlp::create({2, 8, static_cast<std::size_t>(w.num_classes)}, rng2)};
  const Tensor p = clf2.class_probs(Tensor::vector({0.1, -0.4}));
  double sum = 0.0;
  for (double v : p.data) sum += v;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(alignment_reward(clf2, sample_at(0, 0), w.num_classes), ConfigError);
}

TEST_CASE("semantic report: zero weights give zero contributions; sums reconstruct the gap") {
  const WorldSpec w = small_world();
  SemanticDetector det = zero_weight_semantic(w);
  for (const auto& c : semantic_report(det, sample_at(0.2, 0.8))) {
    CHECK(c.contribution == 0.0);
  }

  Rng rng(8);
  det.head = Mlp::create({det.stats.num_stats(), 2}, rng);
  const Sample s = sample_at(-1.3, 2.2);
  const DetectorLogits l = det.logits(s.x);
  const double gap = l.fake - l.real;
  const double bias_gap = det.head.biases[0].data[0] - det.head.biases[0].data[1];
  double sum = 0.0;
  for (const auto& c : semantic_report(det, s)) sum += c.contribution;
  CHECK(sum == doctest::Approx(gap - bias_gap).epsilon(1e-9));
}

TEST_CASE("reward input-gradients match finite differences") {
  const WorldSpec w = small_world();
  const Vocabulary vocab(w);
  Rng rng(12);
  const auto real = sample_real(w, vocab, 400, rng);
  auto fake = real;
  for (auto& s : fake) {
    s.x.data[0] += 1.5;  // crude shifted fakes, enough to train nonzero heads
    s.origin = "generated:test";
  }
  Rng train_rng(13);
  const DetectorSuite suite = train_detectors(real, fake, w, fast_config(), train_rng);

  Sample s = sample_at(0.37, -0.81);
  const double h = 1e-6;
  const auto fd_of = [&](const std::function<double(const Sample&)>& f) {
    std::vector<double> grad;
    for (std::size_t j = 0; j < s.x.size(); ++j) {
      const double saved = s.x.data[j];
      s.x.data[j] = saved + h;
      const double up = f(s);
      s.x.data[j] = saved - h;
      const double down = f(s);
      s.x.data[j] = saved;
      grad.push_back((up - down) / (2 * h));
    }
    return grad;
  };

  const auto sem_fd = fd_of([&](const Sample& q) { return semantic_reward(suite.semantic, q); });
  CHECK(tu::relative_error(semantic_reward_input_grad(suite.semantic, s).data, sem_fd) <= 1e-4);

  const auto feat_fd = fd_of([&](const Sample& q) { return feature_reward(suite.feature, q); });
  CHECK(tu::relative_error(feature_reward_input_grad(suite.feature, s).data, feat_fd) <= 1e-4);

  const auto align_fd =
      fd_of([&](const Sample& q) { return alignment_reward(suite.alignment, q, 1); });
  CHECK(tu::relative_error(alignment_reward_input_grad(suite.alignment, s, 1).data, align_fd) <=
        1e-4);
}

TEST_CASE("train_detectors: real-vs-real carries no signal (accuracy ~ 50%)") {
  const WorldSpec w = small_world();
  const Vocabulary vocab(w);
  Rng rng(21);
  const auto a = sample_real(w, vocab, 600, rng);
  const auto b = sample_real(w, vocab, 600, rng);
  Rng train_rng(22);
  const DetectorSuite suite = train_detectors(a, b, w, fast_config(), train_rng);

  Rng eval_rng(23);
  const auto eval_a = sample_real(w, vocab, 400, eval_rng);
  const auto eval_b = sample_real(w, vocab, 400, eval_rng);
  int correct = 0;
  for (const auto& s : eval_a) correct += suite.heldout.fake_probability(s.x) < 0.5 ? 1 : 0;
  for (const auto& s : eval_b) correct += suite.heldout.fake_probability(s.x) >= 0.5 ? 1 : 0;
  const double acc = static_cast<double>(correct) / 800.0;
  CHECK(acc > 0.40);
  CHECK(acc < 0.60);
}

TEST_CASE("train_detectors: rejects empty sides") {
  const WorldSpec w = small_world();
  const Vocabulary vocab(w);
  Rng rng(24);
  const auto real = sample_real(w, vocab, 50, rng);
  Rng train_rng(25);
  CHECK_THROWS_AS(train_detectors(real, {}, w, fast_config(), train_rng), ConfigError);
  CHECK_THROWS_AS(train_detectors({}, real, w, fast_config(), train_rng), ConfigError);
}

TEST_CASE("detectors: scoring never mutates the checkpoint") {
  const WorldSpec w = small_world();
  const Vocabulary vocab(w);
  Rng rng(26);
  const auto real = sample_real(w, vocab, 300, rng);
  auto fake = real;
  for (auto& s : fake) s.x.data[1] -= 2.0;
  Rng train_rng(27);
  const DetectorSuite suite = train_detectors(real, fake, w, fast_config(), train_rng);

  const std::string before = sha256_hex(suite.to_json().dump());
  Rng eval_rng(28);
  for (int i = 0; i < 100; ++i) {
    const Sample s = sample_at(eval_rng.normal(), eval_rng.normal());
    (void)semantic_reward(suite.semantic, s);
    (void)feature_reward(suite.feature, s);
    (void)alignment_reward(suite.alignment, s, 0);
    (void)semantic_report(suite.semantic, s);
  }
  CHECK(sha256_hex(suite.to_json().dump()) == before);
}

TEST_CASE("detector suite json round-trip preserves behavior") {
  const WorldSpec w = small_world();
  const Vocabulary vocab(w);
  Rng rng(29);
  const auto real = sample_real(w, vocab, 300, rng);
  auto fake = real;
  for (auto& s : fake) s.x.data[0] *= 0.5;
  Rng train_rng(30);
  const DetectorSuite suite = train_detectors(real, fake, w, fast_config(), train_rng);
  const DetectorSuite back = DetectorSuite::from_json(
      nlohmann::json::parse(suite.to_json().dump()));
  const Sample s = sample_at(0.9, -0.4);
  CHECK(semantic_reward(back.semantic, s) == semantic_reward(suite.semantic, s));
  CHECK(feature_reward(back.feature, s) == feature_reward(suite.feature, s));
  CHECK(back.heldout.real_probability(s.x) == suite.heldout.real_probability(s.x));
}

TEST_CASE("auc: separable scores give 1, identical give 0.5") {
  CHECK(auc_from_scores({2.0, 3.0}, {0.0, 1.0}) == doctest::Approx(1.0));
  CHECK(auc_from_scores({1.0, 1.0}, {1.0, 1.0}) == doctest::Approx(0.5));
  CHECK(auc_from_scores({0.0}, {1.0}) == doctest::Approx(0.0));
}

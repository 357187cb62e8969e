#include "detgen/flow.hpp"

#include <cmath>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "detgen/common.hpp"
#include "detgen/rng.hpp"
#include "testutil.hpp"

using namespace detgen;
namespace tu = detgen::testutil;

namespace {

WorldSpec one_mode_world() {
  WorldSpec w;
  w.num_classes = 1;
  w.sub_modes = 1;
  w.style_tokens = 1;
  w.style_sigma = {0.05};
  w.validate();
  return w;
}

FlowConfig tiny_flow() {
  FlowConfig cfg;
  cfg.t_steps = 8;
  cfg.eta = 0.7;
  cfg.hidden = {32, 32};
  cfg.cond_dim = 4;
  return cfg;
}

FlowModel make_model(const WorldSpec& w, const FlowConfig& cfg, std::uint64_t seed) {
  const Vocabulary vocab(w);
  Rng rng(seed);
  return FlowModel::create(w, vocab, cfg, rng);
}

}  // namespace

TEST_CASE("fm_pretrain: one-mode optimum approaches v(x,1) = x - mu") {
  const WorldSpec w = one_mode_world();
  const Vocabulary vocab(w);
  FlowConfig fc = tiny_flow();
  fc.hidden = {48, 48};
  FlowModel model = make_model(w, fc, 41);
  Rng data_rng(42);
  const auto data = sample_real(w, vocab, 2048, data_rng);
  FmTrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch = 128;
  cfg.lr = 2e-3;
  Rng train_rng(43);
  const FmTrainResult result = fm_pretrain(model, data, cfg, train_rng);
  CHECK(result.epoch_loss.back() < result.epoch_loss.front());

  const auto mu = w.fine_mode_mean(0, 0);
  const Tensor cond = model.condition_vector(caption_prompt(w, vocab, 0, 0, 0));
  Rng probe(44);
  double worst = 0.0;
  for (int i = 0; i < 8; ++i) {
    const Tensor x = Tensor::vector({probe.normal(), probe.normal()});
    const Tensor v = model.velocity_at(x, 1.0, cond);
    for (std::size_t j = 0; j < 2; ++j) {
      worst = std::max(worst, std::abs(v.data[j] - (x.data[j] - mu[j])));
    }
  }
  CHECK(worst <= 0.1);
}

TEST_CASE("fm_pretrain: held-out loss drops and training is seed-deterministic") {
  const WorldSpec w = one_mode_world();
  const Vocabulary vocab(w);
  Rng data_rng(45);
  const auto data = sample_real(w, vocab, 512, data_rng);
  FmTrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch = 64;

  const auto run = [&]() {
    FlowModel model = make_model(w, tiny_flow(), 50);
    Rng train_rng(51);
    fm_pretrain(model, data, cfg, train_rng);
    return model;
  };
  const FlowModel m1 = run();
  const FlowModel m2 = run();
  CHECK(m1.to_json().dump() == m2.to_json().dump());

  // held-out flow-matching loss: untrained vs trained
  const auto fm_loss = [&](const FlowModel& model) {
    Rng eval(52);
    double loss = 0.0;
    for (int i = 0; i < 256; ++i) {
      const Sample& s = data[eval.below(data.size())];
      const double t = eval.uniform01();
      const Tensor cond = model.condition_vector(s.condition);
      Tensor xt = Tensor::zeros({2});
      Tensor target = Tensor::zeros({2});
      for (std::size_t j = 0; j < 2; ++j) {
        const double noise = eval.normal();
        xt.data[j] = t * noise + (1 - t) * s.x.data[j];
        target.data[j] = noise - s.x.data[j];
      }
      const Tensor v = model.velocity_at(xt, t, cond);
      loss += squared_distance(v, target);
    }
    return loss / 256.0;
  };
  const FlowModel untrained = make_model(w, tiny_flow(), 50);
  CHECK(fm_loss(m1) < fm_loss(untrained));
}

TEST_CASE("sample_ode: exact one-step linear field lands on mu") {
  // velocity fixed at v(x) = x - mu with one Euler step of size 1
  WorldSpec w = one_mode_world();
  const Vocabulary vocab(w);
  FlowConfig cfg = tiny_flow();
  cfg.t_steps = 2;
  FlowModel model = make_model(w, cfg, 60);
  // zero-weight net with bias = -mu plus identity on x is not expressible in
  // one linear layer with tanh hidden; instead check the Euler identity
  // directly: x' = x - dt * v with a hand-built v.
  const auto mu = w.fine_mode_mean(0, 0);
  const Tensor x1 = Tensor::vector({1.7, -0.4});
  Tensor v = Tensor::vector({x1.data[0] - mu[0], x1.data[1] - mu[1]});
  Tensor x0 = x1;
  for (std::size_t j = 0; j < 2; ++j) x0.data[j] -= 1.0 * v.data[j];
  CHECK(x0.data[0] == doctest::Approx(mu[0]));
  CHECK(x0.data[1] == doctest::Approx(mu[1]));
  (void)model;
}

TEST_CASE("sample_ode: zero velocity returns the initial noise") {
  const WorldSpec w = one_mode_world();
  FlowModel model = make_model(w, tiny_flow(), 61);
  for (auto& wt : model.velocity.weights) wt.fill(0.0);
  for (auto& b : model.velocity.biases) b.fill(0.0);
  const Vocabulary vocab(w);
  Rng rng(62);
  const OdeResult res = sample_ode(model, user_prompt(w, vocab, 0), rng);
  CHECK(res.sample.x.data == res.states[static_cast<std::size_t>(model.t_steps)].data);
}

TEST_CASE("sample_ode: same stream reproduces, different stream differs") {
  const WorldSpec w = one_mode_world();
  const FlowModel model = make_model(w, tiny_flow(), 63);
  const Vocabulary vocab(w);
  const PromptSeq cond = user_prompt(w, vocab, 0);
  Rng a(64), b(64), c(65);
  const auto ra = sample_ode(model, cond, a);
  const auto rb = sample_ode(model, cond, b);
  const auto rc = sample_ode(model, cond, c);
  CHECK(ra.sample.x.data == rb.sample.x.data);
  CHECK(ra.sample.x.data != rc.sample.x.data);
}

TEST_CASE("sde window: eta=0 reproduces the ODE path bit-for-bit") {
  const WorldSpec w = one_mode_world();
  FlowConfig cfg = tiny_flow();
  cfg.eta = 0.0;
  const FlowModel model = make_model(w, cfg, 66);
  const Vocabulary vocab(w);
  const PromptSeq cond = user_prompt(w, vocab, 0);

  Rng sde_rng(67);
  const auto records = sample_sde_window(model, cond, 4, 2, 3, sde_rng);
  REQUIRE(records.size() == 3);

  Rng ode_rng = Rng(67).stream(0);  // the shared-prefix noise stream
  const OdeResult ode = sample_ode(model, cond, ode_rng);
  for (const auto& rec : records) {
    for (int s = 0; s <= model.t_steps; ++s) {
      CHECK(rec.states[static_cast<std::size_t>(s)].data ==
            ode.states[static_cast<std::size_t>(s)].data);
    }
  }
}

TEST_CASE("sde window: branches share the exact prefix; log-density matches the formula") {
  const WorldSpec w = one_mode_world();
  const FlowModel model = make_model(w, tiny_flow(), 68);
  const Vocabulary vocab(w);
  const PromptSeq cond = user_prompt(w, vocab, 0);

  Rng rng(69);
  const int window_start = 5, window_len = 3;
  const auto records = sample_sde_window(model, cond, window_start, window_len, 4, rng);
  for (const auto& rec : records) {
    for (int s = model.t_steps; s >= window_start; --s) {
      CHECK(rec.states[static_cast<std::size_t>(s)].data ==
            records[0].states[static_cast<std::size_t>(s)].data);
    }
    REQUIRE(static_cast<int>(rec.window.size()) == window_len);
    for (const auto& step : rec.window) {
      // independent density-formula oracle
      const double d = static_cast<double>(step.x_to.size());
      double sq = 0.0;
      for (std::size_t j = 0; j < step.x_to.size(); ++j) {
        const double diff = step.x_to.data[j] - step.mean_old.data[j];
        sq += diff * diff;
      }
      const double want = -0.5 * d * std::log(2.0 * M_PI * step.sigma * step.sigma) -
                          sq / (2.0 * step.sigma * step.sigma);
      CHECK(step.logdensity_old == doctest::Approx(want).epsilon(1e-12));
      // sigma follows eta * sqrt(dt * t)
      CHECK(step.sigma ==
            doctest::Approx(model.eta * std::sqrt(model.step_size() * step.t)).epsilon(1e-12));
    }
  }
}

TEST_CASE("sde window: invalid windows are configuration errors") {
  const WorldSpec w = one_mode_world();
  const FlowModel model = make_model(w, tiny_flow(), 70);
  const Vocabulary vocab(w);
  const PromptSeq cond = user_prompt(w, vocab, 0);
  Rng rng(71);
  CHECK_THROWS_AS(sample_sde_window(model, cond, 1, 3, 2, rng), ConfigError);
  CHECK_THROWS_AS(sample_sde_window(model, cond, 100, 3, 2, rng), ConfigError);
  CHECK_THROWS_AS(sample_sde_window(model, cond, 4, 2, 1, rng), ConfigError);
}

TEST_CASE("transition_logdensity: identity under the sampling parameters") {
  const WorldSpec w = one_mode_world();
  const FlowModel model = make_model(w, tiny_flow(), 72);
  const Vocabulary vocab(w);
  const PromptSeq cond = user_prompt(w, vocab, 0);
  Rng rng(73);
  const auto records = sample_sde_window(model, cond, 5, 3, 2, rng);
  for (const auto& rec : records) {
    for (const auto& step : rec.window) {
      CHECK(transition_logdensity(model, step, cond) == step.logdensity_old);
    }
  }
}

TEST_CASE("transition_logdensity: mean shift follows the algebraic expansion") {
  // shifting the mean by delta changes logp by (|x-m|^2 - |x-m-delta|^2)/(2 sigma^2)
  const Tensor x = Tensor::vector({0.3, -0.9});
  const Tensor mean = Tensor::vector({0.1, 0.2});
  const Tensor delta = Tensor::vector({0.05, -0.03});
  const double sigma = 0.4;
  Tensor shifted = mean;
  shifted += delta;
  const double lhs = gaussian_logdensity(x, shifted, sigma) - gaussian_logdensity(x, mean, sigma);
  const double rhs =
      (squared_distance(x, mean) - squared_distance(x, shifted)) / (2.0 * sigma * sigma);
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("transition_logdensity: moving the mean toward the draw never lowers it") {
  const Tensor x = Tensor::vector({1.0, 2.0});
  Tensor mean = Tensor::vector({-1.0, 0.5});
  const double sigma = 0.3;
  double prev = gaussian_logdensity(x, mean, sigma);
  for (int i = 0; i < 10; ++i) {
    for (std::size_t j = 0; j < 2; ++j) mean.data[j] += 0.1 * (x.data[j] - mean.data[j]);
    const double cur = gaussian_logdensity(x, mean, sigma);
    CHECK(cur >= prev);
    prev = cur;
  }
}

TEST_CASE("transition density: normalizes to 1 (importance-sampled Monte Carlo)") {
  const WorldSpec w = one_mode_world();
  const FlowModel model = make_model(w, tiny_flow(), 74);
  const Vocabulary vocab(w);
  const PromptSeq cond = user_prompt(w, vocab, 0);
  Rng rng(75);
  const auto records = sample_sde_window(model, cond, 4, 1, 2, rng);
  const WindowStep& step = records[0].window[0];

  // proposal: Gaussian at the same mean with doubled sigma
  const double qsigma = 2.0 * step.sigma;
  Rng mc(76);
  const int n = 100000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    Tensor draw = step.mean_old;
    for (std::size_t j = 0; j < draw.size(); ++j) draw.data[j] += qsigma * mc.normal();
    const double logp = gaussian_logdensity(draw, step.mean_old, step.sigma);
    const double logq = gaussian_logdensity(draw, step.mean_old, qsigma);
    const double ratio = std::exp(logp - logq);
    sum += ratio;
    sumsq += ratio * ratio;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sumsq / n - mean * mean) / n);
  CHECK(std::abs(mean - 1.0) <= 3.0 * se);
}

TEST_CASE("transition_logdensity gradient matches finite differences") {
  const WorldSpec w = one_mode_world();
  FlowModel model = make_model(w, tiny_flow(), 77);
  const Vocabulary vocab(w);
  const PromptSeq cond = caption_prompt(w, vocab, 0, 0, 0);
  Rng rng(78);
  const auto records = sample_sde_window(model, cond, 4, 2, 2, rng);
  const WindowStep step = records[0].window[1];

  FlowGrads grads = FlowGrads::zeros_like(model);
  transition_logdensity_backward(model, step, cond, 1.0, grads);
  auto refs = flow_param_refs(model, &grads);
  const auto fd = tu::finite_difference_grad(
      refs, [&]() { return transition_logdensity(model, step, cond); });
  CHECK(tu::relative_error(tu::flatten_grads(refs), fd) <= 1e-4);
}

TEST_CASE("flow checkpoint json round-trip is exact") {
  const WorldSpec w = one_mode_world();
  const FlowModel model = make_model(w, tiny_flow(), 79);
  const std::string dumped = model.to_json().dump();
  const FlowModel back = FlowModel::from_json(nlohmann::json::parse(dumped));
  CHECK(back.to_json().dump() == dumped);
  CHECK(back.t_steps == model.t_steps);
  CHECK(back.eta == model.eta);
}

TEST_CASE("sde window: resample_init gives branches distinct initial noise") {
  const WorldSpec w = one_mode_world();
  const FlowModel model = make_model(w, tiny_flow(), 80);
  const Vocabulary vocab(w);
  const PromptSeq cond = user_prompt(w, vocab, 0);
  Rng rng(81);
  const auto records = sample_sde_window(model, cond, 4, 2, 3, rng, "flow", true);
  CHECK(records[0].states[8].data != records[1].states[8].data);
}

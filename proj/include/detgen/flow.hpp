#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "detgen/mlp.hpp"
#include "detgen/rng.hpp"
#include "detgen/world.hpp"

namespace detgen {

struct FlowConfig {
  int t_steps = 20;
  double eta = 0.7;
  std::vector<int> hidden = {64, 64, 64};
  int cond_dim = 16;
};

// Conditional rectified-flow generator. Convention: t = 1 is pure noise,
// t = 0 is data; the net regresses the straight-line velocity x1 - x0, and
// sampling walks x <- x - dt * v from t = 1 down to 0.
struct FlowModel {
  WorldSpec world;
  Vocabulary vocab;
  Mlp velocity;      // [dim + 1 + cond_dim -> hidden... -> dim]
  Tensor embedding;  // [vocab_size, cond_dim]
  int t_steps = 20;
  double eta = 0.7;

  static FlowModel create(const WorldSpec& world, const Vocabulary& vocab,
                          const FlowConfig& cfg, Rng& rng);

  double step_size() const { return 1.0 / t_steps; }
  int dim() const { return world.dim; }
  std::size_t cond_dim() const { return embedding.cols(); }

  Tensor condition_vector(const PromptSeq& p) const;
  Tensor velocity_at(const Tensor& x, double t, const Tensor& cond) const;
  // Per-coordinate SDE std at the transition leaving time t.
  double sigma_at(double t) const;

  nlohmann::json to_json() const;
  static FlowModel from_json(const nlohmann::json& j);
};

struct FlowGrads {
  MlpGrads velocity;
  Tensor embedding;

  static FlowGrads zeros_like(const FlowModel& m);
  void add_scaled(const FlowGrads& other, double s);
  void scale(double s);
};

std::vector<ParamRef> flow_param_refs(FlowModel& m, const FlowGrads* grads);

// Accumulates d(upstream . v)/d(params) into grads; upstream is a gradient on
// the velocity output at (x, t, cond(prompt)).
void velocity_backward(const FlowModel& m, const Tensor& x, double t,
                       const PromptSeq& prompt, const Tensor& upstream_v,
                       FlowGrads& grads);

struct FmTrainConfig {
  int epochs = 40;
  int batch = 256;
  double lr = 1e-3;
};

struct FmTrainResult {
  std::vector<double> epoch_loss;
};

// Flow-matching pretraining on (x, caption) pairs; the cold-start phase.
FmTrainResult fm_pretrain(FlowModel& model, const std::vector<Sample>& data,
                          const FmTrainConfig& cfg, Rng& rng);

// One stochastic transition inside the exploration window.
struct WindowStep {
  int step = 0;        // transition from state index `step` to `step - 1`
  double t = 0.0;      // time at the start of the transition
  double sigma = 0.0;  // per-coordinate std used for the draw
  Tensor x_from;
  Tensor mean_old;     // Euler mean under the sampling parameters
  Tensor x_to;
  double logdensity_old = 0.0;
};

struct TrajectoryRecord {
  std::vector<Tensor> states;  // index s = 0..t_steps; states[t_steps] = noise
  int window_start = 0;        // first stochastic transition leaves this index
  int window_len = 0;
  std::vector<WindowStep> window;
  PromptSeq condition;
  Sample final_sample;
};

struct OdeResult {
  Sample sample;
  std::vector<Tensor> states;
};

OdeResult sample_ode(const FlowModel& model, const PromptSeq& cond, Rng& rng,
                     const std::string& model_id = "flow");

// Shared deterministic prefix to `window_start`, then `n_branches`
// independent stochastic windows of `window_len` transitions, then
// deterministic completion. With resample_init each branch draws its own
// initial noise (prefix no longer shared).
std::vector<TrajectoryRecord> sample_sde_window(
    const FlowModel& model, const PromptSeq& cond, int window_start,
    int window_len, int n_branches, Rng& rng,
    const std::string& model_id = "flow", bool resample_init = false);

double gaussian_logdensity(const Tensor& x, const Tensor& mean, double sigma);

// Log-density of the recorded draw under the CURRENT model's mean with the
// recorded sigma. Errors when sigma is zero.
double transition_logdensity(const FlowModel& model, const WindowStep& step,
                             const PromptSeq& cond);

// Accumulates upstream * d(transition_logdensity)/d(params) into grads.
void transition_logdensity_backward(const FlowModel& model,
                                    const WindowStep& step,
                                    const PromptSeq& cond, double upstream,
                                    FlowGrads& grads);

}  // namespace detgen

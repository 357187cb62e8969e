#include "detgen/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "detgen/adam.hpp"
#include "detgen/common.hpp"

namespace detgen {
namespace {

Tensor net_input(const Tensor& x, double t, const Tensor& cond) {
  Tensor in = Tensor::zeros({x.size() + 1 + cond.size()});
  std::copy(x.data.begin(), x.data.end(), in.data.begin());
  in.data[x.size()] = t;
  std::copy(cond.data.begin(), cond.data.end(), in.data.begin() + static_cast<std::ptrdiff_t>(x.size() + 1));
  return in;
}

}  // namespace

FlowModel FlowModel::create(const WorldSpec& world, const Vocabulary& vocab,
                            const FlowConfig& cfg, Rng& rng) {
  require(cfg.t_steps >= 2, "flow: t_steps must be >= 2");
  require(cfg.eta >= 0.0, "flow: eta must be >= 0");
  require(cfg.cond_dim >= 1, "flow: cond_dim must be >= 1");
  FlowModel m;
  m.world = world;
  m.vocab = vocab;
  m.t_steps = cfg.t_steps;
  m.eta = cfg.eta;
  std::vector<std::size_t> sizes;
  sizes.push_back(static_cast<std::size_t>(world.dim + 1 + cfg.cond_dim));
  for (int h : cfg.hidden) sizes.push_back(static_cast<std::size_t>(h));
  sizes.push_back(static_cast<std::size_t>(world.dim));
  Rng net_rng = rng.named("velocity");
  m.velocity = Mlp::create(sizes, net_rng);
  m.embedding = Tensor::matrix(static_cast<std::size_t>(vocab.size()),
                               static_cast<std::size_t>(cfg.cond_dim));
  Rng emb_rng = rng.named("embedding");
  const double bound = std::sqrt(6.0 / static_cast<double>(vocab.size() + cfg.cond_dim));
  for (double& v : m.embedding.data) v = emb_rng.uniform(-bound, bound);
  return m;
}

Tensor FlowModel::condition_vector(const PromptSeq& p) const {
  return embed_condition(vocab, embedding, p);
}

Tensor FlowModel::velocity_at(const Tensor& x, double t, const Tensor& cond) const {
  return velocity.forward(net_input(x, t, cond));
}

double FlowModel::sigma_at(double t) const {
  return eta * std::sqrt(step_size() * t);
}

nlohmann::json FlowModel::to_json() const {
  nlohmann::json j;
  j["world"] = world.to_json();
  j["velocity"] = velocity.to_json();
  j["t_steps"] = t_steps;
  j["eta"] = eta;
  j["embedding_table"] = embedding.data;
  j["cond_dim"] = embedding.cols();
  return j;
}

FlowModel FlowModel::from_json(const nlohmann::json& j) {
  FlowModel m;
  m.world = WorldSpec::from_json(j.at("world"));
  m.vocab = Vocabulary(m.world);
  m.velocity = Mlp::from_json(j.at("velocity"));
  m.t_steps = j.at("t_steps").get<int>();
  m.eta = j.at("eta").get<double>();
  const std::size_t cond_dim = j.at("cond_dim").get<std::size_t>();
  auto flat = j.at("embedding_table").get<std::vector<double>>();
  require(flat.size() == cond_dim * static_cast<std::size_t>(m.vocab.size()),
          "flow checkpoint: embedding table size mismatch");
  m.embedding = Tensor({static_cast<std::size_t>(m.vocab.size()), cond_dim}, std::move(flat));
  return m;
}

FlowGrads FlowGrads::zeros_like(const FlowModel& m) {
  FlowGrads g;
  g.velocity = MlpGrads::zeros_like(m.velocity);
  g.embedding = Tensor::zeros(m.embedding.shape);
  return g;
}

void FlowGrads::add_scaled(const FlowGrads& other, double s) {
  velocity.add_scaled(other.velocity, s);
  for (std::size_t i = 0; i < embedding.size(); ++i)
    embedding.data[i] += s * other.embedding.data[i];
}

void FlowGrads::scale(double s) {
  velocity.scale(s);
  embedding *= s;
}

std::vector<ParamRef> flow_param_refs(FlowModel& m, const FlowGrads* grads) {
  std::vector<ParamRef> refs = param_refs("velocity", m.velocity,
                                          grads ? &grads->velocity : nullptr);
  refs.push_back({"embedding_table", &m.embedding, grads ? &grads->embedding : nullptr});
  return refs;
}

void velocity_backward(const FlowModel& m, const Tensor& x, double t,
                       const PromptSeq& prompt, const Tensor& upstream_v,
                       FlowGrads& grads) {
  const Tensor cond = m.condition_vector(prompt);
  ForwardCache cache = m.velocity.forward_cached(net_input(x, t, cond));
  const Tensor in_grad = m.velocity.backward(cache, upstream_v, grads.velocity);
  Tensor cond_grad = Tensor::zeros({cond.size()});
  for (std::size_t i = 0; i < cond.size(); ++i)
    cond_grad.data[i] = in_grad.data[x.size() + 1 + i];
  embed_condition_backward(m.vocab, prompt, cond_grad, grads.embedding);
}

FmTrainResult fm_pretrain(FlowModel& model, const std::vector<Sample>& data,
                          const FmTrainConfig& cfg, Rng& rng) {
  require(!data.empty(), "fm_pretrain: empty dataset");
  const std::size_t dim = static_cast<std::size_t>(model.dim());
  Adam opt({cfg.lr, 0.9, 0.999, 1e-8});
  FmTrainResult result;
  Rng order_rng = rng.named("order");
  Rng noise_rng = rng.named("noise");

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates on the epoch's shuffle stream
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[order_rng.below(i)]);
    }
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 1 <= data.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop = std::min(data.size(), start + static_cast<std::size_t>(cfg.batch));
      const std::size_t bs = stop - start;
      if (bs == 0) break;

      Tensor batch = Tensor::matrix(bs, model.velocity.input_size());
      Tensor target = Tensor::matrix(bs, dim);
      std::vector<const PromptSeq*> prompts(bs);
      for (std::size_t b = 0; b < bs; ++b) {
        const Sample& s = data[order[start + b]];
        prompts[b] = &s.condition;
        const double t = noise_rng.uniform01();
        Tensor cond = model.condition_vector(s.condition);
        for (std::size_t j = 0; j < dim; ++j) {
          const double noise = noise_rng.normal();
          const double xt = t * noise + (1.0 - t) * s.x.data[j];
          batch.at(b, j) = xt;
          target.at(b, j) = noise - s.x.data[j];
        }
        batch.at(b, dim) = t;
        for (std::size_t j = 0; j < cond.size(); ++j) batch.at(b, dim + 1 + j) = cond.data[j];
      }

      ForwardCache cache = model.velocity.forward_cached(batch);
      const Tensor& pred = cache.post.back();
      double loss = 0.0;
      Tensor upstream = Tensor::matrix(bs, dim);
      for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t j = 0; j < dim; ++j) {
          const double diff = pred.at(b, j) - target.at(b, j);
          loss += diff * diff;
          upstream.at(b, j) = 2.0 * diff / static_cast<double>(bs);
        }
      }
      loss /= static_cast<double>(bs);
      if (!std::isfinite(loss)) {
        throw NumericError("fm_pretrain: non-finite loss at epoch " +
                           std::to_string(epoch));
      }

      FlowGrads grads = FlowGrads::zeros_like(model);
      const Tensor in_grad = model.velocity.backward(cache, upstream, grads.velocity);
      for (std::size_t b = 0; b < bs; ++b) {
        Tensor cond_grad = Tensor::zeros({model.cond_dim()});
        for (std::size_t j = 0; j < cond_grad.size(); ++j)
          cond_grad.data[j] = in_grad.at(b, dim + 1 + j);
        embed_condition_backward(model.vocab, *prompts[b], cond_grad, grads.embedding);
      }
      opt.step(flow_param_refs(model, &grads));

      epoch_loss += loss;
      ++batches;
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
  }
  return result;
}

namespace {

Tensor initial_noise(const FlowModel& model, Rng& rng) {
  Tensor x = Tensor::zeros({static_cast<std::size_t>(model.dim())});
  for (double& v : x.data) v = rng.normal();
  return x;
}

Tensor euler_mean(const FlowModel& model, const Tensor& x, double t, const Tensor& cond) {
  const Tensor v = model.velocity_at(x, t, cond);
  Tensor mean = x;
  const double dt = model.step_size();
  for (std::size_t j = 0; j < mean.size(); ++j) mean.data[j] -= dt * v.data[j];
  return mean;
}

void check_state(const Tensor& x, int step) {
  if (!x.all_finite()) {
    throw NumericError("flow sampling produced a non-finite state at step " +
                       std::to_string(step));
  }
}

}  // namespace

OdeResult sample_ode(const FlowModel& model, const PromptSeq& cond, Rng& rng,
                     const std::string& model_id) {
  const Tensor cvec = model.condition_vector(cond);
  std::vector<Tensor> states(static_cast<std::size_t>(model.t_steps) + 1);
  states[static_cast<std::size_t>(model.t_steps)] = initial_noise(model, rng);
  for (int s = model.t_steps; s >= 1; --s) {
    const double t = s * model.step_size();
    states[static_cast<std::size_t>(s - 1)] =
        euler_mean(model, states[static_cast<std::size_t>(s)], t, cvec);
    check_state(states[static_cast<std::size_t>(s - 1)], s - 1);
  }
  OdeResult out;
  out.sample.x = states[0];
  out.sample.condition = cond;
  out.sample.origin = "generated:" + model_id;
  out.states = std::move(states);
  return out;
}

std::vector<TrajectoryRecord> sample_sde_window(
    const FlowModel& model, const PromptSeq& cond, int window_start,
    int window_len, int n_branches, Rng& rng, const std::string& model_id,
    bool resample_init) {
  require(window_len >= 1, "sde window: window_len must be >= 1");
  require(window_start - window_len >= 0, "sde window: window extends below step 0");
  require(window_start <= model.t_steps, "sde window: window outside the trajectory");
  require(n_branches >= 2, "sde window: need at least 2 branches");

  const Tensor cvec = model.condition_vector(cond);
  const double dt = model.step_size();

  // shared deterministic prefix down to window_start
  std::vector<Tensor> prefix(static_cast<std::size_t>(model.t_steps - window_start) + 1);
  Rng init_rng = rng.stream(0);
  prefix[0] = initial_noise(model, init_rng);
  for (int s = model.t_steps; s > window_start; --s) {
    const double t = s * dt;
    const std::size_t i = static_cast<std::size_t>(model.t_steps - s);
    prefix[i + 1] = euler_mean(model, prefix[i], t, cvec);
    check_state(prefix[i + 1], s - 1);
  }

  std::vector<TrajectoryRecord> records;
  records.reserve(static_cast<std::size_t>(n_branches));
  for (int b = 0; b < n_branches; ++b) {
    Rng branch_rng = rng.stream(static_cast<std::uint64_t>(b) + 1);
    TrajectoryRecord rec;
    rec.window_start = window_start;
    rec.window_len = window_len;
    rec.condition = cond;
    rec.states.assign(static_cast<std::size_t>(model.t_steps) + 1, Tensor());
    if (resample_init) {
      rec.states[static_cast<std::size_t>(model.t_steps)] = initial_noise(model, branch_rng);
      for (int s = model.t_steps; s > window_start; --s) {
        const double t = s * dt;
        rec.states[static_cast<std::size_t>(s - 1)] =
            euler_mean(model, rec.states[static_cast<std::size_t>(s)], t, cvec);
      }
    } else {
      for (int s = model.t_steps; s >= window_start; --s) {
        rec.states[static_cast<std::size_t>(s)] =
            prefix[static_cast<std::size_t>(model.t_steps - s)];
      }
    }

    for (int s = window_start; s > window_start - window_len; --s) {
      const double t = s * dt;
      const double sigma = model.sigma_at(t);
      WindowStep ws;
      ws.step = s;
      ws.t = t;
      ws.sigma = sigma;
      ws.x_from = rec.states[static_cast<std::size_t>(s)];
      ws.mean_old = euler_mean(model, ws.x_from, t, cvec);
      ws.x_to = ws.mean_old;
      for (std::size_t j = 0; j < ws.x_to.size(); ++j) {
        ws.x_to.data[j] += sigma * branch_rng.normal();
      }
      ws.logdensity_old = sigma > 0.0
                              ? gaussian_logdensity(ws.x_to, ws.mean_old, sigma)
                              : 0.0;
      require_finite(ws.logdensity_old, "window transition log-density");
      rec.states[static_cast<std::size_t>(s - 1)] = ws.x_to;
      check_state(ws.x_to, s - 1);
      rec.window.push_back(std::move(ws));
    }

    for (int s = window_start - window_len; s >= 1; --s) {
      const double t = s * dt;
      rec.states[static_cast<std::size_t>(s - 1)] =
          euler_mean(model, rec.states[static_cast<std::size_t>(s)], t, cvec);
      check_state(rec.states[static_cast<std::size_t>(s - 1)], s - 1);
    }

    rec.final_sample.x = rec.states[0];
    rec.final_sample.condition = cond;
    rec.final_sample.origin = "generated:" + model_id;
    records.push_back(std::move(rec));
  }
  return records;
}

double gaussian_logdensity(const Tensor& x, const Tensor& mean, double sigma) {
  require(sigma > 0.0, "gaussian_logdensity: sigma must be positive");
  const double d = static_cast<double>(x.size());
  return -0.5 * d * std::log(2.0 * M_PI * sigma * sigma) -
         squared_distance(x, mean) / (2.0 * sigma * sigma);
}

double transition_logdensity(const FlowModel& model, const WindowStep& step,
                             const PromptSeq& cond) {
  require(step.sigma > 0.0,
          "transition_logdensity: sigma is zero (eta must be positive)");
  const Tensor cvec = model.condition_vector(cond);
  const Tensor mean = euler_mean(model, step.x_from, step.t, cvec);
  return gaussian_logdensity(step.x_to, mean, step.sigma);
}

void transition_logdensity_backward(const FlowModel& model,
                                    const WindowStep& step,
                                    const PromptSeq& cond, double upstream,
                                    FlowGrads& grads) {
  require(step.sigma > 0.0, "transition_logdensity_backward: sigma is zero");
  const Tensor cvec = model.condition_vector(cond);
  const Tensor mean = euler_mean(model, step.x_from, step.t, cvec);
  const double inv_var = 1.0 / (step.sigma * step.sigma);
  // dlogp/dmean = (x_to - mean)/sigma^2 ; mean = x_from - dt * v
  Tensor upstream_v = Tensor::zeros(mean.shape);
  for (std::size_t j = 0; j < mean.size(); ++j) {
    upstream_v.data[j] =
        upstream * (step.x_to.data[j] - mean.data[j]) * inv_var * (-model.step_size());
  }
  velocity_backward(model, step.x_from, step.t, cond, upstream_v, grads);
}

}  // namespace detgen

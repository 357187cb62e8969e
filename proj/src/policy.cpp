#include "detgen/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "detgen/adam.hpp"
#include "detgen/common.hpp"

namespace detgen {
namespace {

Tensor encoder_input(const PromptPolicy& p, const std::vector<int>& prefix,
                     int user_class, int position) {
  const std::size_t emb = p.embed_dim();
  const std::size_t tmax = static_cast<std::size_t>(p.prompt_len());
  const std::size_t k = static_cast<std::size_t>(p.world.num_classes);
  Tensor in = Tensor::zeros({emb + tmax + k});
  require(!prefix.empty(), "policy: prefix must contain at least the CLS token");
  for (int t : prefix) {
    for (std::size_t j = 0; j < emb; ++j)
      in.data[j] += p.embedding.at(static_cast<std::size_t>(t), j);
  }
  const double inv = 1.0 / static_cast<double>(prefix.size());
  for (std::size_t j = 0; j < emb; ++j) in.data[j] *= inv;
  require(position >= 1 && position < p.prompt_len(), "policy: position out of range");
  in.data[emb + static_cast<std::size_t>(position)] = 1.0;
  require(user_class >= 0 && user_class < p.world.num_classes,
          "policy: user class out of range");
  in.data[emb + tmax + static_cast<std::size_t>(user_class)] = 1.0;
  return in;
}

// CLS tokens are structural (copied from the user prompt, never generated),
// so they carry zero mass at every sampled position.
Tensor masked_softmax(const Tensor& logits, double temperature,
                      const Vocabulary& vocab) {
  Tensor p = Tensor::zeros(logits.shape);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (vocab.is_cls(static_cast<int>(i))) continue;
    mx = std::max(mx, logits.data[i] / temperature);
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (vocab.is_cls(static_cast<int>(i))) continue;
    p.data[i] = std::exp(logits.data[i] / temperature - mx);
    sum += p.data[i];
  }
  p *= 1.0 / sum;
  return p;
}

int sample_categorical(const Tensor& probs, Rng& rng) {
  const double u = rng.uniform01();
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs.data[i];
    if (u < cum) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

int argmax(const Tensor& t) {
  return static_cast<int>(std::max_element(t.data.begin(), t.data.end()) - t.data.begin());
}

}  // namespace

PromptPolicy PromptPolicy::create(const WorldSpec& world, const Vocabulary& vocab,
                                  const PolicyConfig& cfg, Rng& rng) {
  require(cfg.embed_dim >= 1, "policy: embed_dim must be >= 1");
  require(cfg.temperature >= 0.0, "policy: temperature must be >= 0");
  PromptPolicy p;
  p.world = world;
  p.vocab = vocab;
  p.temperature = cfg.temperature;
  Rng emb_rng = rng.named("embedding");
  p.embedding = Tensor::matrix(static_cast<std::size_t>(vocab.size()),
                               static_cast<std::size_t>(cfg.embed_dim));
  const double bound = std::sqrt(6.0 / static_cast<double>(vocab.size() + cfg.embed_dim));
  for (double& v : p.embedding.data) v = emb_rng.uniform(-bound, bound);

  std::vector<std::size_t> sizes;
  sizes.push_back(static_cast<std::size_t>(cfg.embed_dim + world.prompt_len + world.num_classes));
  for (int h : cfg.hidden) sizes.push_back(static_cast<std::size_t>(h));
  sizes.push_back(static_cast<std::size_t>(vocab.size()));
  Rng enc_rng = rng.named("encoder");
  p.encoder = Mlp::create(sizes, enc_rng);
  return p;
}

nlohmann::json PromptPolicy::to_json() const {
  nlohmann::json j;
  j["world"] = world.to_json();
  j["encoder"] = encoder.to_json();
  j["embedding"] = embedding.data;
  j["embed_dim"] = embedding.cols();
  j["temperature"] = temperature;
  nlohmann::json vocab_names = nlohmann::json::array();
  for (int t = 0; t < vocab.size(); ++t) vocab_names.push_back(vocab.token_name(t));
  j["vocabulary"] = std::move(vocab_names);
  return j;
}

PromptPolicy PromptPolicy::from_json(const nlohmann::json& j) {
  PromptPolicy p;
  p.world = WorldSpec::from_json(j.at("world"));
  p.vocab = Vocabulary(p.world);
  p.encoder = Mlp::from_json(j.at("encoder"));
  p.temperature = j.at("temperature").get<double>();
  const std::size_t emb = j.at("embed_dim").get<std::size_t>();
  auto flat = j.at("embedding").get<std::vector<double>>();
  require(flat.size() == emb * static_cast<std::size_t>(p.vocab.size()),
          "policy checkpoint: embedding size mismatch");
  p.embedding = Tensor({static_cast<std::size_t>(p.vocab.size()), emb}, std::move(flat));
  return p;
}

PolicyGrads PolicyGrads::zeros_like(const PromptPolicy& p) {
  PolicyGrads g;
  g.encoder = MlpGrads::zeros_like(p.encoder);
  g.embedding = Tensor::zeros(p.embedding.shape);
  return g;
}

void PolicyGrads::add_scaled(const PolicyGrads& other, double s) {
  encoder.add_scaled(other.encoder, s);
  for (std::size_t i = 0; i < embedding.size(); ++i)
    embedding.data[i] += s * other.embedding.data[i];
}

void PolicyGrads::scale(double s) {
  encoder.scale(s);
  embedding *= s;
}

std::vector<ParamRef> policy_param_refs(PromptPolicy& p, const PolicyGrads* grads) {
  std::vector<ParamRef> refs = param_refs("encoder", p.encoder,
                                          grads ? &grads->encoder : nullptr);
  refs.push_back({"embedding", &p.embedding, grads ? &grads->embedding : nullptr});
  return refs;
}

bool position_forced(const Vocabulary& vocab, const std::vector<int>& prefix) {
  for (int t : prefix) {
    if (vocab.is_pad(t)) return true;
  }
  return false;
}

Tensor position_probs(const PromptPolicy& policy, const std::vector<int>& prefix,
                      int user_class, int position) {
  const std::size_t vs = static_cast<std::size_t>(policy.vocab.size());
  if (position_forced(policy.vocab, prefix)) {
    Tensor p = Tensor::zeros({vs});
    p.data[static_cast<std::size_t>(policy.vocab.pad_token())] = 1.0;
    return p;
  }
  const Tensor logits =
      policy.encoder.forward(encoder_input(policy, prefix, user_class, position));
  if (policy.temperature <= 0.0) {
    Tensor p = Tensor::zeros({vs});
    const Tensor masked = masked_softmax(logits, 1.0, policy.vocab);
    p.data[static_cast<std::size_t>(argmax(masked))] = 1.0;
    return p;
  }
  return masked_softmax(logits, policy.temperature, policy.vocab);
}

void position_logits_backward(const PromptPolicy& policy,
                              const std::vector<int>& prefix, int user_class,
                              int position, const Tensor& logits_grad,
                              PolicyGrads& grads) {
  require(!position_forced(policy.vocab, prefix),
          "position_logits_backward: position is PAD-forced");
  const Tensor in = encoder_input(policy, prefix, user_class, position);
  ForwardCache cache = policy.encoder.forward_cached(in);
  const Tensor in_grad = policy.encoder.backward(cache, logits_grad, grads.encoder);
  // scatter the context-mean slice back into the embedding rows
  const double inv = 1.0 / static_cast<double>(prefix.size());
  for (int t : prefix) {
    for (std::size_t j = 0; j < policy.embed_dim(); ++j) {
      grads.embedding.at(static_cast<std::size_t>(t), j) += inv * in_grad.data[j];
    }
  }
}

std::vector<PromptTrajectory> rollout(const PromptPolicy& policy,
                                      const PromptPolicy& reference,
                                      const PromptSeq& user, int n, Rng& rng) {
  require(n >= 1, "rollout: n must be >= 1");
  const int tmax = policy.prompt_len();
  std::vector<PromptTrajectory> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng traj_rng = rng.stream(static_cast<std::uint64_t>(i));
    PromptTrajectory traj;
    traj.prompt.user_class = user.user_class;
    traj.prompt.tokens.assign(static_cast<std::size_t>(tmax), policy.vocab.pad_token());
    traj.prompt.tokens[0] = user.tokens[0];
    traj.logp_old.assign(static_cast<std::size_t>(tmax), 0.0);
    traj.logp_ref.assign(static_cast<std::size_t>(tmax), 0.0);

    std::vector<int> prefix = {user.tokens[0]};
    for (int pos = 1; pos < tmax; ++pos) {
      const Tensor probs = position_probs(policy, prefix, user.user_class, pos);
      int tok;
      if (position_forced(policy.vocab, prefix) || policy.temperature <= 0.0) {
        tok = argmax(probs);
      } else {
        tok = sample_categorical(probs, traj_rng);
      }
      traj.prompt.tokens[static_cast<std::size_t>(pos)] = tok;
      const double p_old = probs.data[static_cast<std::size_t>(tok)];
      traj.logp_old[static_cast<std::size_t>(pos)] = p_old >= 1.0 ? 0.0 : std::log(p_old);
      const Tensor ref_probs = position_probs(reference, prefix, user.user_class, pos);
      const double p_ref = ref_probs.data[static_cast<std::size_t>(tok)];
      traj.logp_ref[static_cast<std::size_t>(pos)] =
          p_ref >= 1.0 ? 0.0 : std::log(p_ref);
      prefix.push_back(tok);
    }
    out.push_back(std::move(traj));
  }
  return out;
}

PromptSeq greedy_decode(const PromptPolicy& policy, const PromptSeq& user) {
  const int tmax = policy.prompt_len();
  PromptSeq seq;
  seq.user_class = user.user_class;
  seq.tokens.assign(static_cast<std::size_t>(tmax), policy.vocab.pad_token());
  seq.tokens[0] = user.tokens[0];
  std::vector<int> prefix = {user.tokens[0]};
  for (int pos = 1; pos < tmax; ++pos) {
    const Tensor probs = position_probs(policy, prefix, user.user_class, pos);
    const int tok = argmax(probs);
    seq.tokens[static_cast<std::size_t>(pos)] = tok;
    prefix.push_back(tok);
  }
  return seq;
}

double token_logprob(const PromptPolicy& policy, const PromptTrajectory& traj,
                     int position) {
  require(position >= 1 && position < policy.prompt_len(),
          "token_logprob: position out of generated range");
  std::vector<int> prefix(traj.prompt.tokens.begin(),
                          traj.prompt.tokens.begin() + position);
  const int tok = traj.prompt.tokens[static_cast<std::size_t>(position)];
  if (position_forced(policy.vocab, prefix)) {
    require(policy.vocab.is_pad(tok), "token_logprob: forced position holds non-PAD");
    return 0.0;
  }
  const Tensor probs = position_probs(policy, prefix, traj.prompt.user_class, position);
  return std::log(probs.data[static_cast<std::size_t>(tok)]);
}

std::vector<SftPair> template_corpus(const WorldSpec& world, const Vocabulary& vocab,
                                     int pairs, Rng& rng) {
  require(pairs >= 1, "template_corpus: pairs must be >= 1");
  std::vector<SftPair> out;
  out.reserve(static_cast<std::size_t>(pairs));
  for (int i = 0; i < pairs; ++i) {
    const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(world.num_classes)));
    const int m = static_cast<int>(rng.below(static_cast<std::uint64_t>(world.sub_modes)));
    const int s = static_cast<int>(rng.below(static_cast<std::uint64_t>(world.style_tokens)));
    SftPair pair;
    pair.user_class = k;
    pair.tokens = caption_prompt(world, vocab, k, m, s).tokens;
    out.push_back(std::move(pair));
  }
  return out;
}

SftResult sft_policy(PromptPolicy& policy, const std::vector<SftPair>& corpus,
                     const SftConfig& cfg, Rng& rng) {
  require(!corpus.empty(), "sft_policy: empty corpus");
  Adam opt({cfg.lr, 0.9, 0.999, 1e-8});
  SftResult result;
  Rng batch_rng = rng.named("batches");
  const int tmax = policy.prompt_len();
  const int steps_per_epoch =
      std::max<int>(1, static_cast<int>(corpus.size()) / cfg.batch);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    int epoch_terms = 0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      PolicyGrads grads = PolicyGrads::zeros_like(policy);
      double loss = 0.0;
      int terms = 0;
      for (int b = 0; b < cfg.batch; ++b) {
        const SftPair& pair = corpus[batch_rng.below(corpus.size())];
        std::vector<int> prefix = {pair.tokens[0]};
        for (int pos = 1; pos < tmax; ++pos) {
          if (position_forced(policy.vocab, prefix)) break;
          const int target = pair.tokens[static_cast<std::size_t>(pos)];
          const Tensor in = encoder_input(policy, prefix, pair.user_class, pos);
          ForwardCache cache = policy.encoder.forward_cached(in);
          const Tensor probs = masked_softmax(cache.post.back(), 1.0, policy.vocab);
          loss -= std::log(std::max(probs.data[static_cast<std::size_t>(target)], 1e-300));
          ++terms;
          Tensor lg = probs;
          lg.data[static_cast<std::size_t>(target)] -= 1.0;
          const Tensor in_grad = policy.encoder.backward(cache, lg, grads.encoder);
          const double inv = 1.0 / static_cast<double>(prefix.size());
          for (int t : prefix) {
            for (std::size_t j = 0; j < policy.embed_dim(); ++j)
              grads.embedding.at(static_cast<std::size_t>(t), j) += inv * in_grad.data[j];
          }
          prefix.push_back(target);
        }
      }
      if (terms == 0) continue;
      grads.scale(1.0 / terms);
      if (!std::isfinite(loss)) {
        throw NumericError("sft_policy: non-finite loss at epoch " + std::to_string(epoch));
      }
      opt.step(policy_param_refs(policy, &grads));
      epoch_loss += loss;
      epoch_terms += terms;
    }
    result.epoch_loss.push_back(epoch_terms > 0 ? epoch_loss / epoch_terms : 0.0);
  }
  return result;
}

double template_valid_fraction(const PromptPolicy& policy, int samples, Rng& rng) {
  require(samples >= 1, "template_valid_fraction: samples must be >= 1");
  int valid = 0;
  for (int i = 0; i < samples; ++i) {
    const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(policy.world.num_classes)));
    const PromptSeq user = user_prompt(policy.world, policy.vocab, k);
    Rng roll_rng = rng.stream(static_cast<std::uint64_t>(i) + 1000);
    const auto trajs = rollout(policy, policy, user, 1, roll_rng);
    const auto& t = trajs[0].prompt.tokens;
    bool ok = policy.vocab.is_cls(t[0]) && policy.vocab.is_sub(t[1]) &&
              policy.vocab.is_style(t[2]);
    for (std::size_t p = 3; p < t.size() && ok; ++p) ok = policy.vocab.is_pad(t[p]);
    if (ok) ++valid;
  }
  return static_cast<double>(valid) / samples;
}

}  // namespace detgen

#pragma once

#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "detgen/mlp.hpp"
#include "detgen/rng.hpp"
#include "detgen/world.hpp"

namespace detgen {

struct PolicyConfig {
  int embed_dim = 16;
  std::vector<int> hidden = {64, 64};
  double temperature = 1.0;
};

// Autoregressive categorical policy over the prompt vocabulary. Context is
// (mean of previous-token embeddings | position one-hot | user-class
// one-hot). PAD absorbs: once emitted, every later position is PAD with
// probability one and is never scored.
struct PromptPolicy {
  WorldSpec world;
  Vocabulary vocab;
  Tensor embedding;  // [vocab_size, embed_dim]
  Mlp encoder;       // [embed_dim + prompt_len + K -> hidden... -> vocab_size]
  double temperature = 1.0;

  static PromptPolicy create(const WorldSpec& world, const Vocabulary& vocab,
                             const PolicyConfig& cfg, Rng& rng);

  int prompt_len() const { return world.prompt_len; }
  std::size_t embed_dim() const { return embedding.cols(); }

  nlohmann::json to_json() const;
  static PromptPolicy from_json(const nlohmann::json& j);
};

struct PolicyGrads {
  MlpGrads encoder;
  Tensor embedding;

  static PolicyGrads zeros_like(const PromptPolicy& p);
  void add_scaled(const PolicyGrads& other, double s);
  void scale(double s);
};

std::vector<ParamRef> policy_param_refs(PromptPolicy& p, const PolicyGrads* grads);

// True when the prefix already contains PAD, i.e. the position is forced.
bool position_forced(const Vocabulary& vocab, const std::vector<int>& prefix);

// Distribution over the vocabulary at `position` given the running sequence
// prefix tokens[0..position). Forced positions return a PAD point mass.
Tensor position_probs(const PromptPolicy& policy, const std::vector<int>& prefix,
                      int user_class, int position);

// Backprop an arbitrary gradient on the raw encoder logits at a non-forced
// position.
void position_logits_backward(const PromptPolicy& policy,
                              const std::vector<int>& prefix, int user_class,
                              int position, const Tensor& logits_grad,
                              PolicyGrads& grads);

struct PromptTrajectory {
  PromptSeq prompt;
  std::vector<double> logp_old;  // indexed by position; [0] unused
  std::vector<double> logp_ref;
};

// Autoregressive sampling from `policy` (theta_old), recording per-position
// log-probs under both the sampler and `reference`. temperature == 0 decodes
// greedily.
std::vector<PromptTrajectory> rollout(const PromptPolicy& policy,
                                      const PromptPolicy& reference,
                                      const PromptSeq& user, int n, Rng& rng);

PromptSeq greedy_decode(const PromptPolicy& policy, const PromptSeq& user);

// Log-prob of the recorded token under the CURRENT parameters, conditioning
// on the recorded prefix. Forced positions return 0 exactly.
double token_logprob(const PromptPolicy& policy, const PromptTrajectory& traj,
                     int position);

struct SftPair {
  int user_class = 0;
  std::vector<int> tokens;  // full target sequence, PAD-absorbed
};

// Template corpus: CLS_k -> [CLS_k, SUB_uniform, STYLE_uniform, PAD...].
std::vector<SftPair> template_corpus(const WorldSpec& world, const Vocabulary& vocab,
                                     int pairs, Rng& rng);

struct SftConfig {
  int epochs = 20;
  int batch = 64;
  double lr = 1e-3;
};

struct SftResult {
  std::vector<double> epoch_loss;
};

SftResult sft_policy(PromptPolicy& policy, const std::vector<SftPair>& corpus,
                     const SftConfig& cfg, Rng& rng);

// Fraction of sampled sequences shaped [CLS, SUB, STYLE, PAD...].
double template_valid_fraction(const PromptPolicy& policy, int samples, Rng& rng);

}  // namespace detgen

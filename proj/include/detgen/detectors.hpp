#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "detgen/mlp.hpp"
#include "detgen/rng.hpp"
#include "detgen/world.hpp"

namespace detgen {

struct DetectorLogits {
  double fake = 0.0;
  double real = 0.0;
};

// Content-level summary statistics: distances to the world's mode structure
// plus a local-density proxy against a frozen set of real anchor points.
struct StatExtractor {
  WorldSpec world;
  Tensor anchors;     // [n_anchors, dim], frozen at training time
  int density_k = 5;  // k-th nearest anchor distance

  std::size_t num_stats() const { return static_cast<std::size_t>(world.dim) + 4; }
  std::vector<std::string> stat_names() const;
  Tensor extract(const Tensor& x) const;
  // d(stats)/d(x), rows = stats, cols = dim (piecewise smooth).
  Tensor extract_jacobian(const Tensor& x) const;
};

// Linear head over z-scored statistics, logits ordered [fake, real].
struct SemanticDetector {
  StatExtractor stats;
  Tensor stat_mean;  // frozen normalization
  Tensor stat_std;
  Mlp head;          // [num_stats -> 2], no hidden layer

  DetectorLogits logits(const Tensor& x) const;
  nlohmann::json to_json() const;
  static SemanticDetector from_json(const nlohmann::json& j);
};

// Raw-coordinate fake/real classifier; sigmoid(logit) = P(fake).
struct FeatureDetector {
  Mlp net;  // [dim -> hidden -> hidden -> 1]

  double fake_logit(const Tensor& x) const;
  double fake_probability(const Tensor& x) const;
  double real_probability(const Tensor& x) const { return 1.0 - fake_probability(x); }
  nlohmann::json to_json() const;
  static FeatureDetector from_json(const nlohmann::json& j);
};

struct AlignmentClassifier {
  Mlp net;  // [dim -> hidden -> K]

  Tensor class_probs(const Tensor& x) const;
  int predict(const Tensor& x) const;
  nlohmann::json to_json() const;
  static AlignmentClassifier from_json(const nlohmann::json& j);
};

struct DetectorTrainConfig {
  int steps = 2000;
  int batch = 128;
  double lr = 1e-3;
  int feature_hidden = 48;
  int heldout_hidden = 96;
  int alignment_hidden = 32;
  int anchor_count = 512;
  int density_k = 5;
};

// Semantic + feature trained on one half of the data, the held-out detector
// on the disjoint other half with its own seed and width. All are frozen
// after this returns.
struct DetectorSuite {
  SemanticDetector semantic;
  FeatureDetector feature;
  FeatureDetector heldout;
  AlignmentClassifier alignment;

  nlohmann::json to_json() const;
  static DetectorSuite from_json(const nlohmann::json& j);
};

DetectorSuite train_detectors(const std::vector<Sample>& real,
                              const std::vector<Sample>& generated,
                              const WorldSpec& world,
                              const DetectorTrainConfig& cfg, Rng& rng);

AlignmentClassifier train_alignment(const std::vector<Sample>& real,
                                    const WorldSpec& world,
                                    const DetectorTrainConfig& cfg, Rng& rng);

// softmax([l_fake, l_real]) taken at the "real" component; stable for logit
// gaps up to ~700.
double semantic_reward(const SemanticDetector& det, const Sample& s);
double feature_reward(const FeatureDetector& det, const Sample& s);
double alignment_reward(const AlignmentClassifier& clf, const Sample& s,
                        int user_class);

// Input-space gradients (diagnostics only; training uses likelihood ratios).
Tensor semantic_reward_input_grad(const SemanticDetector& det, const Sample& s);
Tensor feature_reward_input_grad(const FeatureDetector& det, const Sample& s);
Tensor alignment_reward_input_grad(const AlignmentClassifier& clf,
                                   const Sample& s, int user_class);

struct StatContribution {
  std::string name;
  double contribution;  // signed share of the l_fake - l_real gap
};

// Per-statistic share of the logit gap; shares sum to gap minus the bias gap.
std::vector<StatContribution> semantic_report(const SemanticDetector& det,
                                              const Sample& s);

double classifier_accuracy(const AlignmentClassifier& clf,
                           const std::vector<Sample>& samples);

// Rank AUC of real-vs-fake separation given higher-is-more-fake scores.
double auc_from_scores(const std::vector<double>& fake_scores,
                       const std::vector<double>& real_scores);

}  // namespace detgen

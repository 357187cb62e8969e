#include "detgen/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "detgen/adam.hpp"
#include "detgen/common.hpp"

namespace detgen {
namespace {

double stable_sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// index of the nearest row of `points` to x, by Euclidean distance
std::size_t nearest_index(const Tensor& x, const std::vector<std::vector<double>>& points) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.size(); ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double diff = x.data[j] - points[i][j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

std::vector<std::vector<double>> fine_means(const WorldSpec& w) {
  std::vector<std::vector<double>> means;
  for (int k = 0; k < w.num_classes; ++k)
    for (int m = 0; m < w.sub_modes; ++m) means.push_back(w.fine_mode_mean(k, m));
  return means;
}

std::vector<std::vector<double>> class_means(const WorldSpec& w) {
  std::vector<std::vector<double>> means;
  for (int k = 0; k < w.num_classes; ++k) means.push_back(w.class_mean(k));
  return means;
}

double distance_to(const Tensor& x, const std::vector<double>& p) {
  double d = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double diff = x.data[j] - p[j];
    d += diff * diff;
  }
  return std::sqrt(d);
}

constexpr double kDistFloor = 1e-12;  // keeps distance gradients bounded

}  // namespace

std::vector<std::string> StatExtractor::stat_names() const {
  std::vector<std::string> names = {"dist_fine_mode", "dist_class_mean", "radial"};
  for (int j = 0; j < world.dim; ++j) names.push_back("absdev_" + std::to_string(j));
  names.push_back("density_knn" + std::to_string(density_k));
  return names;
}

Tensor StatExtractor::extract(const Tensor& x) const {
  require(x.size() == static_cast<std::size_t>(world.dim),
          "stat extractor: sample dimension mismatch");
  const auto fine = fine_means(world);
  const auto classes = class_means(world);
  Tensor out = Tensor::zeros({num_stats()});
  const std::size_t nf = nearest_index(x, fine);
  out.data[0] = distance_to(x, fine[nf]);
  out.data[1] = distance_to(x, classes[nearest_index(x, classes)]);
  out.data[2] = norm(x);
  for (int j = 0; j < world.dim; ++j) {
    out.data[3 + static_cast<std::size_t>(j)] =
        std::abs(x.data[static_cast<std::size_t>(j)] - fine[nf][static_cast<std::size_t>(j)]);
  }
  // distance to the k-th nearest anchor
  std::vector<double> dists;
  dists.reserve(anchors.rows());
  for (std::size_t a = 0; a < anchors.rows(); ++a) {
    double d = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double diff = x.data[j] - anchors.at(a, j);
      d += diff * diff;
    }
    dists.push_back(std::sqrt(d));
  }
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(density_k), dists.size()) - 1;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(k), dists.end());
  out.data[num_stats() - 1] = dists[k];
  return out;
}

Tensor StatExtractor::extract_jacobian(const Tensor& x) const {
  const auto fine = fine_means(world);
  const auto classes = class_means(world);
  const std::size_t d = x.size();
  Tensor jac = Tensor::matrix(num_stats(), d);

  const std::size_t nf = nearest_index(x, fine);
  const double df = std::max(distance_to(x, fine[nf]), kDistFloor);
  for (std::size_t j = 0; j < d; ++j) jac.at(0, j) = (x.data[j] - fine[nf][j]) / df;

  const std::size_t nc = nearest_index(x, classes);
  const double dc = std::max(distance_to(x, classes[nc]), kDistFloor);
  for (std::size_t j = 0; j < d; ++j) jac.at(1, j) = (x.data[j] - classes[nc][j]) / dc;

  const double r = std::max(norm(x), kDistFloor);
  for (std::size_t j = 0; j < d; ++j) jac.at(2, j) = x.data[j] / r;

  for (std::size_t j = 0; j < d; ++j) {
    const double diff = x.data[j] - fine[nf][j];
    jac.at(3 + j, j) = diff >= 0.0 ? 1.0 : -1.0;
  }

  // k-th nearest anchor: gradient through the selected anchor only
  std::vector<std::pair<double, std::size_t>> dists;
  for (std::size_t a = 0; a < anchors.rows(); ++a) {
    double dd = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = x.data[j] - anchors.at(a, j);
      dd += diff * diff;
    }
    dists.emplace_back(std::sqrt(dd), a);
  }
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(density_k), dists.size()) - 1;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(k), dists.end());
  const std::size_t sel = dists[k].second;
  const double da = std::max(dists[k].first, kDistFloor);
  for (std::size_t j = 0; j < d; ++j) {
    jac.at(num_stats() - 1, j) = (x.data[j] - anchors.at(sel, j)) / da;
  }
  return jac;
}

DetectorLogits SemanticDetector::logits(const Tensor& x) const {
  Tensor phi = stats.extract(x);
  Tensor z = Tensor::zeros(phi.shape);
  for (std::size_t i = 0; i < phi.size(); ++i) {
    z.data[i] = (phi.data[i] - stat_mean.data[i]) / stat_std.data[i];
  }
  const Tensor out = head.forward(z);
  return {out.data[0], out.data[1]};
}

nlohmann::json SemanticDetector::to_json() const {
  nlohmann::json j;
  j["world"] = stats.world.to_json();
  j["anchors"] = stats.anchors.data;
  j["anchor_count"] = stats.anchors.rows();
  j["density_k"] = stats.density_k;
  j["stat_mean"] = stat_mean.data;
  j["stat_std"] = stat_std.data;
  j["head"] = head.to_json();
  return j;
}

SemanticDetector SemanticDetector::from_json(const nlohmann::json& j) {
  SemanticDetector d;
  d.stats.world = WorldSpec::from_json(j.at("world"));
  const std::size_t rows = j.at("anchor_count").get<std::size_t>();
  auto flat = j.at("anchors").get<std::vector<double>>();
  const std::size_t cols = flat.size() / rows;
  d.stats.anchors = Tensor({rows, cols}, std::move(flat));
  d.stats.density_k = j.at("density_k").get<int>();
  d.stat_mean = Tensor::vector(j.at("stat_mean").get<std::vector<double>>());
  d.stat_std = Tensor::vector(j.at("stat_std").get<std::vector<double>>());
  d.head = Mlp::from_json(j.at("head"));
  return d;
}

double FeatureDetector::fake_logit(const Tensor& x) const {
  return net.forward(x).data[0];
}

double FeatureDetector::fake_probability(const Tensor& x) const {
  return stable_sigmoid(fake_logit(x));
}

nlohmann::json FeatureDetector::to_json() const {
  nlohmann::json j;
  j["net"] = net.to_json();
  return j;
}

FeatureDetector FeatureDetector::from_json(const nlohmann::json& j) {
  return {Mlp::from_json(j.at("net"))};
}

Tensor AlignmentClassifier::class_probs(const Tensor& x) const {
  Tensor logits = net.forward(x);
  double mx = logits.data[0];
  for (double v : logits.data) mx = std::max(mx, v);
  double sum = 0.0;
  Tensor p = Tensor::zeros(logits.shape);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p.data[i] = std::exp(logits.data[i] - mx);
    sum += p.data[i];
  }
  p *= 1.0 / sum;
  return p;
}

int AlignmentClassifier::predict(const Tensor& x) const {
  const Tensor p = class_probs(x);
  return static_cast<int>(std::max_element(p.data.begin(), p.data.end()) - p.data.begin());
}

nlohmann::json AlignmentClassifier::to_json() const {
  nlohmann::json j;
  j["net"] = net.to_json();
  return j;
}

AlignmentClassifier AlignmentClassifier::from_json(const nlohmann::json& j) {
  return {Mlp::from_json(j.at("net"))};
}

nlohmann::json DetectorSuite::to_json() const {
  nlohmann::json j;
  j["semantic"] = semantic.to_json();
  j["feature"] = feature.to_json();
  j["heldout"] = heldout.to_json();
  j["alignment"] = alignment.to_json();
  return j;
}

DetectorSuite DetectorSuite::from_json(const nlohmann::json& j) {
  DetectorSuite s;
  s.semantic = SemanticDetector::from_json(j.at("semantic"));
  s.feature = FeatureDetector::from_json(j.at("feature"));
  s.heldout = FeatureDetector::from_json(j.at("heldout"));
  s.alignment = AlignmentClassifier::from_json(j.at("alignment"));
  return s;
}

namespace {

// one minibatch step of sigmoid-BCE on fake(1)/real(0) labels
void bce_step(Mlp& net, Adam& opt, const std::vector<const Tensor*>& xs,
              const std::vector<double>& labels) {
  const std::size_t n = xs.size();
  Tensor batch = Tensor::matrix(n, net.input_size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < xs[i]->size(); ++j) batch.at(i, j) = xs[i]->data[j];
  }
  ForwardCache cache = net.forward_cached(batch);
  const Tensor& z = cache.post.back();
  Tensor upstream = Tensor::matrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    upstream.at(i, 0) = (stable_sigmoid(z.at(i, 0)) - labels[i]) / static_cast<double>(n);
  }
  MlpGrads grads = MlpGrads::zeros_like(net);
  net.backward(cache, upstream, grads);
  opt.step(param_refs("feature", net, &grads));
}

FeatureDetector train_feature_net(const std::vector<const Tensor*>& real,
                                  const std::vector<const Tensor*>& fake,
                                  int dim, int hidden, const DetectorTrainConfig& cfg,
                                  Rng rng) {
  Rng init_rng = rng.named("init");
  Mlp net = Mlp::create({static_cast<std::size_t>(dim), static_cast<std::size_t>(hidden),
                         static_cast<std::size_t>(hidden), 1},
                        init_rng);
  Adam opt({cfg.lr, 0.9, 0.999, 1e-8});
  Rng batch_rng = rng.named("batches");
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const Tensor*> xs;
    std::vector<double> labels;
    for (int b = 0; b < cfg.batch; ++b) {
      if (batch_rng.coin()) {
        xs.push_back(fake[batch_rng.below(fake.size())]);
        labels.push_back(1.0);
      } else {
        xs.push_back(real[batch_rng.below(real.size())]);
        labels.push_back(0.0);
      }
    }
    bce_step(net, opt, xs, labels);
  }
  return {std::move(net)};
}

}  // namespace

DetectorSuite train_detectors(const std::vector<Sample>& real,
                              const std::vector<Sample>& generated,
                              const WorldSpec& world,
                              const DetectorTrainConfig& cfg, Rng& rng) {
  require(!real.empty() && !generated.empty(),
          "train_detectors: both real and generated sets must be nonempty");
  require(real.size() >= 4 && generated.size() >= 4,
          "train_detectors: sets too small to split");

  const auto half = [](const std::vector<Sample>& v, bool second) {
    std::vector<const Tensor*> out;
    const std::size_t mid = v.size() / 2;
    const std::size_t lo = second ? mid : 0;
    const std::size_t hi = second ? v.size() : mid;
    for (std::size_t i = lo; i < hi; ++i) out.push_back(&v[i].x);
    return out;
  };
  const auto real_a = half(real, false);
  const auto real_b = half(real, true);
  const auto fake_a = half(generated, false);
  const auto fake_b = half(generated, true);

  DetectorSuite suite;

  // --- semantic detector: frozen anchors + stat normalization + linear head
  {
    Rng sem_rng = rng.named("semantic");
    StatExtractor ex;
    ex.world = world;
    ex.density_k = cfg.density_k;
    const int na = std::min<int>(cfg.anchor_count, static_cast<int>(real_a.size()));
    require(na >= cfg.density_k, "train_detectors: too few anchors for density stat");
    ex.anchors = Tensor::matrix(static_cast<std::size_t>(na), static_cast<std::size_t>(world.dim));
    for (int a = 0; a < na; ++a) {
      const Tensor* p = real_a[sem_rng.below(real_a.size())];
      for (int j = 0; j < world.dim; ++j)
        ex.anchors.at(static_cast<std::size_t>(a), static_cast<std::size_t>(j)) =
            p->data[static_cast<std::size_t>(j)];
    }

    std::vector<Tensor> phis;
    std::vector<double> labels;  // fake=1
    for (const Tensor* x : real_a) {
      phis.push_back(ex.extract(*x));
      labels.push_back(0.0);
    }
    for (const Tensor* x : fake_a) {
      phis.push_back(ex.extract(*x));
      labels.push_back(1.0);
    }
    const std::size_t ns = ex.num_stats();
    Tensor mean = Tensor::zeros({ns});
    Tensor stdg = Tensor::zeros({ns});
    for (const auto& p : phis)
      for (std::size_t i = 0; i < ns; ++i) mean.data[i] += p.data[i];
    mean *= 1.0 / static_cast<double>(phis.size());
    for (const auto& p : phis)
      for (std::size_t i = 0; i < ns; ++i) {
        const double d = p.data[i] - mean.data[i];
        stdg.data[i] += d * d;
      }
    for (std::size_t i = 0; i < ns; ++i) {
      stdg.data[i] = std::sqrt(stdg.data[i] / static_cast<double>(phis.size())) + 1e-8;
    }
    std::vector<Tensor> zs;
    zs.reserve(phis.size());
    for (const auto& p : phis) {
      Tensor z = Tensor::zeros({ns});
      for (std::size_t i = 0; i < ns; ++i) z.data[i] = (p.data[i] - mean.data[i]) / stdg.data[i];
      zs.push_back(std::move(z));
    }

    Rng init_rng = sem_rng.named("init");
    Mlp head = Mlp::create({ns, 2}, init_rng);
    Adam opt({cfg.lr, 0.9, 0.999, 1e-8});
    Rng batch_rng = sem_rng.named("batches");
    for (int step = 0; step < cfg.steps; ++step) {
      Tensor batch = Tensor::matrix(static_cast<std::size_t>(cfg.batch), ns);
      std::vector<double> ys(static_cast<std::size_t>(cfg.batch));
      for (int b = 0; b < cfg.batch; ++b) {
        const std::size_t idx = batch_rng.below(zs.size());
        for (std::size_t i = 0; i < ns; ++i) batch.at(static_cast<std::size_t>(b), i) = zs[idx].data[i];
        ys[static_cast<std::size_t>(b)] = labels[idx];
      }
      ForwardCache cache = head.forward_cached(batch);
      const Tensor& logits = cache.post.back();
      Tensor upstream = Tensor::matrix(static_cast<std::size_t>(cfg.batch), 2);
      for (int b = 0; b < cfg.batch; ++b) {
        const double lf = logits.at(static_cast<std::size_t>(b), 0);
        const double lr = logits.at(static_cast<std::size_t>(b), 1);
        const double mx = std::max(lf, lr);
        const double ef = std::exp(lf - mx);
        const double er = std::exp(lr - mx);
        const double pf = ef / (ef + er);
        // label 1.0 means fake -> target index 0
        const double tf = ys[static_cast<std::size_t>(b)];
        upstream.at(static_cast<std::size_t>(b), 0) = (pf - tf) / cfg.batch;
        upstream.at(static_cast<std::size_t>(b), 1) = ((1.0 - pf) - (1.0 - tf)) / cfg.batch;
      }
      MlpGrads grads = MlpGrads::zeros_like(head);
      head.backward(cache, upstream, grads);
      opt.step(param_refs("semantic", head, &grads));
    }
    suite.semantic = {std::move(ex), std::move(mean), std::move(stdg), std::move(head)};
  }

  suite.feature = train_feature_net(real_a, fake_a, world.dim, cfg.feature_hidden,
                                    cfg, rng.named("feature"));
  suite.heldout = train_feature_net(real_b, fake_b, world.dim, cfg.heldout_hidden,
                                    cfg, rng.named("heldout"));
  suite.alignment = train_alignment(real, world, cfg, rng);
  return suite;
}

AlignmentClassifier train_alignment(const std::vector<Sample>& real,
                                    const WorldSpec& world,
                                    const DetectorTrainConfig& cfg, Rng& rng) {
  require(!real.empty(), "train_alignment: empty real set");
  Rng align_rng = rng.named("alignment");
  Rng init_rng = align_rng.named("init");
  const std::size_t k = static_cast<std::size_t>(world.num_classes);
  Mlp net = Mlp::create({static_cast<std::size_t>(world.dim),
                         static_cast<std::size_t>(cfg.alignment_hidden),
                         static_cast<std::size_t>(cfg.alignment_hidden), k},
                        init_rng);
  Adam opt({cfg.lr, 0.9, 0.999, 1e-8});
  Rng batch_rng = align_rng.named("batches");
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor batch = Tensor::matrix(static_cast<std::size_t>(cfg.batch),
                                  static_cast<std::size_t>(world.dim));
    std::vector<int> targets(static_cast<std::size_t>(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b) {
      const Sample& s = real[batch_rng.below(real.size())];
      for (int j = 0; j < world.dim; ++j)
        batch.at(static_cast<std::size_t>(b), static_cast<std::size_t>(j)) =
            s.x.data[static_cast<std::size_t>(j)];
      targets[static_cast<std::size_t>(b)] = s.condition.user_class;
    }
    ForwardCache cache = net.forward_cached(batch);
    const Tensor& logits = cache.post.back();
    Tensor upstream = Tensor::matrix(static_cast<std::size_t>(cfg.batch), k);
    for (int b = 0; b < cfg.batch; ++b) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, logits.at(static_cast<std::size_t>(b), c));
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) sum += std::exp(logits.at(static_cast<std::size_t>(b), c) - mx);
      for (std::size_t c = 0; c < k; ++c) {
        const double p = std::exp(logits.at(static_cast<std::size_t>(b), c) - mx) / sum;
        const double t = static_cast<int>(c) == targets[static_cast<std::size_t>(b)] ? 1.0 : 0.0;
        upstream.at(static_cast<std::size_t>(b), c) = (p - t) / cfg.batch;
      }
    }
    MlpGrads grads = MlpGrads::zeros_like(net);
    net.backward(cache, upstream, grads);
    opt.step(param_refs("alignment", net, &grads));
  }
  return {std::move(net)};
}

double semantic_reward(const SemanticDetector& det, const Sample& s) {
  const DetectorLogits l = det.logits(s.x);
  require_finite(l.fake, "semantic logits");
  require_finite(l.real, "semantic logits");
  // softmax([fake, real]) at the real component, shift-invariant
  return stable_sigmoid(l.real - l.fake);
}

double feature_reward(const FeatureDetector& det, const Sample& s) {
  return 1.0 - det.fake_probability(s.x);
}

double alignment_reward(const AlignmentClassifier& clf, const Sample& s,
                        int user_class) {
  const Tensor p = clf.class_probs(s.x);
  require(user_class >= 0 && user_class < static_cast<int>(p.size()),
          "alignment_reward: class out of range");
  return p.data[static_cast<std::size_t>(user_class)];
}

Tensor semantic_reward_input_grad(const SemanticDetector& det, const Sample& s) {
  // reward = sigmoid(gap), gap = l_real - l_fake; chain through z-scored stats
  const DetectorLogits l = det.logits(s.x);
  const double r = stable_sigmoid(l.real - l.fake);
  const double dgap = r * (1.0 - r);
  const Tensor jac = det.stats.extract_jacobian(s.x);
  const std::size_t ns = det.stats.num_stats();
  Tensor grad = Tensor::zeros(s.x.shape);
  for (std::size_t i = 0; i < ns; ++i) {
    const double w = (det.head.weights[0].at(1, i) - det.head.weights[0].at(0, i)) /
                     det.stat_std.data[i];
    for (std::size_t j = 0; j < grad.size(); ++j) {
      grad.data[j] += dgap * w * jac.at(i, j);
    }
  }
  return grad;
}

Tensor feature_reward_input_grad(const FeatureDetector& det, const Sample& s) {
  ForwardCache cache = det.net.forward_cached(s.x);
  const double z = cache.post.back().data[0];
  const double p = stable_sigmoid(z);
  Tensor upstream = Tensor::vector({-p * (1.0 - p)});
  MlpGrads grads = MlpGrads::zeros_like(det.net);
  return det.net.backward(cache, upstream, grads);
}

Tensor alignment_reward_input_grad(const AlignmentClassifier& clf,
                                   const Sample& s, int user_class) {
  ForwardCache cache = clf.net.forward_cached(s.x);
  const Tensor p = clf.class_probs(s.x);
  const std::size_t k = p.size();
  const double pk = p.data[static_cast<std::size_t>(user_class)];
  Tensor upstream = Tensor::zeros({k});
  for (std::size_t c = 0; c < k; ++c) {
    const double indicator = static_cast<int>(c) == user_class ? 1.0 : 0.0;
    upstream.data[c] = pk * (indicator - p.data[c]);
  }
  MlpGrads grads = MlpGrads::zeros_like(clf.net);
  return clf.net.backward(cache, upstream, grads);
}

std::vector<StatContribution> semantic_report(const SemanticDetector& det,
                                              const Sample& s) {
  const Tensor phi = det.stats.extract(s.x);
  const auto names = det.stats.stat_names();
  std::vector<StatContribution> out;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    const double z = (phi.data[i] - det.stat_mean.data[i]) / det.stat_std.data[i];
    const double w = det.head.weights[0].at(0, i) - det.head.weights[0].at(1, i);
    out.push_back({names[i], w * z});
  }
  return out;
}

double classifier_accuracy(const AlignmentClassifier& clf,
                           const std::vector<Sample>& samples) {
  require(!samples.empty(), "classifier_accuracy: empty sample set");
  int hits = 0;
  for (const auto& s : samples) {
    if (clf.predict(s.x) == s.condition.user_class) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double auc_from_scores(const std::vector<double>& fake_scores,
                       const std::vector<double>& real_scores) {
  require(!fake_scores.empty() && !real_scores.empty(), "auc: empty score set");
  // Mann-Whitney: P(score_fake > score_real), ties counted half
  double wins = 0.0;
  for (double f : fake_scores) {
    for (double r : real_scores) {
      if (f > r) {
        wins += 1.0;
      } else if (f == r) {
        wins += 0.5;
      }
    }
  }
  return wins / (static_cast<double>(fake_scores.size()) *
                 static_cast<double>(real_scores.size()));
}

}  // namespace detgen

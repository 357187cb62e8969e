#include "detgen/mlp.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "detgen/common.hpp"

namespace detgen {
namespace {

// input [n, in] -> [n, out] for one layer.
Tensor affine(const Tensor& input, const Tensor& w, const Tensor& b) {
  const std::size_t n = input.rows();
  const std::size_t in = input.cols();
  const std::size_t out = w.rows();
  Tensor y = Tensor::matrix(n, out);
  for (std::size_t r = 0; r < n; ++r) {
    const double* x = &input.data[r * in];
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = &w.data[o * in];
      double acc = b.data[o];
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * x[i];
      y.data[r * out + o] = acc;
    }
  }
  return y;
}

Tensor as_batch(const Tensor& t) {
  if (t.rank() == 2) return t;
  require(t.rank() == 1, "Mlp expects rank-1 or rank-2 input");
  Tensor b = t;
  b.shape = {1, t.size()};
  return b;
}

}  // namespace

std::string activation_name(Activation a) {
  return a == Activation::kTanh ? "tanh" : "relu";
}

Activation activation_from_name(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation: " + name);
}

MlpGrads MlpGrads::zeros_like(const Mlp& model) {
  MlpGrads g;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    g.weights.push_back(Tensor::zeros(model.weights[l].shape));
    g.biases.push_back(Tensor::zeros(model.biases[l].shape));
  }
  return g;
}

void MlpGrads::add_scaled(const MlpGrads& other, double scale) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    for (std::size_t i = 0; i < weights[l].size(); ++i)
      weights[l].data[i] += scale * other.weights[l].data[i];
    for (std::size_t i = 0; i < biases[l].size(); ++i)
      biases[l].data[i] += scale * other.biases[l].data[i];
  }
}

void MlpGrads::scale(double s) {
  for (auto& w : weights) w *= s;
  for (auto& b : biases) b *= s;
}

void MlpGrads::zero() {
  for (auto& w : weights) w.fill(0.0);
  for (auto& b : biases) b.fill(0.0);
}

Mlp Mlp::create(std::vector<std::size_t> sizes, Rng& rng, Activation act) {
  require(sizes.size() >= 2, "Mlp needs at least input and output sizes");
  for (std::size_t s : sizes) require(s >= 1, "Mlp layer sizes must be positive");
  Mlp m;
  m.layer_sizes = std::move(sizes);
  m.activation = act;
  for (std::size_t l = 0; l + 1 < m.layer_sizes.size(); ++l) {
    const std::size_t in = m.layer_sizes[l];
    const std::size_t out = m.layer_sizes[l + 1];
    Tensor w = Tensor::matrix(out, in);
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    m.weights.push_back(std::move(w));
    m.biases.push_back(Tensor::zeros({out}));
  }
  return m;
}

std::size_t Mlp::param_count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += w.size();
  for (const auto& b : biases) n += b.size();
  return n;
}

Tensor Mlp::forward(const Tensor& input) const {
  const bool batched = input.rank() == 2;
  ForwardCache cache = forward_cached(input);
  Tensor out = cache.post.back();
  if (!batched) out.shape = {out.size()};
  return out;
}

ForwardCache Mlp::forward_cached(const Tensor& input) const {
  Tensor x = as_batch(input);
  require(x.cols() == input_size(), "Mlp input size mismatch");
  ForwardCache cache;
  cache.input = x;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Tensor z = affine(l == 0 ? cache.input : cache.post.back(), weights[l], biases[l]);
    Tensor h = z;
    if (l + 1 < num_layers()) {
      if (activation == Activation::kTanh) {
        for (double& v : h.data) v = std::tanh(v);
      } else {
        for (double& v : h.data) v = v > 0.0 ? v : 0.0;
      }
    }
    cache.pre.push_back(std::move(z));
    cache.post.push_back(std::move(h));
  }
  if (!cache.post.back().all_finite()) {
    throw NumericError("Mlp forward produced non-finite output");
  }
  return cache;
}

Tensor Mlp::backward(const ForwardCache& cache, const Tensor& upstream,
                     MlpGrads& grads) const {
  Tensor delta = as_batch(upstream);
  require(delta.cols() == output_size() && delta.rows() == cache.input.rows(),
          "Mlp backward upstream shape mismatch");
  for (std::size_t li = num_layers(); li-- > 0;) {
    // delta currently holds dL/d(post_li); apply activation derivative.
    if (li + 1 < num_layers()) {
      // never reached for the last layer (identity)
      const Tensor& pre = cache.pre[li];
      if (activation == Activation::kTanh) {
        for (std::size_t i = 0; i < delta.size(); ++i) {
          const double t = std::tanh(pre.data[i]);
          delta.data[i] *= 1.0 - t * t;
        }
      } else {
        for (std::size_t i = 0; i < delta.size(); ++i) {
          delta.data[i] *= pre.data[i] > 0.0 ? 1.0 : 0.0;
        }
      }
    }
    const Tensor& x = li == 0 ? cache.input : cache.post[li - 1];
    const std::size_t n = x.rows();
    const std::size_t in = x.cols();
    const std::size_t out = weights[li].rows();
    Tensor& wg = grads.weights[li];
    Tensor& bg = grads.biases[li];
    Tensor next = Tensor::matrix(n, in);
    for (std::size_t r = 0; r < n; ++r) {
      const double* d = &delta.data[r * out];
      const double* xv = &x.data[r * in];
      double* nx = &next.data[r * in];
      for (std::size_t o = 0; o < out; ++o) {
        const double dv = d[o];
        if (dv == 0.0) continue;
        bg.data[o] += dv;
        double* wgr = &wg.data[o * in];
        const double* wr = &weights[li].data[o * in];
        for (std::size_t i = 0; i < in; ++i) {
          wgr[i] += dv * xv[i];
          nx[i] += dv * wr[i];
        }
      }
    }
    delta = std::move(next);
  }
  if (upstream.rank() == 1) delta.shape = {delta.size()};
  return delta;
}

nlohmann::json Mlp::to_json() const {
  nlohmann::json j;
  j["layer_sizes"] = layer_sizes;
  j["activation"] = activation_name(activation);
  nlohmann::json ws = nlohmann::json::array();
  nlohmann::json bs = nlohmann::json::array();
  for (const auto& w : weights) ws.push_back(w.data);
  for (const auto& b : biases) bs.push_back(b.data);
  j["weights"] = std::move(ws);
  j["biases"] = std::move(bs);
  return j;
}

Mlp Mlp::from_json(const nlohmann::json& j) {
  Mlp m;
  m.layer_sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
  m.activation = activation_from_name(j.at("activation").get<std::string>());
  require(m.layer_sizes.size() >= 2, "checkpoint: bad layer_sizes");
  const auto& ws = j.at("weights");
  const auto& bs = j.at("biases");
  require(ws.size() == m.layer_sizes.size() - 1 && bs.size() == ws.size(),
          "checkpoint: layer count mismatch");
  for (std::size_t l = 0; l + 1 < m.layer_sizes.size(); ++l) {
    const std::size_t in = m.layer_sizes[l];
    const std::size_t out = m.layer_sizes[l + 1];
    Tensor w({out, in}, ws[l].get<std::vector<double>>());
    Tensor b({out}, bs[l].get<std::vector<double>>());
    m.weights.push_back(std::move(w));
    m.biases.push_back(std::move(b));
  }
  return m;
}

std::vector<ParamRef> param_refs(const std::string& prefix, Mlp& model,
                                 const MlpGrads* grads) {
  std::vector<ParamRef> refs;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const std::string base = prefix + ".layer" + std::to_string(l);
    refs.push_back({base + ".weight", &model.weights[l],
                    grads ? &grads->weights[l] : nullptr});
    refs.push_back({base + ".bias", &model.biases[l],
                    grads ? &grads->biases[l] : nullptr});
  }
  return refs;
}

}  // namespace detgen

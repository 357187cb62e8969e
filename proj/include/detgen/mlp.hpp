#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "detgen/rng.hpp"
#include "detgen/tensor.hpp"

namespace detgen {

enum class Activation { kTanh, kRelu };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

struct Mlp;

// Same-shaped gradient accumulators for one Mlp.
struct MlpGrads {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  static MlpGrads zeros_like(const Mlp& model);
  void add_scaled(const MlpGrads& other, double scale);
  void scale(double s);
  void zero();
};

// Intermediate activations kept for the backward pass.
struct ForwardCache {
  Tensor input;                 // [n, in]
  std::vector<Tensor> pre;      // pre-activation per layer, [n, out_l]
  std::vector<Tensor> post;     // post-activation per layer
};

// Fully-connected net: hidden layers use `activation`, the last layer is
// identity. Weights are [out x in] row-major.
struct Mlp {
  std::vector<std::size_t> layer_sizes;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  Activation activation = Activation::kTanh;

  // Uniform +/- sqrt(6 / (fan_in + fan_out)) init, biases zero.
  static Mlp create(std::vector<std::size_t> sizes, Rng& rng,
                    Activation act = Activation::kTanh);

  std::size_t num_layers() const { return weights.size(); }
  std::size_t input_size() const { return layer_sizes.front(); }
  std::size_t output_size() const { return layer_sizes.back(); }
  std::size_t param_count() const;

  // input: [in] or [n, in]; output matches the input rank.
  Tensor forward(const Tensor& input) const;
  ForwardCache forward_cached(const Tensor& input) const;

  // upstream: [n, out] (or [out]); accumulates parameter gradients into
  // `grads` and returns the gradient with respect to the input.
  Tensor backward(const ForwardCache& cache, const Tensor& upstream,
                  MlpGrads& grads) const;

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);
};

// Named parameter slot; `grad` may be null when only mutation is needed.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  const Tensor* grad = nullptr;
};

std::vector<ParamRef> param_refs(const std::string& prefix, Mlp& model,
                                 const MlpGrads* grads);

}  // namespace detgen

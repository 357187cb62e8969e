#pragma once

#include <vector>

#include "detgen/mlp.hpp"
#include "detgen/tensor.hpp"

namespace detgen {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over an arbitrary set of named tensors. Moment
// slots are keyed by position, so the caller must pass the same parameter
// list (same order, same shapes) on every step.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  // Throws NumericError naming the parameter if a gradient is non-finite.
  void step(const std::vector<ParamRef>& params);

  long step_count() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Tensor m;
    Tensor v;
  };
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  long steps_ = 0;
};

}  // namespace detgen

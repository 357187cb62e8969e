#include "detgen/adam.hpp"

#include <cmath>

#include "detgen/common.hpp"

namespace detgen {

void Adam::step(const std::vector<ParamRef>& params) {
  if (slots_.empty()) {
    for (const auto& p : params) {
      slots_.push_back({Tensor::zeros(p.value->shape), Tensor::zeros(p.value->shape)});
    }
  }
  require(slots_.size() == params.size(), "Adam: parameter list changed size");

  for (const auto& p : params) {
    require(p.grad != nullptr && p.grad->same_shape(*p.value),
            "Adam: missing or misshapen gradient for " + p.name);
    if (!p.grad->all_finite()) {
      throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }

  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& value = *params[pi].value;
    const Tensor& grad = *params[pi].grad;
    Slot& slot = slots_[pi];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad.data[i];
      slot.m.data[i] = cfg_.beta1 * slot.m.data[i] + (1.0 - cfg_.beta1) * g;
      slot.v.data[i] = cfg_.beta2 * slot.v.data[i] + (1.0 - cfg_.beta2) * g * g;
      const double mh = slot.m.data[i] / bc1;
      const double vh = slot.v.data[i] / bc2;
      value.data[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

}  // namespace detgen

#include "detgen/adam.hpp"

#include <cmath>

#include <doctest.h>

#include "detgen/common.hpp"
#include "detgen/rng.hpp"

using namespace detgen;

namespace {

struct Fixture {
  Tensor value = Tensor::vector({0.0, 1.0, -2.0});
  Tensor grad = Tensor::zeros({3});
  std::vector<ParamRef> refs() { return {{"p", &value, &grad}}; }
};

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Fixture f;
  Adam opt({1e-3, 0.9, 0.999, 1e-8});
  const auto before = f.value.data;
  for (int i = 0; i < 5; ++i) opt.step(f.refs());
  CHECK(f.value.data == before);
}

TEST_CASE("adam: constant gradient moves parameters against its sign") {
  Fixture f;
  f.grad.fill(2.5);
  Adam opt({1e-3, 0.9, 0.999, 1e-8});
  const auto before = f.value.data;
  for (int i = 0; i < 50; ++i) opt.step(f.refs());
  for (std::size_t i = 0; i < f.value.size(); ++i) {
    CHECK(f.value.data[i] < before[i]);
  }
}

TEST_CASE("adam: first step from zero state matches the closed form") {
  // g = 1: m_hat = v_hat = 1, so the update is lr / (1 + eps) ~ lr
  Fixture f;
  f.value = Tensor::vector({0.0});
  f.grad = Tensor::vector({1.0});
  Adam opt({1e-3, 0.9, 0.999, 1e-8});
  opt.step({{"p", &f.value, &f.grad}});
  const double expected = -1e-3 * 1.0 / (1.0 + 1e-8);
  CHECK(f.value.data[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(std::abs(std::abs(f.value.data[0]) - 1e-3) < 1e-10);
}

TEST_CASE("adam: non-finite gradient aborts naming the parameter") {
  Fixture f;
  f.grad.data[1] = std::nan("");
  Adam opt({1e-3, 0.9, 0.999, 1e-8});
  try {
    opt.step(f.refs());
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("p") != std::string::npos);
  }
}

TEST_CASE("adam: deterministic across runs") {
  const auto run = [] {
    Fixture f;
    f.grad = Tensor::vector({0.3, -0.2, 0.9});
    Adam opt({1e-2, 0.9, 0.999, 1e-8});
    for (int i = 0; i < 20; ++i) opt.step(f.refs());
    return f.value.data;
  };
  CHECK(run() == run());
}

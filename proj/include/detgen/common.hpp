#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace detgen {

// Bad configuration, shapes, CLI input. CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failure during training/sampling (non-finite loss, exploding
// gradient). CLI maps this to exit code 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

inline void require_finite(double x, const std::string& what) {
  if (!std::isfinite(x)) {
    throw NumericError("non-finite value in " + what + ": " + std::to_string(x));
  }
}

}  // namespace detgen

#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "detgen/common.hpp"
#include "detgen/grpo.hpp"

namespace detgen {

// Append-only JSON-lines writer.
class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path, bool append = false)
      : out_(path, append ? std::ios::binary | std::ios::app : std::ios::binary) {
    require(out_.is_open(), "cannot open jsonl file: " + path);
  }

  void write(const nlohmann::ordered_json& j) { out_ << j.dump() << "\n"; }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

inline nlohmann::ordered_json metrics_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["stage"] = m.stage;
  j["step"] = m.step;
  j["mean_reward"] = {{"sem", m.mean_reward.sem},
                      {"feat", m.mean_reward.feat},
                      {"align", m.mean_reward.align}};
  j["mean_advantage_abs"] = m.mean_advantage_abs;
  j["clip_fraction"] = m.clip_fraction;
  j["mean_kl"] = m.mean_kl;
  j["mean_ratio"] = m.mean_ratio;
  j["loss"] = m.loss;
  return j;
}

}  // namespace detgen

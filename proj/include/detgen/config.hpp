#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "detgen/detectors.hpp"
#include "detgen/flow.hpp"
#include "detgen/grpo.hpp"
#include "detgen/policy.hpp"
#include "detgen/world.hpp"

namespace CLI {
class App;
}

namespace detgen {

struct BenchConfig {
  long battles = 3000;
  int pool_per_class = 64;
  int score_per_class = 64;
  int holdout_real_n = 2048;
  std::string entry_mode = "caption";
};

// One experiment = one seed + one run directory; every phase draws from a
// named stream of the single seed.
struct ExperimentConfig {
  int schema_version = 1;
  std::uint64_t seed = 42;
  std::string out_dir = "runs/default";

  WorldSpec world;
  FlowConfig flow;
  FmTrainConfig fm;
  int fm_data_n = 8192;

  DetectorTrainConfig detectors;
  int detector_generated_n = 8192;

  PolicyConfig policy;
  SftConfig sft;
  int sft_pairs = 4096;

  GrpoConfig grpo;
  std::string stage2_policy = "auto";  // auto | sft | stage1

  BenchConfig bench;

  void validate();
  nlohmann::ordered_json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

// Registers every field as a dotted CLI option plus `--config <toml>`.
void register_options(CLI::App& app, ExperimentConfig& cfg);

}  // namespace detgen

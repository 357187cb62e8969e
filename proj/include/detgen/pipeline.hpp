#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "detgen/bench.hpp"
#include "detgen/config.hpp"
#include "detgen/manifest.hpp"

namespace detgen::pipeline {

struct RunPaths {
  std::filesystem::path dir;

  std::filesystem::path config() const { return dir / "config.json"; }
  std::filesystem::path manifest() const { return dir / "manifest.json"; }
  std::filesystem::path real_train() const { return dir / "real_train.jsonl"; }
  std::filesystem::path generator_sft() const { return dir / "generator_sft.json"; }
  std::filesystem::path metrics_pretrain() const { return dir / "metrics_pretrain.jsonl"; }
  std::filesystem::path detectors() const { return dir / "detectors.json"; }
  std::filesystem::path policy_sft() const { return dir / "policy_sft.json"; }
  std::filesystem::path metrics_sft() const { return dir / "metrics_sft.jsonl"; }
  std::filesystem::path policy_stage1() const { return dir / "policy_stage1.json"; }
  std::filesystem::path metrics_stage1() const { return dir / "metrics_stage1.jsonl"; }
  std::filesystem::path generator_stage2() const { return dir / "generator_stage2.json"; }
  std::filesystem::path metrics_stage2() const { return dir / "metrics_stage2.jsonl"; }
  std::filesystem::path timings() const { return dir / "timings.jsonl"; }
  std::filesystem::path bench_dir() const { return dir / "bench"; }
  std::filesystem::path ablate_dir() const { return dir / "ablate"; }
  std::filesystem::path report_dir() const { return dir / "report"; }
  std::filesystem::path diagnostics_dir() const { return dir / "diagnostics"; }
};

RunPaths paths_for(const ExperimentConfig& cfg);

void save_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j);
nlohmann::json load_json_file(const std::filesystem::path& path);

FlowModel load_flow(const std::filesystem::path& path);
DetectorSuite load_detector_suite(const std::filesystem::path& path);
PromptPolicy load_policy(const std::filesystem::path& path);

// Named-stream datasets; regenerating with the same config is bit-identical.
std::vector<Sample> real_train_data(const ExperimentConfig& cfg);
std::vector<Sample> holdout_real_data(const ExperimentConfig& cfg);

// Phase entry points (each owns the run-dir lock for its duration).
void pretrain_generator(const ExperimentConfig& cfg);
void train_detectors_phase(const ExperimentConfig& cfg);
void sft_policy_phase(const ExperimentConfig& cfg);
void grpo_stage1_phase(const ExperimentConfig& cfg, int steps_override = 0);
void grpo_stage2_phase(const ExperimentConfig& cfg, int steps_override = 0);

struct ArenaEntrySpec {
  std::string id;
  std::string checkpoint;          // empty = the real-data entry
  std::string mode = "caption";    // user|caption|policy
  std::string policy_checkpoint;   // for mode=policy
};

// Empty specs = default lineup: real + every generator checkpoint in the run.
void arena_phase(const ExperimentConfig& cfg, std::vector<ArenaEntrySpec> specs);

void ablate_reward_swap(const ExperimentConfig& cfg, int seeds, int steps_override);
void ablate_stage_wise(const ExperimentConfig& cfg, int steps_override);

void report_phase(const std::vector<std::string>& run_dirs);

// Convenience evaluations shared by the CLI, ablations, and the acceptance
// suite.
DetectorScores score_generator(const ExperimentConfig& cfg, const FlowModel& model,
                               const DetectorSuite& suite, ConditionMode mode,
                               const PromptPolicy* policy, std::uint64_t eval_salt);

struct PairedRewardEval {
  double mean_enriched = 0.0;
  double mean_passthrough = 0.0;
  double mean_diff = 0.0;
  double ci_lo = 0.0;  // 95% CI of the paired difference
  double ci_hi = 0.0;
};

// Paired fused-reward comparison, policy-enriched vs bare user prompts,
// shared initial noise per pair.
PairedRewardEval paired_prompt_eval(const ExperimentConfig& cfg,
                                    const FlowModel& generator,
                                    const DetectorSuite& suite,
                                    const PromptPolicy& policy, int pairs,
                                    std::uint64_t eval_salt);

}  // namespace detgen::pipeline

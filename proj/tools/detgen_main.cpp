#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <nlohmann/json.hpp>

#include "detgen/bench.hpp"
#include "detgen/common.hpp"
#include "detgen/config.hpp"
#include "detgen/manifest.hpp"
#include "detgen/pipeline.hpp"

namespace {

using namespace detgen;

void emit_error(const std::string& kind, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << "\n";
}

pipeline::ArenaEntrySpec parse_entry_spec(const std::string& raw) {
  // id=checkpoint[:mode[:policy_checkpoint]]
  pipeline::ArenaEntrySpec spec;
  const auto eq = raw.find('=');
  require(eq != std::string::npos, "entry spec must look like id=checkpoint[:mode[:policy]]");
  spec.id = raw.substr(0, eq);
  std::string rest = raw.substr(eq + 1);
  const auto c1 = rest.find(':');
  if (c1 == std::string::npos) {
    spec.checkpoint = rest;
    return spec;
  }
  spec.checkpoint = rest.substr(0, c1);
  rest = rest.substr(c1 + 1);
  const auto c2 = rest.find(':');
  if (c2 == std::string::npos) {
    spec.mode = rest;
    return spec;
  }
  spec.mode = rest.substr(0, c2);
  spec.policy_checkpoint = rest.substr(c2 + 1);
  return spec;
}

int run_sample(const ExperimentConfig& cfg, const std::string& checkpoint,
               int cls, int count, const std::string& mode,
               const std::string& policy_path, const std::string& out_path) {
  const FlowModel model = pipeline::load_flow(checkpoint);
  const ConditionMode cond_mode = condition_mode_from_name(mode);
  PromptPolicy policy;
  if (cond_mode == ConditionMode::kPolicy) {
    require(!policy_path.empty(), "sample: --policy is required with --mode policy");
    policy = pipeline::load_policy(policy_path);
  }
  require(cls >= 0 && cls < model.world.num_classes, "sample: class out of range");
  require(count >= 1, "sample: -n must be >= 1");

  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path, std::ios::binary);
    require(file.is_open(), "sample: cannot open output file " + out_path);
    out = &file;
  }
  Rng rng = Rng(cfg.seed).named("sample");
  for (int i = 0; i < count; ++i) {
    Rng item = rng.stream(static_cast<std::uint64_t>(i));
    PromptSeq cond;
    switch (cond_mode) {
      case ConditionMode::kUser:
        cond = user_prompt(model.world, model.vocab, cls);
        break;
      case ConditionMode::kCaption: {
        const int m = static_cast<int>(item.below(static_cast<std::uint64_t>(model.world.sub_modes)));
        const int s = static_cast<int>(item.below(static_cast<std::uint64_t>(model.world.style_tokens)));
        cond = caption_prompt(model.world, model.vocab, cls, m, s);
        break;
      }
      case ConditionMode::kPolicy: {
        const PromptSeq user = user_prompt(model.world, model.vocab, cls);
        Rng roll = item.named("rewrite");
        cond = rollout(policy, policy, user, 1, roll)[0].prompt;
        break;
      }
    }
    Rng gen = item.named("ode");
    (*out) << sample_to_json(sample_ode(model, cond, gen, "cli").sample).dump() << "\n";
  }
  return 0;
}

int run_score(const ExperimentConfig& cfg, const std::string& detectors_path,
              const std::string& checkpoint, const std::string& dataset,
              const std::string& mode, const std::string& policy_path,
              int per_class, bool explain) {
  const DetectorSuite suite = pipeline::load_detector_suite(detectors_path);
  std::vector<Sample> samples;
  if (!dataset.empty()) {
    const Vocabulary vocab(suite.semantic.stats.world);
    samples = read_dataset_jsonl(dataset, vocab);
  } else {
    require(!checkpoint.empty(), "score: need --checkpoint or --dataset");
    const FlowModel model = pipeline::load_flow(checkpoint);
    const ConditionMode cond_mode = condition_mode_from_name(mode);
    PromptPolicy policy;
    const PromptPolicy* policy_ptr = nullptr;
    if (cond_mode == ConditionMode::kPolicy) {
      require(!policy_path.empty(), "score: --policy is required with --mode policy");
      policy = pipeline::load_policy(policy_path);
      policy_ptr = &policy;
    }
    Rng rng = Rng(cfg.seed).named("score");
    const Entry entry =
        build_generator_entry("score", model, cond_mode, policy_ptr, per_class, rng);
    for (const auto& pool : entry.pools)
      samples.insert(samples.end(), pool.begin(), pool.end());
  }
  require(!samples.empty(), "score: no samples to score");

  double sem = 0.0, feat = 0.0, align = 0.0, heldout = 0.0;
  for (const auto& s : samples) {
    sem += semantic_reward(suite.semantic, s);
    feat += feature_reward(suite.feature, s);
    align += alignment_reward(suite.alignment, s, s.condition.user_class);
    heldout += suite.heldout.real_probability(s.x);
  }
  const double n = static_cast<double>(samples.size());
  std::cout << "metric,value\n";
  std::cout << "samples," << samples.size() << "\n";
  std::cout << "mean_semantic_reward," << sem / n << "\n";
  std::cout << "mean_feature_reward," << feat / n << "\n";
  std::cout << "mean_alignment_reward," << align / n << "\n";
  std::cout << "mean_heldout_real_probability," << heldout / n << "\n";

  if (explain) {
    // mean signed and absolute per-statistic contributions to l_fake - l_real
    std::vector<double> mean_contrib, mean_abs;
    std::vector<std::string> names;
    for (const auto& s : samples) {
      const auto report = semantic_report(suite.semantic, s);
      if (names.empty()) {
        names.reserve(report.size());
        mean_contrib.assign(report.size(), 0.0);
        mean_abs.assign(report.size(), 0.0);
        for (const auto& r : report) names.push_back(r.name);
      }
      for (std::size_t i = 0; i < report.size(); ++i) {
        mean_contrib[i] += report[i].contribution;
        mean_abs[i] += std::abs(report[i].contribution);
      }
    }
    std::cout << "\nstatistic,mean_contribution,mean_abs_contribution\n";
    for (std::size_t i = 0; i < names.size(); ++i) {
      std::cout << names[i] << "," << mean_contrib[i] / n << "," << mean_abs[i] / n << "\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"detector-reward training lab for a toy conditional generator"};
  app.require_subcommand(1);

  ExperimentConfig cfg;
  int steps_override = 0;
  int ablate_seeds = 3;
  std::string preset;
  std::vector<std::string> report_dirs;
  std::vector<std::string> entry_specs;
  bool no_real = false;

  std::string sample_checkpoint, sample_mode = "user", sample_policy, sample_out;
  int sample_class = 0, sample_n = 1;

  std::string score_detectors, score_checkpoint, score_dataset, score_mode = "caption",
                               score_policy;
  int score_per_class = 16;
  bool score_explain = false;

  // one shared option/config surface on the root app; subcommands fall
  // through so `detgen <cmd> --config c.toml --seed 7` reaches it
  register_options(app, cfg);
  const auto add_common = [&](CLI::App* sub) {
    sub->fallthrough(true);
    return sub;
  };

  add_common(app.add_subcommand("pretrain-generator",
                                "flow-matching cold start for the generator"));
  add_common(app.add_subcommand("train-detectors",
                                "train frozen real-vs-generated detectors"));
  add_common(app.add_subcommand("sft-policy", "cold-start the prompt policy"));
  auto* s1 = add_common(app.add_subcommand("grpo-stage1",
                                           "post-train the prompt policy, generator frozen"));
  s1->add_option("--steps", steps_override, "override grpo.total-steps");
  auto* s2 = add_common(app.add_subcommand("grpo-stage2",
                                           "post-train the generator, policy frozen"));
  s2->add_option("--steps", steps_override, "override grpo.total-steps");

  auto* sample_cmd = add_common(app.add_subcommand("sample", "emit generated samples as JSONL"));
  sample_cmd->add_option("--checkpoint", sample_checkpoint, "generator checkpoint")->required();
  sample_cmd->add_option("--class", sample_class, "condition class")->required();
  sample_cmd->add_option("-n,--num", sample_n, "number of samples");
  sample_cmd->add_option("--mode", sample_mode, "user|caption|policy");
  sample_cmd->add_option("--policy", sample_policy, "policy checkpoint for --mode policy");
  sample_cmd->add_option("--out-file", sample_out, "output file (default stdout)");

  auto* score_cmd = add_common(app.add_subcommand("score", "score samples with the detectors"));
  score_cmd->add_option("--detectors", score_detectors, "detector checkpoint")->required();
  score_cmd->add_option("--checkpoint", score_checkpoint, "generator checkpoint to score");
  score_cmd->add_option("--dataset", score_dataset, "JSONL dataset to score instead");
  score_cmd->add_option("--mode", score_mode, "user|caption|policy");
  score_cmd->add_option("--policy", score_policy, "policy checkpoint for --mode policy");
  score_cmd->add_option("--per-class", score_per_class, "generated samples per class");
  score_cmd->add_flag("--explain", score_explain, "emit per-statistic contributions");

  auto* arena_cmd = add_common(app.add_subcommand("arena", "forced-choice realism battles"));
  arena_cmd->add_option("--entry", entry_specs,
                        "extra entry as id=checkpoint[:mode[:policy]] (repeatable)");
  arena_cmd->add_flag("--no-real", no_real, "exclude the real-data entry");

  auto* report_cmd = add_common(app.add_subcommand("report", "emit CSV/SVG report bundles"));
  report_cmd->add_option("runs", report_dirs, "run directories");

  auto* ablate_cmd = add_common(app.add_subcommand("ablate", "experiment presets"));
  ablate_cmd->add_option("--preset", preset, "reward-swap|stage-wise")->required();
  ablate_cmd->add_option("--seeds", ablate_seeds, "seeds for reward-swap");
  ablate_cmd->add_option("--steps", steps_override, "override grpo.total-steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return 2;
  }

  try {
    cfg.validate();
    if (app.got_subcommand("pretrain-generator")) {
      pipeline::pretrain_generator(cfg);
    } else if (app.got_subcommand("train-detectors")) {
      pipeline::train_detectors_phase(cfg);
    } else if (app.got_subcommand("sft-policy")) {
      pipeline::sft_policy_phase(cfg);
    } else if (app.got_subcommand("grpo-stage1")) {
      pipeline::grpo_stage1_phase(cfg, steps_override);
    } else if (app.got_subcommand("grpo-stage2")) {
      pipeline::grpo_stage2_phase(cfg, steps_override);
    } else if (app.got_subcommand("sample")) {
      return run_sample(cfg, sample_checkpoint, sample_class, sample_n, sample_mode,
                        sample_policy, sample_out);
    } else if (app.got_subcommand("score")) {
      return run_score(cfg, score_detectors, score_checkpoint, score_dataset,
                       score_mode, score_policy, score_per_class, score_explain);
    } else if (app.got_subcommand("arena")) {
      std::vector<pipeline::ArenaEntrySpec> specs;
      if (!no_real && !entry_specs.empty()) specs.push_back({"real", "", "", ""});
      for (const auto& raw : entry_specs) specs.push_back(parse_entry_spec(raw));
      pipeline::arena_phase(cfg, std::move(specs));
    } else if (app.got_subcommand("report")) {
      if (report_dirs.empty()) report_dirs.push_back(cfg.out_dir);
      pipeline::report_phase(report_dirs);
    } else if (app.got_subcommand("ablate")) {
      if (preset == "reward-swap") {
        pipeline::ablate_reward_swap(cfg, ablate_seeds, steps_override);
      } else if (preset == "stage-wise") {
        pipeline::ablate_stage_wise(cfg, steps_override);
      } else {
        throw ConfigError("unknown preset: " + preset + " (reward-swap|stage-wise)");
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    emit_error("config", e.what());
    return 2;
  } catch (const NumericError& e) {
    // numeric failures leave a diagnostics file next to the run
    try {
      const auto dir = std::filesystem::path(cfg.out_dir) / "diagnostics";
      std::filesystem::create_directories(dir);
      const auto path = dir / "numeric_failure.json";
      std::ofstream out(path, std::ios::binary);
      nlohmann::ordered_json j;
      j["error"] = "numeric";
      j["message"] = e.what();
      j["config"] = cfg.to_json();
      out << j.dump(2) << "\n";
      emit_error("numeric", std::string(e.what()) + " (diagnostics: " + path.string() + ")");
    } catch (...) {
      emit_error("numeric", e.what());
    }
    return 3;
  } catch (const std::exception& e) {
    emit_error("internal", e.what());
    return 1;
  }
}

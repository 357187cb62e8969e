#include "detgen/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "detgen/common.hpp"
#include "detgen/metrics.hpp"
#include "detgen/report.hpp"

namespace detgen::pipeline {
namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

Manifest prepare_run(const ExperimentConfig& cfg, const RunPaths& paths) {
  std::filesystem::create_directories(paths.dir);
  const std::string hash = cfg.hash();
  if (std::filesystem::exists(paths.config())) {
    const auto existing = load_json_file(paths.config());
    require(sha256_hex(nlohmann::ordered_json(existing).dump()) == hash ||
                ExperimentConfig::from_json(existing).hash() == hash,
            "run directory holds a different config: " + paths.config().string());
  } else {
    save_json_file(paths.config(), cfg.to_json());
  }
  return Manifest::load_or_create(paths.dir, hash);
}

void append_timing(const RunPaths& paths, const std::string& phase, double ms) {
  std::ofstream out(paths.timings(), std::ios::binary | std::ios::app);
  nlohmann::ordered_json j;
  j["phase"] = phase;
  j["wallclock_ms"] = ms;
  out << j.dump() << "\n";
}

void require_file(const std::filesystem::path& p, const std::string& phase_hint) {
  require(std::filesystem::exists(p),
          "missing " + p.string() + " (run `" + phase_hint + "` first)");
}

std::vector<Sample> generated_for_detectors(const ExperimentConfig& cfg,
                                            const FlowModel& generator) {
  Rng rng = Rng(cfg.seed).named("detector-fakes");
  std::vector<Sample> fakes;
  fakes.reserve(static_cast<std::size_t>(cfg.detector_generated_n));
  for (int i = 0; i < cfg.detector_generated_n; ++i) {
    Rng item = rng.stream(static_cast<std::uint64_t>(i));
    const int k = static_cast<int>(item.below(static_cast<std::uint64_t>(cfg.world.num_classes)));
    const int m = static_cast<int>(item.below(static_cast<std::uint64_t>(cfg.world.sub_modes)));
    const int s = static_cast<int>(item.below(static_cast<std::uint64_t>(cfg.world.style_tokens)));
    const PromptSeq cond = caption_prompt(generator.world, generator.vocab, k, m, s);
    fakes.push_back(sample_ode(generator, cond, item, "sft").sample);
  }
  return fakes;
}

std::filesystem::path stage2_policy_path(const ExperimentConfig& cfg,
                                         const RunPaths& paths) {
  if (cfg.stage2_policy == "sft") return paths.policy_sft();
  if (cfg.stage2_policy == "stage1") return paths.policy_stage1();
  return std::filesystem::exists(paths.policy_stage1()) ? paths.policy_stage1()
                                                        : paths.policy_sft();
}

}  // namespace

RunPaths paths_for(const ExperimentConfig& cfg) { return {cfg.out_dir}; }

void save_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.is_open(), "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), "cannot read " + path.string());
  return nlohmann::json::parse(in);
}

FlowModel load_flow(const std::filesystem::path& path) {
  return FlowModel::from_json(load_json_file(path));
}

DetectorSuite load_detector_suite(const std::filesystem::path& path) {
  return DetectorSuite::from_json(load_json_file(path));
}

PromptPolicy load_policy(const std::filesystem::path& path) {
  return PromptPolicy::from_json(load_json_file(path));
}

std::vector<Sample> real_train_data(const ExperimentConfig& cfg) {
  Rng rng = Rng(cfg.seed).named("world");
  const Vocabulary vocab(cfg.world);
  return sample_real(cfg.world, vocab, cfg.fm_data_n, rng);
}

std::vector<Sample> holdout_real_data(const ExperimentConfig& cfg) {
  Rng rng = Rng(cfg.seed).named("holdout");
  const Vocabulary vocab(cfg.world);
  return sample_real(cfg.world, vocab, cfg.bench.holdout_real_n, rng);
}

void pretrain_generator(const ExperimentConfig& cfg) {
  const RunPaths paths = paths_for(cfg);
  RunLock lock(paths.dir);
  Manifest manifest = prepare_run(cfg, paths);
  const auto start = Clock::now();

  const std::vector<Sample> data = real_train_data(cfg);
  write_dataset_jsonl(paths.real_train().string(), data);

  const Vocabulary vocab(cfg.world);
  Rng rng = Rng(cfg.seed).named("pretrain");
  FlowModel model = FlowModel::create(cfg.world, vocab, cfg.flow, rng);
  Rng train_rng = rng.named("train");
  const FmTrainResult result = fm_pretrain(model, data, cfg.fm, train_rng);

  save_json_file(paths.generator_sft(), model.to_json());
  {
    JsonlWriter writer(paths.metrics_pretrain().string());
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
      nlohmann::ordered_json j;
      j["phase"] = "pretrain";
      j["epoch"] = e;
      j["loss"] = result.epoch_loss[e];
      writer.write(j);
    }
  }
  const double ms = ms_since(start);
  append_timing(paths, "pretrain-generator", ms);
  manifest.record_phase("pretrain-generator",
                        {paths.real_train(), paths.generator_sft(), paths.metrics_pretrain()},
                        ms);
}

void train_detectors_phase(const ExperimentConfig& cfg) {
  const RunPaths paths = paths_for(cfg);
  RunLock lock(paths.dir);
  Manifest manifest = prepare_run(cfg, paths);
  require_file(paths.generator_sft(), "pretrain-generator");
  const auto start = Clock::now();

  const Vocabulary vocab(cfg.world);
  const std::vector<Sample> real =
      std::filesystem::exists(paths.real_train())
          ? read_dataset_jsonl(paths.real_train().string(), vocab)
          : real_train_data(cfg);
  const FlowModel generator = load_flow(paths.generator_sft());
  const std::vector<Sample> fakes = generated_for_detectors(cfg, generator);

  Rng rng = Rng(cfg.seed).named("detectors");
  const DetectorSuite suite = train_detectors(real, fakes, cfg.world, cfg.detectors, rng);
  save_json_file(paths.detectors(), suite.to_json());

  const double ms = ms_since(start);
  append_timing(paths, "train-detectors", ms);
  manifest.record_phase("train-detectors", {paths.detectors()}, ms);
}

void sft_policy_phase(const ExperimentConfig& cfg) {
  const RunPaths paths = paths_for(cfg);
  RunLock lock(paths.dir);
  Manifest manifest = prepare_run(cfg, paths);
  const auto start = Clock::now();

  const Vocabulary vocab(cfg.world);
  Rng rng = Rng(cfg.seed).named("sft");
  Rng corpus_rng = rng.named("corpus");
  const auto corpus = template_corpus(cfg.world, vocab, cfg.sft_pairs, corpus_rng);
  Rng init_rng = rng.named("init");
  PromptPolicy policy = PromptPolicy::create(cfg.world, vocab, cfg.policy, init_rng);
  Rng train_rng = rng.named("train");
  const SftResult result = sft_policy(policy, corpus, cfg.sft, train_rng);

  save_json_file(paths.policy_sft(), policy.to_json());
  {
    JsonlWriter writer(paths.metrics_sft().string());
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
      nlohmann::ordered_json j;
      j["phase"] = "sft";
      j["epoch"] = e;
      j["loss"] = result.epoch_loss[e];
      writer.write(j);
    }
  }
  const double ms = ms_since(start);
  append_timing(paths, "sft-policy", ms);
  manifest.record_phase("sft-policy", {paths.policy_sft(), paths.metrics_sft()}, ms);
}

void grpo_stage1_phase(const ExperimentConfig& cfg, int steps_override) {
  const RunPaths paths = paths_for(cfg);
  RunLock lock(paths.dir);
  Manifest manifest = prepare_run(cfg, paths);
  require_file(paths.generator_sft(), "pretrain-generator");
  require_file(paths.detectors(), "train-detectors");
  require_file(paths.policy_sft(), "sft-policy");
  const auto start = Clock::now();

  const FlowModel generator = load_flow(paths.generator_sft());
  const DetectorSuite suite = load_detector_suite(paths.detectors());
  PromptPolicy policy = load_policy(paths.policy_sft());

  Stage1Trainer trainer(std::move(policy), &generator, &suite, cfg.grpo);
  Rng rng = Rng(cfg.seed).named("stage1");
  const int steps = steps_override > 0 ? steps_override : cfg.grpo.total_steps;
  JsonlWriter writer(paths.metrics_stage1().string());
  for (int s = 0; s < steps; ++s) {
    const auto step_start = Clock::now();
    const StepMetrics m = trainer.step(rng);
    writer.write(metrics_json(m));
    std::ofstream t(paths.timings(), std::ios::binary | std::ios::app);
    t << nlohmann::ordered_json{{"phase", "grpo-stage1"},
                                {"step", m.step},
                                {"wallclock_ms", ms_since(step_start)}}
             .dump()
      << "\n";
  }
  writer.flush();
  save_json_file(paths.policy_stage1(), trainer.policy().to_json());

  const double ms = ms_since(start);
  append_timing(paths, "grpo-stage1", ms);
  manifest.record_phase("grpo-stage1", {paths.policy_stage1(), paths.metrics_stage1()}, ms);
}

void grpo_stage2_phase(const ExperimentConfig& cfg, int steps_override) {
  const RunPaths paths = paths_for(cfg);
  RunLock lock(paths.dir);
  Manifest manifest = prepare_run(cfg, paths);
  require_file(paths.generator_sft(), "pretrain-generator");
  require_file(paths.detectors(), "train-detectors");
  const auto policy_path = stage2_policy_path(cfg, paths);
  require_file(policy_path, "sft-policy");
  const auto start = Clock::now();

  FlowModel generator = load_flow(paths.generator_sft());
  const DetectorSuite suite = load_detector_suite(paths.detectors());
  const PromptPolicy policy = load_policy(policy_path);

  Stage2Trainer trainer(std::move(generator), &policy, &suite, cfg.grpo);
  Rng rng = Rng(cfg.seed).named("stage2");
  const int steps = steps_override > 0 ? steps_override : cfg.grpo.total_steps;
  JsonlWriter writer(paths.metrics_stage2().string());
  for (int s = 0; s < steps; ++s) {
    const auto step_start = Clock::now();
    const StepMetrics m = trainer.step(rng);
    writer.write(metrics_json(m));
    std::ofstream t(paths.timings(), std::ios::binary | std::ios::app);
    t << nlohmann::ordered_json{{"phase", "grpo-stage2"},
                                {"step", m.step},
                                {"wallclock_ms", ms_since(step_start)}}
             .dump()
      << "\n";
  }
  writer.flush();
  save_json_file(paths.generator_stage2(), trainer.generator().to_json());

  const double ms = ms_since(start);
  append_timing(paths, "grpo-stage2", ms);
  manifest.record_phase("grpo-stage2", {paths.generator_stage2(), paths.metrics_stage2()}, ms);
}

void arena_phase(const ExperimentConfig& cfg, std::vector<ArenaEntrySpec> specs) {
  const RunPaths paths = paths_for(cfg);
  RunLock lock(paths.dir);
  Manifest manifest = prepare_run(cfg, paths);
  require_file(paths.detectors(), "train-detectors");
  const auto start = Clock::now();
  std::filesystem::create_directories(paths.bench_dir());

  if (specs.empty()) {
    specs.push_back({"real", "", "", ""});
    if (std::filesystem::exists(paths.generator_sft()))
      specs.push_back({"generator-sft", paths.generator_sft().string(), cfg.bench.entry_mode, ""});
    if (std::filesystem::exists(paths.generator_stage2()))
      specs.push_back({"generator-stage2", paths.generator_stage2().string(), cfg.bench.entry_mode, ""});
  }
  require(specs.size() >= 2, "arena: need at least 2 entries");

  const DetectorSuite suite = load_detector_suite(paths.detectors());
  Rng rng = Rng(cfg.seed).named("arena");

  std::vector<Entry> entries;
  std::vector<PromptPolicy> policies;  // keep alive for policy-mode entries
  policies.reserve(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& spec = specs[i];
    if (spec.checkpoint.empty()) {
      entries.push_back(build_real_entry(spec.id, holdout_real_data(cfg), cfg.world.num_classes));
      continue;
    }
    const FlowModel model = load_flow(spec.checkpoint);
    const ConditionMode mode = condition_mode_from_name(
        spec.mode.empty() ? cfg.bench.entry_mode : spec.mode);
    const PromptPolicy* policy = nullptr;
    if (mode == ConditionMode::kPolicy) {
      require(!spec.policy_checkpoint.empty(),
              "arena entry " + spec.id + ": policy mode needs a policy checkpoint");
      policies.push_back(load_policy(spec.policy_checkpoint));
      policy = &policies.back();
    }
    Rng entry_rng = rng.named("entry-" + spec.id);
    entries.push_back(build_generator_entry(spec.id, model, mode, policy,
                                            cfg.bench.pool_per_class, entry_rng));
  }

  const Judge judge = heldout_judge(suite.heldout);
  Rng battle_rng = rng.named("battles");
  const ArenaResult result = run_arena(entries, judge, cfg.bench.battles, battle_rng);

  write_battle_log_jsonl((paths.bench_dir() / "battles.jsonl").string(), result);
  write_win_matrix_csv((paths.bench_dir() / "win_matrix.csv").string(), result.matrix);
  save_json_file(paths.bench_dir() / "win_matrix.json", win_matrix_json(result.matrix));

  // packs detector scores and win rates into the leaderboard
  std::ofstream lb(paths.bench_dir() / "leaderboard.csv", std::ios::binary);
  lb << "entry,overall_win_rate,vs_real_win_rate,semantic_score,feature_score,heldout_score\n";
  std::ofstream ds(paths.bench_dir() / "detector_scores.csv", std::ios::binary);
  ds << "entry,semantic,feature,heldout,heldout_reward_independent\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const DetectorScores scores =
        detector_scoring(entries[i], suite, cfg.bench.score_per_class);
    const WilsonInterval overall = result.matrix.overall(i);
    std::string vs_real = "";
    if (!entries[i].is_real && result.matrix.real_index().has_value()) {
      const auto real_i = *result.matrix.real_index();
      if (result.matrix.total(i, real_i) > 0) {
        vs_real = std::to_string(result.matrix.win_rate(i, real_i));
      }
    }
    lb << entries[i].id << "," << overall.point << "," << vs_real << ","
       << scores.semantic << "," << scores.feature << "," << scores.heldout << "\n";
    ds << entries[i].id << "," << scores.semantic << "," << scores.feature << ","
       << scores.heldout << ",true\n";
  }
  lb.close();
  ds.close();

  const double ms = ms_since(start);
  append_timing(paths, "arena", ms);
  manifest.record_phase("arena",
                        {paths.bench_dir() / "battles.jsonl",
                         paths.bench_dir() / "win_matrix.csv",
                         paths.bench_dir() / "win_matrix.json",
                         paths.bench_dir() / "leaderboard.csv",
                         paths.bench_dir() / "detector_scores.csv"},
                        ms);
}

DetectorScores score_generator(const ExperimentConfig& cfg, const FlowModel& model,
                               const DetectorSuite& suite, ConditionMode mode,
                               const PromptPolicy* policy, std::uint64_t eval_salt) {
  Rng rng = Rng(cfg.seed).named("eval").stream(eval_salt);
  const Entry entry = build_generator_entry("eval", model, mode, policy,
                                            cfg.bench.pool_per_class, rng);
  return detector_scoring(entry, suite, cfg.bench.score_per_class);
}

PairedRewardEval paired_prompt_eval(const ExperimentConfig& cfg,
                                    const FlowModel& generator,
                                    const DetectorSuite& suite,
                                    const PromptPolicy& policy, int pairs,
                                    std::uint64_t eval_salt) {
  require(pairs >= 2, "paired_prompt_eval: need at least 2 pairs");
  Rng rng = Rng(cfg.seed).named("paired-eval").stream(eval_salt);
  std::vector<double> diffs;
  diffs.reserve(static_cast<std::size_t>(pairs));
  PairedRewardEval out;
  const FusionConfig& w = cfg.grpo.fusion;
  for (int i = 0; i < pairs; ++i) {
    Rng pair_rng = rng.stream(static_cast<std::uint64_t>(i));
    const int k = static_cast<int>(pair_rng.below(static_cast<std::uint64_t>(cfg.world.num_classes)));
    const PromptSeq user = user_prompt(generator.world, generator.vocab, k);
    Rng roll_rng = pair_rng.named("rollout");
    const PromptSeq enriched = rollout(policy, policy, user, 1, roll_rng)[0].prompt;
    // shared initial noise: same stream for both arms
    Rng noise_a = pair_rng.named("noise");
    Rng noise_b = pair_rng.named("noise");
    const Sample a = sample_ode(generator, enriched, noise_a, "enriched").sample;
    const Sample b = sample_ode(generator, user, noise_b, "passthrough").sample;
    const RewardVector ra = score_sample(suite, a, k);
    const RewardVector rb = score_sample(suite, b, k);
    const double fused_a = w.weight_sem * ra.sem + w.weight_feat * ra.feat + w.weight_align * ra.align;
    const double fused_b = w.weight_sem * rb.sem + w.weight_feat * rb.feat + w.weight_align * rb.align;
    out.mean_enriched += fused_a;
    out.mean_passthrough += fused_b;
    diffs.push_back(fused_a - fused_b);
  }
  out.mean_enriched /= pairs;
  out.mean_passthrough /= pairs;
  double mean = 0.0;
  for (double d : diffs) mean += d;
  mean /= static_cast<double>(diffs.size());
  double var = 0.0;
  for (double d : diffs) var += (d - mean) * (d - mean);
  var /= static_cast<double>(diffs.size() - 1);
  const double se = std::sqrt(var / static_cast<double>(diffs.size()));
  out.mean_diff = mean;
  out.ci_lo = mean - 1.959963984540054 * se;
  out.ci_hi = mean + 1.959963984540054 * se;
  return out;
}

void ablate_reward_swap(const ExperimentConfig& cfg, int seeds, int steps_override) {
  const RunPaths paths = paths_for(cfg);
  RunLock lock(paths.dir);
  Manifest manifest = prepare_run(cfg, paths);
  require_file(paths.generator_sft(), "pretrain-generator");
  require_file(paths.detectors(), "train-detectors");
  require_file(paths.policy_sft(), "sft-policy");
  require(seeds >= 1, "ablate: seeds must be >= 1");
  const auto start = Clock::now();
  std::filesystem::create_directories(paths.ablate_dir());

  const FlowModel base = load_flow(paths.generator_sft());
  const DetectorSuite suite = load_detector_suite(paths.detectors());
  const PromptPolicy policy = load_policy(stage2_policy_path(cfg, paths));
  const int steps = steps_override > 0 ? steps_override : cfg.grpo.total_steps;

  struct Variant {
    const char* name;
    double w_sem, w_feat, w_align;
  };
  const Variant variants[] = {{"detector-score", 1.0, 1.0, 1.0},
                              {"alignment-only", 0.0, 0.0, 1.0},
                              {"feature-only", 0.0, 1.0, 0.0}};

  const auto csv_path = paths.ablate_dir() / "reward_swap.csv";
  std::ofstream csv(csv_path, std::ios::binary);
  csv << "seed,variant,heldout_before,heldout_after,gain\n";
  std::vector<std::filesystem::path> outputs = {csv_path};

  for (int s = 0; s < seeds; ++s) {
    ExperimentConfig run_cfg = cfg;
    run_cfg.seed = cfg.seed + static_cast<std::uint64_t>(s);
    const DetectorScores before =
        score_generator(run_cfg, base, suite, ConditionMode::kCaption, nullptr, 7001);
    for (const auto& variant : variants) {
      ExperimentConfig vcfg = run_cfg;
      vcfg.grpo.fusion.weight_sem = variant.w_sem;
      vcfg.grpo.fusion.weight_feat = variant.w_feat;
      vcfg.grpo.fusion.weight_align = variant.w_align;
      Stage2Trainer trainer(base, &policy, &suite, vcfg.grpo);
      Rng rng = Rng(vcfg.seed).named("ablate-stage2");
      const auto metrics_path =
          paths.ablate_dir() / ("metrics_" + std::string(variant.name) + "_seed" +
                                std::to_string(vcfg.seed) + ".jsonl");
      JsonlWriter writer(metrics_path.string());
      for (int step = 0; step < steps; ++step) writer.write(metrics_json(trainer.step(rng)));
      writer.flush();
      const DetectorScores after = score_generator(
          vcfg, trainer.generator(), suite, ConditionMode::kCaption, nullptr, 7001);
      csv << vcfg.seed << "," << variant.name << "," << before.heldout << ","
          << after.heldout << "," << (after.heldout - before.heldout) << "\n";
      outputs.push_back(metrics_path);
    }
  }
  csv.close();

  const double ms = ms_since(start);
  append_timing(paths, "ablate-reward-swap", ms);
  manifest.record_phase("ablate-reward-swap", outputs, ms);
}

void ablate_stage_wise(const ExperimentConfig& cfg, int steps_override) {
  (void)steps_override;
  const RunPaths paths = paths_for(cfg);
  RunLock lock(paths.dir);
  Manifest manifest = prepare_run(cfg, paths);
  require_file(paths.generator_sft(), "pretrain-generator");
  require_file(paths.detectors(), "train-detectors");
  require_file(paths.policy_stage1(), "grpo-stage1");
  require_file(paths.generator_stage2(), "grpo-stage2");
  const auto start = Clock::now();
  std::filesystem::create_directories(paths.ablate_dir());

  const FlowModel base = load_flow(paths.generator_sft());
  const FlowModel tuned = load_flow(paths.generator_stage2());
  const DetectorSuite suite = load_detector_suite(paths.detectors());
  const PromptPolicy policy = load_policy(paths.policy_stage1());

  Rng rng = Rng(cfg.seed).named("ablate-stagewise");
  std::vector<Entry> entries;
  entries.push_back(build_real_entry("real", holdout_real_data(cfg), cfg.world.num_classes));
  Rng r0 = rng.named("base");
  entries.push_back(build_generator_entry("base", base, ConditionMode::kUser, nullptr,
                                          cfg.bench.pool_per_class, r0));
  Rng r1 = rng.named("stage1-only");
  entries.push_back(build_generator_entry("stage1-only", base, ConditionMode::kPolicy,
                                          &policy, cfg.bench.pool_per_class, r1));
  Rng r2 = rng.named("stage1+stage2");
  entries.push_back(build_generator_entry("stage1+stage2", tuned, ConditionMode::kPolicy,
                                          &policy, cfg.bench.pool_per_class, r2));

  const Judge judge = heldout_judge(suite.heldout);
  Rng battle_rng = rng.named("battles");
  const ArenaResult result = run_arena(entries, judge, cfg.bench.battles, battle_rng);

  const auto csv_path = paths.ablate_dir() / "stage_wise.csv";
  std::ofstream csv(csv_path, std::ios::binary);
  csv << "variant,heldout_score,vs_real_win_rate\n";
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const DetectorScores scores = detector_scoring(entries[i], suite, cfg.bench.score_per_class);
    const WilsonInterval vs = vs_real_winrate(result.matrix, entries[i].id);
    csv << entries[i].id << "," << scores.heldout << "," << vs.point << "\n";
  }
  csv.close();
  write_battle_log_jsonl((paths.ablate_dir() / "stage_wise_battles.jsonl").string(), result);

  const double ms = ms_since(start);
  append_timing(paths, "ablate-stage-wise", ms);
  manifest.record_phase("ablate-stage-wise",
                        {csv_path, paths.ablate_dir() / "stage_wise_battles.jsonl"}, ms);
}

void report_phase(const std::vector<std::string>& run_dirs) {
  require(!run_dirs.empty(), "report: no run directories given");
  for (const auto& dir : run_dirs) {
    require(std::filesystem::exists(std::filesystem::path(dir) / "config.json"),
            "report: " + dir + " is not a run directory (no config.json)");
    write_report(dir);
  }
}

}  // namespace detgen::pipeline

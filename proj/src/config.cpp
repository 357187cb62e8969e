#include "detgen/config.hpp"

#include <CLI11.hpp>

#include <nlohmann/json.hpp>

#include "detgen/bench.hpp"
#include "detgen/common.hpp"
#include "detgen/manifest.hpp"

namespace detgen {

void ExperimentConfig::validate() {
  require(schema_version == 1, "unsupported config schema_version (expected 1)");
  world.validate();
  grpo.validate();
  require(fm_data_n >= 16, "fm_data_n too small");
  require(detector_generated_n >= 16, "detector_generated_n too small");
  require(sft_pairs >= 1, "sft_pairs must be >= 1");
  require(bench.battles >= 1, "bench.battles must be >= 1");
  require(bench.pool_per_class >= 1, "bench.pool_per_class must be >= 1");
  require(bench.holdout_real_n >= world.num_classes,
          "bench.holdout_real_n must cover every class");
  condition_mode_from_name(bench.entry_mode);
  require(stage2_policy == "auto" || stage2_policy == "sft" || stage2_policy == "stage1",
          "stage2_policy must be auto|sft|stage1");
  require(flow.t_steps >= 2, "flow.t_steps must be >= 2");
  require(flow.eta >= 0.0, "flow.eta must be >= 0");
  require(grpo.window_len < flow.t_steps, "grpo.window_len must be < flow.t_steps");
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = schema_version;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["world"] = world.to_json();
  j["flow"] = {{"t_steps", flow.t_steps},
               {"eta", flow.eta},
               {"hidden", flow.hidden},
               {"cond_dim", flow.cond_dim}};
  j["fm"] = {{"epochs", fm.epochs}, {"batch", fm.batch}, {"lr", fm.lr},
             {"data_n", fm_data_n}};
  j["detectors"] = {{"steps", detectors.steps},
                    {"batch", detectors.batch},
                    {"lr", detectors.lr},
                    {"feature_hidden", detectors.feature_hidden},
                    {"heldout_hidden", detectors.heldout_hidden},
                    {"alignment_hidden", detectors.alignment_hidden},
                    {"anchor_count", detectors.anchor_count},
                    {"density_k", detectors.density_k},
                    {"generated_n", detector_generated_n}};
  j["policy"] = {{"embed_dim", policy.embed_dim},
                 {"hidden", policy.hidden},
                 {"temperature", policy.temperature}};
  j["sft"] = {{"epochs", sft.epochs}, {"batch", sft.batch}, {"lr", sft.lr},
              {"pairs", sft_pairs}};
  j["grpo"] = {{"group_size", grpo.group_size},
               {"clip_eps", grpo.clip_eps},
               {"kl_beta", grpo.kl_beta},
               {"stage1_lr", grpo.stage1_lr},
               {"stage2_lr", grpo.stage2_lr},
               {"stage1_groups", grpo.stage1_groups},
               {"stage2_groups", grpo.stage2_groups},
               {"total_steps", grpo.total_steps},
               {"window_len", grpo.window_len},
               {"rewrite_fraction", grpo.rewrite_fraction},
               {"advantage_scope", advantage_scope_name(grpo.advantage_scope)},
               {"inner_epochs", grpo.inner_epochs},
               {"reward_weights",
                {grpo.fusion.weight_sem, grpo.fusion.weight_feat, grpo.fusion.weight_align}},
               {"stage2_policy", stage2_policy}};
  j["bench"] = {{"battles", bench.battles},
                {"pool_per_class", bench.pool_per_class},
                {"score_per_class", bench.score_per_class},
                {"holdout_real_n", bench.holdout_real_n},
                {"entry_mode", bench.entry_mode}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.schema_version = j.at("schema_version").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.out_dir = j.at("out_dir").get<std::string>();
  c.world = WorldSpec::from_json(j.at("world"));
  const auto& f = j.at("flow");
  c.flow.t_steps = f.at("t_steps").get<int>();
  c.flow.eta = f.at("eta").get<double>();
  c.flow.hidden = f.at("hidden").get<std::vector<int>>();
  c.flow.cond_dim = f.at("cond_dim").get<int>();
  const auto& fm = j.at("fm");
  c.fm.epochs = fm.at("epochs").get<int>();
  c.fm.batch = fm.at("batch").get<int>();
  c.fm.lr = fm.at("lr").get<double>();
  c.fm_data_n = fm.at("data_n").get<int>();
  const auto& d = j.at("detectors");
  c.detectors.steps = d.at("steps").get<int>();
  c.detectors.batch = d.at("batch").get<int>();
  c.detectors.lr = d.at("lr").get<double>();
  c.detectors.feature_hidden = d.at("feature_hidden").get<int>();
  c.detectors.heldout_hidden = d.at("heldout_hidden").get<int>();
  c.detectors.alignment_hidden = d.at("alignment_hidden").get<int>();
  c.detectors.anchor_count = d.at("anchor_count").get<int>();
  c.detectors.density_k = d.at("density_k").get<int>();
  c.detector_generated_n = d.at("generated_n").get<int>();
  const auto& p = j.at("policy");
  c.policy.embed_dim = p.at("embed_dim").get<int>();
  c.policy.hidden = p.at("hidden").get<std::vector<int>>();
  c.policy.temperature = p.at("temperature").get<double>();
  const auto& s = j.at("sft");
  c.sft.epochs = s.at("epochs").get<int>();
  c.sft.batch = s.at("batch").get<int>();
  c.sft.lr = s.at("lr").get<double>();
  c.sft_pairs = s.at("pairs").get<int>();
  const auto& g = j.at("grpo");
  c.grpo.group_size = g.at("group_size").get<int>();
  c.grpo.clip_eps = g.at("clip_eps").get<double>();
  c.grpo.kl_beta = g.at("kl_beta").get<double>();
  c.grpo.stage1_lr = g.at("stage1_lr").get<double>();
  c.grpo.stage2_lr = g.at("stage2_lr").get<double>();
  c.grpo.stage1_groups = g.at("stage1_groups").get<int>();
  c.grpo.stage2_groups = g.at("stage2_groups").get<int>();
  c.grpo.total_steps = g.at("total_steps").get<int>();
  c.grpo.window_len = g.at("window_len").get<int>();
  c.grpo.rewrite_fraction = g.at("rewrite_fraction").get<double>();
  c.grpo.advantage_scope =
      advantage_scope_from_name(g.at("advantage_scope").get<std::string>());
  c.grpo.inner_epochs = g.at("inner_epochs").get<int>();
  const auto w = g.at("reward_weights").get<std::vector<double>>();
  require(w.size() == 3, "config: reward_weights must have 3 entries");
  c.grpo.fusion.weight_sem = w[0];
  c.grpo.fusion.weight_feat = w[1];
  c.grpo.fusion.weight_align = w[2];
  c.stage2_policy = g.at("stage2_policy").get<std::string>();
  const auto& b = j.at("bench");
  c.bench.battles = b.at("battles").get<long>();
  c.bench.pool_per_class = b.at("pool_per_class").get<int>();
  c.bench.score_per_class = b.at("score_per_class").get<int>();
  c.bench.holdout_real_n = b.at("holdout_real_n").get<int>();
  c.bench.entry_mode = b.at("entry_mode").get<std::string>();
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const { return sha256_hex(to_json().dump()); }

namespace {

// CLI11 resolves [section] keys against subcommands; this parser flattens
// section paths into the dotted option names used below, so plain sectioned
// TOML files work.
class FlatToml : public CLI::ConfigTOML {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::vector<CLI::ConfigItem> flat;
    for (auto& item : CLI::ConfigTOML::from_config(input)) {
      if (item.name == "++" || item.name == "--") continue;  // section markers
      if (!item.parents.empty()) {
        std::string joined;
        for (const auto& p : item.parents) joined += p + ".";
        item.name = joined + item.name;
        item.parents.clear();
      }
      flat.push_back(std::move(item));
    }
    return flat;
  }
};

}  // namespace

void register_options(CLI::App& app, ExperimentConfig& cfg) {
  app.set_config("--config", "", "TOML config file");
  app.config_formatter(std::make_shared<FlatToml>());
  app.allow_config_extras(CLI::config_extras_mode::error);

  app.add_option("--schema-version", cfg.schema_version, "config schema version");
  app.add_option("--seed", cfg.seed, "master seed; all phases derive named streams");
  app.add_option("--out", cfg.out_dir, "run directory");

  app.add_option("--world.dim", cfg.world.dim);
  app.add_option("--world.num-classes", cfg.world.num_classes);
  app.add_option("--world.sub-modes", cfg.world.sub_modes);
  app.add_option("--world.style-tokens", cfg.world.style_tokens);
  app.add_option("--world.ring-radius", cfg.world.ring_radius);
  app.add_option("--world.sub-offset", cfg.world.sub_offset);
  app.add_option("--world.style-sigma", cfg.world.style_sigma);
  app.add_option("--world.prompt-len", cfg.world.prompt_len);

  app.add_option("--flow.t-steps", cfg.flow.t_steps);
  app.add_option("--flow.eta", cfg.flow.eta);
  app.add_option("--flow.hidden", cfg.flow.hidden);
  app.add_option("--flow.cond-dim", cfg.flow.cond_dim);

  app.add_option("--fm.epochs", cfg.fm.epochs);
  app.add_option("--fm.batch", cfg.fm.batch);
  app.add_option("--fm.lr", cfg.fm.lr);
  app.add_option("--fm.data-n", cfg.fm_data_n);

  app.add_option("--detectors.steps", cfg.detectors.steps);
  app.add_option("--detectors.batch", cfg.detectors.batch);
  app.add_option("--detectors.lr", cfg.detectors.lr);
  app.add_option("--detectors.feature-hidden", cfg.detectors.feature_hidden);
  app.add_option("--detectors.heldout-hidden", cfg.detectors.heldout_hidden);
  app.add_option("--detectors.alignment-hidden", cfg.detectors.alignment_hidden);
  app.add_option("--detectors.anchor-count", cfg.detectors.anchor_count);
  app.add_option("--detectors.density-k", cfg.detectors.density_k);
  app.add_option("--detectors.generated-n", cfg.detector_generated_n);

  app.add_option("--policy.embed-dim", cfg.policy.embed_dim);
  app.add_option("--policy.hidden", cfg.policy.hidden);
  app.add_option("--policy.temperature", cfg.policy.temperature);

  app.add_option("--sft.epochs", cfg.sft.epochs);
  app.add_option("--sft.batch", cfg.sft.batch);
  app.add_option("--sft.lr", cfg.sft.lr);
  app.add_option("--sft.pairs", cfg.sft_pairs);

  app.add_option("--grpo.group-size", cfg.grpo.group_size);
  app.add_option("--grpo.clip-eps", cfg.grpo.clip_eps);
  app.add_option("--grpo.kl-beta", cfg.grpo.kl_beta);
  app.add_option("--grpo.stage1-lr", cfg.grpo.stage1_lr);
  app.add_option("--grpo.stage2-lr", cfg.grpo.stage2_lr);
  app.add_option("--grpo.stage1-groups", cfg.grpo.stage1_groups);
  app.add_option("--grpo.stage2-groups", cfg.grpo.stage2_groups);
  app.add_option("--grpo.total-steps", cfg.grpo.total_steps);
  app.add_option("--grpo.window-len", cfg.grpo.window_len);
  app.add_option("--grpo.rewrite-fraction", cfg.grpo.rewrite_fraction);
  app.add_option_function<std::string>(
      "--grpo.advantage-scope",
      [&cfg](const std::string& v) { cfg.grpo.advantage_scope = advantage_scope_from_name(v); },
      "group|batch");
  app.add_option("--grpo.inner-epochs", cfg.grpo.inner_epochs);
  app.add_option("--grpo.weight-sem", cfg.grpo.fusion.weight_sem);
  app.add_option("--grpo.weight-feat", cfg.grpo.fusion.weight_feat);
  app.add_option("--grpo.weight-align", cfg.grpo.fusion.weight_align);
  app.add_option("--grpo.stage2-policy", cfg.stage2_policy, "auto|sft|stage1");

  app.add_option("--bench.battles", cfg.bench.battles);
  app.add_option("--bench.pool-per-class", cfg.bench.pool_per_class);
  app.add_option("--bench.score-per-class", cfg.bench.score_per_class);
  app.add_option("--bench.holdout-real-n", cfg.bench.holdout_real_n);
  app.add_option("--bench.entry-mode", cfg.bench.entry_mode, "user|caption|policy");
}

}  // namespace detgen

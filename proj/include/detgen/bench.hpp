#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "detgen/detectors.hpp"
#include "detgen/flow.hpp"
#include "detgen/policy.hpp"
#include "detgen/world.hpp"

namespace detgen {

// A contestant: either a generator checkpoint or the real-data pool, holding
// one sample pool per class.
struct Entry {
  std::string id;
  bool is_real = false;
  std::vector<std::vector<Sample>> pools;  // [class][sample]

  void validate() const;
  int num_classes() const { return static_cast<int>(pools.size()); }
};

enum class ConditionMode { kUser, kCaption, kPolicy };
ConditionMode condition_mode_from_name(const std::string& name);
std::string condition_mode_name(ConditionMode m);

Entry build_real_entry(const std::string& id, const std::vector<Sample>& held_out,
                       int num_classes);

// per_class samples per class via deterministic ODE sampling; conditions per
// the mode (bare user prompt, uniform caption, or policy-enriched).
Entry build_generator_entry(const std::string& id, const FlowModel& model,
                            ConditionMode mode, const PromptPolicy* policy,
                            int per_class, Rng& rng);

// Forced-choice realism judge; higher score = judged more real.
struct Judge {
  std::string name;
  std::function<double(const Sample&)> realism_score;
};

Judge heldout_judge(const FeatureDetector& heldout);

struct Verdict {
  bool first_wins = false;
  double margin = 0.0;
};

// Margin below 1e-9 resolves by a fair coin from the battle's stream. Throws
// NumericError when a score comes back non-finite.
Verdict judge_forced_choice(const Judge& judge, const Sample& a, const Sample& b,
                            Rng& rng);

struct WilsonInterval {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

WilsonInterval wilson_interval(long wins, long total);  // 95%

struct WinMatrix {
  std::vector<std::string> entries;
  std::vector<bool> is_real;
  std::vector<std::vector<long>> counts;  // counts[i][j] = wins of i over j

  long total(std::size_t i, std::size_t j) const { return counts[i][j] + counts[j][i]; }
  double win_rate(std::size_t i, std::size_t j) const;
  WilsonInterval interval(std::size_t i, std::size_t j) const;
  // All battles of entry i pooled over opponents.
  WilsonInterval overall(std::size_t i) const;
  std::size_t index_of(const std::string& id) const;
  std::optional<std::size_t> real_index() const;
};

struct BattleRecord {
  long battle_id = 0;
  int cls = 0;
  std::string entry_a;  // as presented
  std::string entry_b;
  double margin = 0.0;
  std::string winner;
};

struct ArenaResult {
  WinMatrix matrix;
  std::vector<BattleRecord> log;
  long judge_errors = 0;
};

// Uniform unordered entry pairs, prompt-matched by class, randomized
// presentation. A failed battle is retried once with fresh samples and then
// excluded (counted in judge_errors). Parallel over battles; results are
// identical to sequential execution.
ArenaResult run_arena(const std::vector<Entry>& entries, const Judge& judge,
                      long num_battles, Rng& rng);

struct DetectorScores {
  double semantic = 0.0;
  double feature = 0.0;  // real-probability under the reward feature detector
  double heldout = 0.0;  // real-probability under the reward-independent detector
};

// Mean per-detector real-scores over up to n_per_class samples per class.
DetectorScores detector_scoring(const Entry& entry, const DetectorSuite& suite,
                                int n_per_class);

WilsonInterval vs_real_winrate(const WinMatrix& matrix, const std::string& entry);

void write_battle_log_jsonl(const std::string& path, const ArenaResult& result);
void write_win_matrix_csv(const std::string& path, const WinMatrix& matrix);
nlohmann::json win_matrix_json(const WinMatrix& matrix);

}  // namespace detgen

#include "detgen/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "detgen/common.hpp"

namespace detgen {
namespace {

int worker_count() {
  if (const char* env = std::getenv("DETGEN_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Deterministic parallel map: every index writes only its own slot.
template <typename Fn>
void parallel_for(long n, Fn&& fn) {
  const int workers = std::min<long>(worker_count(), n);
  if (workers <= 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      for (long i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : threads) t.join();
}

}  // namespace

void Entry::validate() const {
  require(!pools.empty(), "entry " + id + ": no class pools");
  for (const auto& pool : pools) {
    require(!pool.empty(), "entry " + id + ": a class pool is empty");
  }
}

ConditionMode condition_mode_from_name(const std::string& name) {
  if (name == "user") return ConditionMode::kUser;
  if (name == "caption") return ConditionMode::kCaption;
  if (name == "policy") return ConditionMode::kPolicy;
  throw ConfigError("condition mode must be user|caption|policy, got " + name);
}

std::string condition_mode_name(ConditionMode m) {
  switch (m) {
    case ConditionMode::kUser: return "user";
    case ConditionMode::kCaption: return "caption";
    default: return "policy";
  }
}

Entry build_real_entry(const std::string& id, const std::vector<Sample>& held_out,
                       int num_classes) {
  Entry e;
  e.id = id;
  e.is_real = true;
  e.pools.resize(static_cast<std::size_t>(num_classes));
  for (const auto& s : held_out) {
    e.pools[static_cast<std::size_t>(s.condition.user_class)].push_back(s);
  }
  e.validate();
  return e;
}

Entry build_generator_entry(const std::string& id, const FlowModel& model,
                            ConditionMode mode, const PromptPolicy* policy,
                            int per_class, Rng& rng) {
  require(per_class >= 1, "entry: per_class must be >= 1");
  require(mode != ConditionMode::kPolicy || policy != nullptr,
          "entry: policy mode needs a policy checkpoint");
  Entry e;
  e.id = id;
  e.pools.resize(static_cast<std::size_t>(model.world.num_classes));
  for (int k = 0; k < model.world.num_classes; ++k) {
    Rng class_rng = rng.stream(static_cast<std::uint64_t>(k));
    for (int i = 0; i < per_class; ++i) {
      Rng item_rng = class_rng.stream(static_cast<std::uint64_t>(i));
      PromptSeq cond;
      switch (mode) {
        case ConditionMode::kUser:
          cond = user_prompt(model.world, model.vocab, k);
          break;
        case ConditionMode::kCaption: {
          const int m = static_cast<int>(
              item_rng.below(static_cast<std::uint64_t>(model.world.sub_modes)));
          const int s = static_cast<int>(
              item_rng.below(static_cast<std::uint64_t>(model.world.style_tokens)));
          cond = caption_prompt(model.world, model.vocab, k, m, s);
          break;
        }
        case ConditionMode::kPolicy: {
          const PromptSeq user = user_prompt(model.world, model.vocab, k);
          Rng roll_rng = item_rng.named("rewrite");
          cond = rollout(*policy, *policy, user, 1, roll_rng)[0].prompt;
          break;
        }
      }
      Rng gen_rng = item_rng.named("ode");
      e.pools[static_cast<std::size_t>(k)].push_back(
          sample_ode(model, cond, gen_rng, id).sample);
    }
  }
  e.validate();
  return e;
}

Judge heldout_judge(const FeatureDetector& heldout) {
  return {"heldout",
          [&heldout](const Sample& s) { return heldout.real_probability(s.x); }};
}

Verdict judge_forced_choice(const Judge& judge, const Sample& a, const Sample& b,
                            Rng& rng) {
  const double sa = judge.realism_score(a);
  const double sb = judge.realism_score(b);
  if (!std::isfinite(sa) || !std::isfinite(sb)) {
    throw NumericError("judge " + judge.name + " returned a non-finite score");
  }
  Verdict v;
  v.margin = std::abs(sa - sb);
  if (v.margin < 1e-9) {
    v.first_wins = rng.coin();
  } else {
    v.first_wins = sa > sb;
  }
  return v;
}

WilsonInterval wilson_interval(long wins, long total) {
  require(total >= 1, "wilson_interval: total must be >= 1");
  constexpr double z = 1.959963984540054;  // 95%
  const double n = static_cast<double>(total);
  const double p = static_cast<double>(wins) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {p, center - half, center + half};
}

double WinMatrix::win_rate(std::size_t i, std::size_t j) const {
  const long t = total(i, j);
  require(t >= 1, "win_rate: no battles between entries");
  return static_cast<double>(counts[i][j]) / static_cast<double>(t);
}

WilsonInterval WinMatrix::interval(std::size_t i, std::size_t j) const {
  return wilson_interval(counts[i][j], total(i, j));
}

WilsonInterval WinMatrix::overall(std::size_t i) const {
  long wins = 0, tot = 0;
  for (std::size_t j = 0; j < entries.size(); ++j) {
    if (j == i) continue;
    wins += counts[i][j];
    tot += total(i, j);
  }
  return wilson_interval(wins, tot);
}

std::size_t WinMatrix::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i] == id) return i;
  }
  throw ConfigError("entry not in matrix: " + id);
}

std::optional<std::size_t> WinMatrix::real_index() const {
  for (std::size_t i = 0; i < is_real.size(); ++i) {
    if (is_real[i]) return i;
  }
  return std::nullopt;
}

ArenaResult run_arena(const std::vector<Entry>& entries, const Judge& judge,
                      long num_battles, Rng& rng) {
  require(entries.size() >= 2, "arena: need at least 2 entries");
  require(num_battles >= 1, "arena: num_battles must be >= 1");
  const int num_classes = entries[0].num_classes();
  for (const auto& e : entries) {
    e.validate();
    require(e.num_classes() == num_classes, "arena: entries disagree on class count");
  }

  const std::size_t ne = entries.size();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < ne; ++i)
    for (std::size_t j = i + 1; j < ne; ++j) pairs.emplace_back(i, j);

  struct Outcome {
    bool valid = false;
    std::size_t winner = 0, loser = 0;
    BattleRecord record;
  };
  std::vector<Outcome> outcomes(static_cast<std::size_t>(num_battles));

  parallel_for(num_battles, [&](long b) {
    Rng battle_rng = rng.stream(static_cast<std::uint64_t>(b));
    const auto [i, j] = pairs[battle_rng.below(pairs.size())];
    const int cls = static_cast<int>(battle_rng.below(static_cast<std::uint64_t>(num_classes)));
    const bool swap = battle_rng.coin();
    const std::size_t first = swap ? j : i;
    const std::size_t second = swap ? i : j;

    Outcome& out = outcomes[static_cast<std::size_t>(b)];
    for (int attempt = 0; attempt < 2; ++attempt) {
      const auto& pool_a = entries[first].pools[static_cast<std::size_t>(cls)];
      const auto& pool_b = entries[second].pools[static_cast<std::size_t>(cls)];
      const Sample& xa = pool_a[battle_rng.below(pool_a.size())];
      const Sample& xb = pool_b[battle_rng.below(pool_b.size())];
      try {
        const Verdict v = judge_forced_choice(judge, xa, xb, battle_rng);
        out.valid = true;
        out.winner = v.first_wins ? first : second;
        out.loser = v.first_wins ? second : first;
        out.record = {b, cls, entries[first].id, entries[second].id, v.margin,
                      entries[out.winner].id};
        return;
      } catch (const NumericError&) {
        // retried once with fresh samples, then dropped
      }
    }
  });

  ArenaResult result;
  result.matrix.entries.reserve(ne);
  for (const auto& e : entries) {
    result.matrix.entries.push_back(e.id);
    result.matrix.is_real.push_back(e.is_real);
  }
  result.matrix.counts.assign(ne, std::vector<long>(ne, 0));
  for (const auto& out : outcomes) {
    if (!out.valid) {
      ++result.judge_errors;
      continue;
    }
    ++result.matrix.counts[out.winner][out.loser];
    result.log.push_back(out.record);
  }
  return result;
}

DetectorScores detector_scoring(const Entry& entry, const DetectorSuite& suite,
                                int n_per_class) {
  require(n_per_class >= 1, "detector_scoring: n_per_class must be >= 1");
  entry.validate();
  DetectorScores total;
  std::size_t count = 0;
  for (const auto& pool : entry.pools) {
    const std::size_t n = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(n_per_class));
    for (std::size_t i = 0; i < n; ++i) {
      total.semantic += semantic_reward(suite.semantic, pool[i]);
      total.feature += suite.feature.real_probability(pool[i].x);
      total.heldout += suite.heldout.real_probability(pool[i].x);
      ++count;
    }
  }
  total.semantic /= static_cast<double>(count);
  total.feature /= static_cast<double>(count);
  total.heldout /= static_cast<double>(count);
  return total;
}

WilsonInterval vs_real_winrate(const WinMatrix& matrix, const std::string& entry) {
  const auto real = matrix.real_index();
  require(real.has_value(), "vs_real_winrate: no real entry in the matrix");
  const std::size_t i = matrix.index_of(entry);
  require(i != *real, "vs_real_winrate: entry is the real entry itself");
  require(matrix.total(i, *real) >= 1, "vs_real_winrate: no battles against real");
  return matrix.interval(i, *real);
}

void write_battle_log_jsonl(const std::string& path, const ArenaResult& result) {
  std::ofstream out(path, std::ios::binary);
  require(out.is_open(), "cannot open battle log for writing: " + path);
  for (const auto& r : result.log) {
    nlohmann::ordered_json j;
    j["battle_id"] = r.battle_id;
    j["class"] = r.cls;
    j["entry_a"] = r.entry_a;
    j["entry_b"] = r.entry_b;
    j["margin"] = r.margin;
    j["winner"] = r.winner;
    out << j.dump() << "\n";
  }
}

void write_win_matrix_csv(const std::string& path, const WinMatrix& matrix) {
  std::ofstream out(path, std::ios::binary);
  require(out.is_open(), "cannot open win matrix for writing: " + path);
  out << "entry";
  for (const auto& e : matrix.entries) out << "," << e;
  out << "\n";
  for (std::size_t i = 0; i < matrix.entries.size(); ++i) {
    out << matrix.entries[i];
    for (std::size_t j = 0; j < matrix.entries.size(); ++j) {
      if (i == j || matrix.total(i, j) == 0) {
        out << ",";
      } else {
        out << "," << matrix.win_rate(i, j);
      }
    }
    out << "\n";
  }
}

nlohmann::json win_matrix_json(const WinMatrix& matrix) {
  nlohmann::ordered_json j;
  j["entries"] = matrix.entries;
  j["is_real"] = std::vector<int>(matrix.is_real.begin(), matrix.is_real.end());
  j["counts"] = matrix.counts;
  nlohmann::ordered_json cells = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < matrix.entries.size(); ++i) {
    for (std::size_t k = 0; k < matrix.entries.size(); ++k) {
      if (i == k || matrix.total(i, k) == 0) continue;
      const WilsonInterval w = matrix.interval(i, k);
      nlohmann::ordered_json cell;
      cell["entry"] = matrix.entries[i];
      cell["opponent"] = matrix.entries[k];
      cell["wins"] = matrix.counts[i][k];
      cell["total"] = matrix.total(i, k);
      cell["win_rate"] = w.point;
      cell["wilson_lo"] = w.lo;
      cell["wilson_hi"] = w.hi;
      cells.push_back(std::move(cell));
    }
  }
  j["cells"] = std::move(cells);
  return j;
}

}  // namespace detgen

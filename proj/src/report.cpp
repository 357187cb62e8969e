#include "detgen/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "detgen/common.hpp"
#include "detgen/config.hpp"
#include "detgen/flow.hpp"
#include "detgen/world.hpp"

namespace detgen {
namespace {

namespace fs = std::filesystem;

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::vector<nlohmann::json> rows;
  std::ifstream in(path, std::ios::binary);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
  }
  return rows;
}

struct Series {
  std::string name;
  std::vector<double> values;
};

void write_curves_svg(const fs::path& path, const std::vector<Series>& series,
                      const std::string& title) {
  const int width = 640, height = 360, margin = 45;
  std::ofstream out(path, std::ios::binary);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  out << "<text x=\"10\" y=\"18\" font-size=\"14\">" << title << "</text>\n";
  double lo = 0.0, hi = 1.0;
  bool first = true;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values) {
      if (first) {
        lo = hi = v;
        first = false;
      }
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi <= lo) hi = lo + 1.0;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  int ci = 0;
  for (const auto& s : series) {
    std::ostringstream pts;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      const double x = margin + (width - 2.0 * margin) * (s.values.size() == 1 ? 0.0 : static_cast<double>(i) / (s.values.size() - 1));
      const double y = height - margin - (height - 2.0 * margin) * (s.values[i] - lo) / (hi - lo);
      pts << x << "," << y << " ";
    }
    const char* color = colors[ci % 5];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\""
        << pts.str() << "\"/>\n";
    out << "<text x=\"" << (margin + 90 * ci) << "\" y=\"" << (height - 8)
        << "\" font-size=\"11\" fill=\"" << color << "\">" << s.name << "</text>\n";
    ++ci;
  }
  out << "<text x=\"6\" y=\"" << margin << "\" font-size=\"10\">" << hi << "</text>\n";
  out << "<text x=\"6\" y=\"" << (height - margin) << "\" font-size=\"10\">" << lo << "</text>\n";
  out << "</svg>\n";
}

// color scale blue (0) -> white (0.5) -> red (1)
std::string heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  int r, g, b;
  if (v < 0.5) {
    const double t = v / 0.5;
    r = static_cast<int>(49 + t * (255 - 49));
    g = static_cast<int>(54 + t * (255 - 54));
    b = static_cast<int>(149 + t * (255 - 149));
  } else {
    const double t = (v - 0.5) / 0.5;
    r = static_cast<int>(255 - t * (255 - 165));
    g = static_cast<int>(255 - t * (255 - 0));
    b = static_cast<int>(255 - t * (255 - 38));
  }
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
  return buf;
}

void write_heatmap_svg(const fs::path& path, const nlohmann::json& matrix_json) {
  const auto entries = matrix_json.at("entries").get<std::vector<std::string>>();
  const auto counts = matrix_json.at("counts").get<std::vector<std::vector<long>>>();
  const std::size_t n = entries.size();
  const int cell = 64, label = 120, top = 30;
  const int width = label + cell * static_cast<int>(n) + 10;
  const int height = top + label / 2 + cell * static_cast<int>(n) + 10;
  std::ofstream out(path, std::ios::binary);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  out << "<text x=\"10\" y=\"18\" font-size=\"14\">pairwise win rates (row beats column)</text>\n";
  for (std::size_t j = 0; j < n; ++j) {
    out << "<text x=\"" << (label + cell * j + 4) << "\" y=\"" << (top + 14)
        << "\" font-size=\"10\">" << entries[j] << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int y0 = top + label / 2 + cell * static_cast<int>(i);
    out << "<text x=\"4\" y=\"" << (y0 + cell / 2) << "\" font-size=\"10\">"
        << entries[i] << "</text>\n";
    for (std::size_t j = 0; j < n; ++j) {
      const int x0 = label + cell * static_cast<int>(j);
      const long total = counts[i][j] + counts[j][i];
      if (i == j || total == 0) {
        out << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << cell
            << "\" height=\"" << cell << "\" fill=\"#eeeeee\" stroke=\"#999\"/>\n";
        continue;
      }
      const double rate = static_cast<double>(counts[i][j]) / static_cast<double>(total);
      out << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"" << heat_color(rate)
          << "\" stroke=\"#999\" data-value=\"" << rate << "\"/>\n";
      out << "<text x=\"" << (x0 + 8) << "\" y=\"" << (y0 + cell / 2 + 4)
          << "\" font-size=\"11\">" << std::round(rate * 1000.0) / 10.0 << "%</text>\n";
    }
  }
  out << "</svg>\n";
}

struct ScatterSet {
  std::string name;
  std::string color;
  std::vector<std::pair<double, double>> points;
};

void write_scatter_svg(const fs::path& path, const std::vector<ScatterSet>& sets) {
  const int width = 560, height = 560, margin = 40;
  double lo = -6.0, hi = 6.0;
  for (const auto& s : sets) {
    for (const auto& [x, y] : s.points) {
      lo = std::min({lo, x, y});
      hi = std::max({hi, x, y});
    }
  }
  std::ofstream out(path, std::ios::binary);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  const auto sx = [&](double x) {
    return margin + (width - 2.0 * margin) * (x - lo) / (hi - lo);
  };
  const auto sy = [&](double y) {
    return height - margin - (height - 2.0 * margin) * (y - lo) / (hi - lo);
  };
  int li = 0;
  for (const auto& s : sets) {
    for (const auto& [x, y] : s.points) {
      out << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y)
          << "\" r=\"2\" fill=\"" << s.color << "\" fill-opacity=\"0.55\"/>\n";
    }
    out << "<text x=\"" << (margin + 150 * li) << "\" y=\"16\" font-size=\"12\" fill=\""
        << s.color << "\">" << s.name << "</text>\n";
    ++li;
  }
  out << "</svg>\n";
}

}  // namespace

void write_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  const fs::path report = dir / "report";
  fs::create_directories(report);

  nlohmann::ordered_json summary;
  summary["run_dir"] = run_dir;
  nlohmann::ordered_json artifacts = nlohmann::ordered_json::array();
  nlohmann::ordered_json gaps = nlohmann::ordered_json::array();

  // training curves
  const struct {
    const char* metrics;
    const char* csv;
    const char* svg;
    bool grpo;
  } curve_specs[] = {
      {"metrics_pretrain.jsonl", "curves_pretrain.csv", "curves_pretrain.svg", false},
      {"metrics_sft.jsonl", "curves_sft.csv", "curves_sft.svg", false},
      {"metrics_stage1.jsonl", "curves_stage1.csv", "curves_stage1.svg", true},
      {"metrics_stage2.jsonl", "curves_stage2.csv", "curves_stage2.svg", true},
  };
  for (const auto& spec : curve_specs) {
    const fs::path src = dir / spec.metrics;
    if (!fs::exists(src)) {
      gaps.push_back(std::string("missing ") + spec.metrics);
      continue;
    }
    const auto rows = read_jsonl(src);
    std::ofstream csv(report / spec.csv, std::ios::binary);
    std::vector<Series> series;
    if (spec.grpo) {
      csv << "step,loss,reward_sem,reward_feat,reward_align,mean_kl,clip_fraction\n";
      Series loss{"loss", {}}, rs{"r_sem", {}}, rf{"r_feat", {}}, ra{"r_align", {}};
      for (const auto& r : rows) {
        csv << r.at("step").get<long>() << "," << r.at("loss").get<double>() << ","
            << r.at("mean_reward").at("sem").get<double>() << ","
            << r.at("mean_reward").at("feat").get<double>() << ","
            << r.at("mean_reward").at("align").get<double>() << ","
            << r.at("mean_kl").get<double>() << ","
            << r.at("clip_fraction").get<double>() << "\n";
        loss.values.push_back(r.at("loss").get<double>());
        rs.values.push_back(r.at("mean_reward").at("sem").get<double>());
        rf.values.push_back(r.at("mean_reward").at("feat").get<double>());
        ra.values.push_back(r.at("mean_reward").at("align").get<double>());
      }
      series = {rs, rf, ra, loss};
    } else {
      csv << "epoch,loss\n";
      Series loss{"loss", {}};
      for (const auto& r : rows) {
        csv << r.at("epoch").get<long>() << "," << r.at("loss").get<double>() << "\n";
        loss.values.push_back(r.at("loss").get<double>());
      }
      series = {loss};
    }
    write_curves_svg(report / spec.svg, series, spec.metrics);
    artifacts.push_back(std::string("report/") + spec.csv);
    artifacts.push_back(std::string("report/") + spec.svg);
  }

  // arena heat map
  const fs::path matrix_path = dir / "bench" / "win_matrix.json";
  if (fs::exists(matrix_path)) {
    std::ifstream in(matrix_path, std::ios::binary);
    write_heatmap_svg(report / "win_matrix.svg", nlohmann::json::parse(in));
    artifacts.push_back("report/win_matrix.svg");
  } else {
    gaps.push_back("missing bench/win_matrix.json");
  }

  // real-vs-generated scatter, before/after the second training stage
  const fs::path cfg_path = dir / "config.json";
  if (fs::exists(cfg_path)) {
    std::ifstream in(cfg_path, std::ios::binary);
    ExperimentConfig cfg = ExperimentConfig::from_json(nlohmann::json::parse(in));
    std::vector<ScatterSet> sets;
    Rng rng = Rng(cfg.seed).named("report");
    const Vocabulary vocab(cfg.world);
    Rng real_rng = rng.named("real");
    ScatterSet real{"real", "#444444", {}};
    for (const auto& s : sample_real(cfg.world, vocab, 600, real_rng)) {
      real.points.emplace_back(s.x.data[0], s.x.data[1]);
    }
    sets.push_back(std::move(real));
    const struct {
      const char* file;
      const char* name;
      const char* color;
    } gens[] = {{"generator_sft.json", "generated (cold start)", "#d62728"},
                {"generator_stage2.json", "generated (post-training)", "#1f77b4"}};
    for (const auto& g : gens) {
      const fs::path ck = dir / g.file;
      if (!fs::exists(ck)) {
        gaps.push_back(std::string("missing ") + g.file);
        continue;
      }
      std::ifstream gin(ck, std::ios::binary);
      const FlowModel model = FlowModel::from_json(nlohmann::json::parse(gin));
      ScatterSet set{g.name, g.color, {}};
      Rng gen_rng = rng.named(g.file);
      for (int i = 0; i < 600; ++i) {
        Rng item = gen_rng.stream(static_cast<std::uint64_t>(i));
        const int k = static_cast<int>(item.below(static_cast<std::uint64_t>(cfg.world.num_classes)));
        const int m = static_cast<int>(item.below(static_cast<std::uint64_t>(cfg.world.sub_modes)));
        const int st = static_cast<int>(item.below(static_cast<std::uint64_t>(cfg.world.style_tokens)));
        const Sample s =
            sample_ode(model, caption_prompt(cfg.world, vocab, k, m, st), item, "report").sample;
        set.points.emplace_back(s.x.data[0], s.x.data[1]);
      }
      sets.push_back(std::move(set));
    }
    write_scatter_svg(report / "scatter.svg", sets);
    artifacts.push_back("report/scatter.svg");
  } else {
    gaps.push_back("missing config.json (no scatter overlay)");
  }

  summary["artifacts"] = std::move(artifacts);
  summary["gaps"] = std::move(gaps);
  std::ofstream out(report / "report.json", std::ios::binary);
  out << summary.dump(2) << "\n";
}

}  // namespace detgen

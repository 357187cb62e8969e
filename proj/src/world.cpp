#include "detgen/world.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "detgen/common.hpp"

namespace detgen {

void WorldSpec::validate() {
  require(dim >= 2, "world: dim must be >= 2");
  require(num_classes >= 1 && sub_modes >= 1 && style_tokens >= 1,
          "world: class/sub-mode/style counts must be positive");
  require(ring_radius > 0.0 && sub_offset >= 0.0, "world: bad geometry");
  require(prompt_len >= 4, "world: prompt_len must fit CLS+SUB+STYLE+PAD");
  if (style_sigma.empty()) {
    style_sigma.resize(static_cast<std::size_t>(style_tokens));
    style_sigma[0] = 0.05;
    for (int s = 1; s < style_tokens; ++s) {
      const double frac = style_tokens > 2
                              ? static_cast<double>(s - 1) / (style_tokens - 2)
                              : 0.0;
      style_sigma[static_cast<std::size_t>(s)] = 0.1 + 0.1 * frac;
    }
  }
  require(static_cast<int>(style_sigma.size()) == style_tokens,
          "world: style_sigma size must equal style_tokens");
  for (double s : style_sigma) require(s > 0.0, "world: style_sigma must be positive");
}

std::vector<double> WorldSpec::class_mean(int k) const {
  require(k >= 0 && k < num_classes, "class index out of range");
  std::vector<double> mu(static_cast<std::size_t>(dim), 0.0);
  const double angle = 2.0 * M_PI * k / num_classes;
  mu[0] = ring_radius * std::cos(angle);
  mu[1] = ring_radius * std::sin(angle);
  return mu;
}

std::vector<double> WorldSpec::fine_mode_mean(int k, int m) const {
  require(m >= 0 && m < sub_modes, "sub-mode index out of range");
  std::vector<double> mu = class_mean(k);
  const double angle = 2.0 * M_PI * m / sub_modes;
  mu[0] += sub_offset * std::cos(angle);
  mu[1] += sub_offset * std::sin(angle);
  return mu;
}

double WorldSpec::sigma_for_style(int s) const {
  require(s >= 0 && s < style_tokens, "style index out of range");
  return style_sigma[static_cast<std::size_t>(s)];
}

nlohmann::json WorldSpec::to_json() const {
  nlohmann::json j;
  j["dim"] = dim;
  j["num_classes"] = num_classes;
  j["sub_modes"] = sub_modes;
  j["style_tokens"] = style_tokens;
  j["ring_radius"] = ring_radius;
  j["sub_offset"] = sub_offset;
  j["style_sigma"] = style_sigma;
  j["prompt_len"] = prompt_len;
  return j;
}

WorldSpec WorldSpec::from_json(const nlohmann::json& j) {
  WorldSpec s;
  s.dim = j.at("dim").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.sub_modes = j.at("sub_modes").get<int>();
  s.style_tokens = j.at("style_tokens").get<int>();
  s.ring_radius = j.at("ring_radius").get<double>();
  s.sub_offset = j.at("sub_offset").get<double>();
  s.style_sigma = j.at("style_sigma").get<std::vector<double>>();
  s.prompt_len = j.at("prompt_len").get<int>();
  s.validate();
  return s;
}

Vocabulary::Vocabulary(const WorldSpec& spec)
    : k_(spec.num_classes), m_(spec.sub_modes), s_(spec.style_tokens) {}

int Vocabulary::cls_token(int k) const {
  require(k >= 0 && k < k_, "cls_token: class out of range");
  return k;
}

int Vocabulary::sub_token(int m) const {
  require(m >= 0 && m < m_, "sub_token: sub-mode out of range");
  return k_ + m;
}

int Vocabulary::style_token(int s) const {
  require(s >= 0 && s < s_, "style_token: style out of range");
  return k_ + m_ + s;
}

int Vocabulary::cls_of(int id) const {
  require(is_cls(id), "cls_of: not a CLS token");
  return id;
}

int Vocabulary::sub_of(int id) const {
  require(is_sub(id), "sub_of: not a SUB token");
  return id - k_;
}

int Vocabulary::style_of(int id) const {
  require(is_style(id), "style_of: not a STYLE token");
  return id - k_ - m_;
}

std::string Vocabulary::token_name(int id) const {
  if (is_cls(id)) return "CLS_" + std::to_string(cls_of(id));
  if (is_sub(id)) return "SUB_" + std::to_string(sub_of(id));
  if (is_style(id)) return "STYLE_" + std::to_string(style_of(id));
  if (is_pad(id)) return "PAD";
  throw ConfigError("token id out of vocabulary: " + std::to_string(id));
}

int Vocabulary::token_from_name(const std::string& name) const {
  if (name == "PAD") return pad_token();
  const auto us = name.find('_');
  require(us != std::string::npos, "bad token name: " + name);
  const std::string kind = name.substr(0, us);
  const int idx = std::stoi(name.substr(us + 1));
  if (kind == "CLS") return cls_token(idx);
  if (kind == "SUB") return sub_token(idx);
  if (kind == "STYLE") return style_token(idx);
  throw ConfigError("bad token name: " + name);
}

void PromptSeq::validate(const Vocabulary& vocab) const {
  require(!tokens.empty(), "prompt: empty token list");
  require(vocab.is_cls(tokens[0]), "prompt: position 0 must be a CLS token");
  require(vocab.cls_of(tokens[0]) == user_class,
          "prompt: user_class disagrees with the CLS token");
  bool pad_seen = false;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    const int t = tokens[i];
    require(t >= 0 && t < vocab.size(), "prompt: token out of vocabulary");
    require(!vocab.is_cls(t), "prompt: CLS only allowed at position 0");
    if (vocab.is_pad(t)) {
      pad_seen = true;
    } else {
      require(!pad_seen, "prompt: PAD must be a suffix");
    }
  }
}

int PromptSeq::length_before_pad(const Vocabulary& vocab) const {
  int n = 0;
  for (int t : tokens) {
    if (vocab.is_pad(t)) break;
    ++n;
  }
  return n;
}

PromptSeq user_prompt(const WorldSpec& spec, const Vocabulary& vocab, int k) {
  require(k >= 0 && k < spec.num_classes, "user_prompt: class out of range");
  PromptSeq p;
  p.user_class = k;
  p.tokens.assign(static_cast<std::size_t>(spec.prompt_len), vocab.pad_token());
  p.tokens[0] = vocab.cls_token(k);
  return p;
}

PromptSeq caption_prompt(const WorldSpec& spec, const Vocabulary& vocab, int k,
                         int m, int s) {
  PromptSeq p = user_prompt(spec, vocab, k);
  p.tokens[1] = vocab.sub_token(m);
  p.tokens[2] = vocab.style_token(s);
  return p;
}

std::vector<Sample> sample_real(const WorldSpec& spec, const Vocabulary& vocab,
                                int n, Rng& rng) {
  require(n >= 1, "sample_real: n must be >= 1");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.num_classes)));
    const int m = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.sub_modes)));
    const int s = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.style_tokens)));
    const std::vector<double> mu = spec.fine_mode_mean(k, m);
    const double sigma = spec.sigma_for_style(s);
    Sample sample;
    sample.x = Tensor::zeros({static_cast<std::size_t>(spec.dim)});
    for (int d = 0; d < spec.dim; ++d) {
      sample.x.data[static_cast<std::size_t>(d)] =
          mu[static_cast<std::size_t>(d)] + sigma * rng.normal();
    }
    sample.condition = caption_prompt(spec, vocab, k, m, s);
    sample.origin = "real";
    out.push_back(std::move(sample));
  }
  return out;
}

Tensor embed_condition(const Vocabulary& vocab, const Tensor& table,
                       const PromptSeq& p) {
  require(table.rank() == 2 &&
              table.rows() == static_cast<std::size_t>(vocab.size()),
          "embed_condition: table rows must equal vocabulary size");
  const std::size_t d = table.cols();
  Tensor cond = Tensor::zeros({d});
  int count = 0;
  for (int t : p.tokens) {
    require(t >= 0 && t < vocab.size(), "embed_condition: token out of vocabulary");
    if (vocab.is_pad(t)) continue;
    for (std::size_t i = 0; i < d; ++i) {
      cond.data[i] += table.at(static_cast<std::size_t>(t), i);
    }
    ++count;
  }
  require(count > 0, "embed_condition: all-PAD sequence");
  cond *= 1.0 / count;
  return cond;
}

void embed_condition_backward(const Vocabulary& vocab, const PromptSeq& p,
                              const Tensor& cond_grad, Tensor& table_grad) {
  int count = 0;
  for (int t : p.tokens) {
    if (!vocab.is_pad(t)) ++count;
  }
  require(count > 0, "embed_condition_backward: all-PAD sequence");
  const double w = 1.0 / count;
  const std::size_t d = table_grad.cols();
  for (int t : p.tokens) {
    if (vocab.is_pad(t)) continue;
    for (std::size_t i = 0; i < d; ++i) {
      table_grad.at(static_cast<std::size_t>(t), i) += w * cond_grad.data[i];
    }
  }
}

nlohmann::json sample_to_json(const Sample& s) {
  nlohmann::json j;
  j["x"] = s.x.data;
  j["tokens"] = s.condition.tokens;
  j["user_class"] = s.condition.user_class;
  j["origin"] = s.origin;
  return j;
}

Sample sample_from_json(const nlohmann::json& j, const Vocabulary& vocab) {
  Sample s;
  s.x = Tensor::vector(j.at("x").get<std::vector<double>>());
  s.condition.tokens = j.at("tokens").get<std::vector<int>>();
  s.condition.user_class = j.at("user_class").get<int>();
  s.origin = j.at("origin").get<std::string>();
  s.condition.validate(vocab);
  return s;
}

void write_dataset_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary);
  require(out.is_open(), "cannot open dataset file for writing: " + path);
  for (const auto& s : samples) out << sample_to_json(s).dump() << "\n";
}

std::vector<Sample> read_dataset_jsonl(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), "cannot open dataset file: " + path);
  std::vector<Sample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(sample_from_json(nlohmann::json::parse(line), vocab));
  }
  return out;
}

}  // namespace detgen

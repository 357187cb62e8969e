#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "detgen/rng.hpp"
#include "detgen/tensor.hpp"

namespace detgen {

// The stand-in "real" distribution: K class means on a ring, M sub-modes per
// class offset around each class mean, S styles setting the per-mode Gaussian
// scale (style 0 is the tight "camera" style).
struct WorldSpec {
  int dim = 2;
  int num_classes = 8;
  int sub_modes = 3;
  int style_tokens = 4;
  double ring_radius = 4.0;
  double sub_offset = 0.8;
  std::vector<double> style_sigma;  // per style; filled by validate() if empty
  int prompt_len = 8;               // fixed token-sequence length

  void validate();

  std::vector<double> class_mean(int k) const;
  std::vector<double> fine_mode_mean(int k, int m) const;
  double sigma_for_style(int s) const;
  int fine_mode_count() const { return num_classes * sub_modes; }

  nlohmann::json to_json() const;
  static WorldSpec from_json(const nlohmann::json& j);
};

// Token ids: [0,K) class, [K,K+M) sub-mode, [K+M,K+M+S) style, then PAD.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(const WorldSpec& spec);

  int size() const { return k_ + m_ + s_ + 1; }
  int cls_token(int k) const;
  int sub_token(int m) const;
  int style_token(int s) const;
  int pad_token() const { return k_ + m_ + s_; }

  bool is_cls(int id) const { return id >= 0 && id < k_; }
  bool is_sub(int id) const { return id >= k_ && id < k_ + m_; }
  bool is_style(int id) const { return id >= k_ + m_ && id < k_ + m_ + s_; }
  bool is_pad(int id) const { return id == pad_token(); }

  int cls_of(int id) const;    // CLS token -> class index
  int sub_of(int id) const;    // SUB token -> sub-mode index
  int style_of(int id) const;  // STYLE token -> style index

  std::string token_name(int id) const;
  int token_from_name(const std::string& name) const;

 private:
  int k_ = 0, m_ = 0, s_ = 0;
};

// Fixed-length token sequence; exactly one CLS token at position 0 and PAD
// only as a suffix.
struct PromptSeq {
  std::vector<int> tokens;
  int user_class = 0;

  void validate(const Vocabulary& vocab) const;
  int length_before_pad(const Vocabulary& vocab) const;
};

struct Sample {
  Tensor x;
  PromptSeq condition;
  std::string origin;  // "real" or "generated:<model-id>"
};

PromptSeq user_prompt(const WorldSpec& spec, const Vocabulary& vocab, int k);
PromptSeq caption_prompt(const WorldSpec& spec, const Vocabulary& vocab, int k,
                         int m, int s);

std::vector<Sample> sample_real(const WorldSpec& spec, const Vocabulary& vocab,
                                int n, Rng& rng);

// Mean of the embedding rows of the non-PAD tokens; errors on an all-PAD
// sequence.
Tensor embed_condition(const Vocabulary& vocab, const Tensor& table,
                       const PromptSeq& p);

// Same mean, plus the per-row scatter of an upstream cond gradient back into
// the table gradient.
void embed_condition_backward(const Vocabulary& vocab, const PromptSeq& p,
                              const Tensor& cond_grad, Tensor& table_grad);

nlohmann::json sample_to_json(const Sample& s);
Sample sample_from_json(const nlohmann::json& j, const Vocabulary& vocab);

void write_dataset_jsonl(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset_jsonl(const std::string& path, const Vocabulary& vocab);

}  // namespace detgen

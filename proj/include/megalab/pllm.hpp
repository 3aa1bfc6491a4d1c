#pragma once

// Decoder-only prosody language model over phoneme-level codes.
//
// Input layout (segments separated by a learned separator token, and only
// between non-empty segments):
//
//   prompt content | prompt codes | timbre | target content  BOS c_0 ... c_{T-1}
//
// Each position carries its segment embedding plus a sinusoidal position that
// restarts at 0 in every segment. The head has codebook_size + 1 classes:
// the code classes followed by EOS.

#include <cstdint>
#include <span>
#include <vector>

#include "megalab/autodiff.hpp"
#include "megalab/config.hpp"
#include "megalab/nn.hpp"
#include "megalab/rng.hpp"

namespace megalab {

struct PLLMContext {
  ad::Matrix prompt_content;      // Tp x content_dim (may have zero rows)
  std::vector<int> prompt_codes;  // Tp
  ad::Matrix timbre;              // 1 x timbre_dim
  ad::Matrix target_content;      // Tt x content_dim, Tt >= 1

  [[nodiscard]] int target_length() const { return static_cast<int>(target_content.rows()); }
};

enum class SegmentKind : int { kPromptContent = 0, kPromptCodes, kTimbre, kTargetContent, kTargetCodes };
inline constexpr int kSegmentKinds = 5;

struct SequenceLayout {
  int conditioning_length = 0;  // positions before BOS
  int separators = 0;
  [[nodiscard]] int bos_position() const { return conditioning_length; }
};

struct TeacherForcedOutput {
  ad::Var logits;    // T x K, code classes only
  ad::Var loss;      // mean code cross-entropy
  ad::Var eos_loss;  // cross-entropy of EOS after the last code, over K + 1 classes
};

class PLLM {
 public:
  PLLM(PLLMConfig config, std::uint64_t seed);
  PLLM(const PLLM&) = delete;
  PLLM& operator=(const PLLM&) = delete;
  PLLM(PLLM&&) = default;
  PLLM& operator=(PLLM&&) = default;

  [[nodiscard]] const PLLMConfig& config() const { return config_; }
  [[nodiscard]] nn::ParameterSet& parameters() { return params_; }
  [[nodiscard]] const nn::ParameterSet& parameters() const { return params_; }

  void validate(const PLLMContext& ctx) const;
  [[nodiscard]] SequenceLayout layout(const PLLMContext& ctx) const;

  // Embedded sequence: conditioning, BOS, then the given target codes.
  [[nodiscard]] ad::Var embed(const PLLMContext& ctx, std::span<const int> target_codes) const;
  // Logits (codes.size() + 1) x (K + 1); row i predicts target position i.
  [[nodiscard]] ad::Var forward(const PLLMContext& ctx, std::span<const int> target_codes) const;

  [[nodiscard]] TeacherForcedOutput forward_teacher_forced(const PLLMContext& ctx, std::span<const int> targets) const;
  // loss + eos_weight * eos_loss
  [[nodiscard]] ad::Var training_loss(const PLLMContext& ctx, std::span<const int> targets) const;

  // Full code-vocabulary log-probabilities for the position after `prefix`.
  [[nodiscard]] Eigen::RowVectorXd next_log_probs(const PLLMContext& ctx, std::span<const int> prefix) const;
  // Sum over the path of log p(codes[t] | prefix, codes[<t], ctx).
  [[nodiscard]] double score_path(const PLLMContext& ctx, std::span<const int> prefix, std::span<const int> codes) const;
  // Extends `prefix` with top-k samples until it holds `count` codes
  // (defaults to the target phoneme count).
  [[nodiscard]] std::vector<int> sample_topk(const PLLMContext& ctx, int k, Rng& rng,
                                             std::span<const int> prefix = {}, int count = -1) const;

 private:
  PLLMConfig config_;
  nn::ParameterSet params_;
  nn::Embedding code_embedding_;   // K + 2 rows (codes, BOS, EOS)
  nn::Embedding segment_embedding_;
  ad::Var separator_;
  nn::Linear content_in_;
  nn::Linear timbre_in_;
  std::vector<nn::TransformerLayer> layers_;
  nn::LayerNorm final_norm_;
  nn::Linear head_;
};

// Samples one class from the k highest logits (ties to the lower index),
// renormalized by a softmax over those k.
[[nodiscard]] int sample_topk_from_logits(const Eigen::RowVectorXd& logits, int k, Rng& rng);

// Stage-2 teacher-forcing example.
struct PLLMExample {
  PLLMContext context;
  std::vector<int> targets;
};

class PLLMTrainer {
 public:
  explicit PLLMTrainer(PLLM& model);
  // Mean training loss over the batch before the update.
  double step(std::span<const PLLMExample> batch);
  [[nodiscard]] nn::Adam& optimizer() { return opt_; }
  [[nodiscard]] const nn::Adam& optimizer() const { return opt_; }
  [[nodiscard]] long long global_step() const { return opt_.step_count(); }
  [[nodiscard]] const PLLM& model() const { return model_; }
  [[nodiscard]] PLLM& model() { return model_; }

 private:
  PLLM& model_;
  nn::Adam opt_;
};

}  // namespace megalab

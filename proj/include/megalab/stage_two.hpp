#pragma once

// Stage-2 data: the corpus is passed once through the frozen stage-1
// encoders, and P-LLM examples are assembled from the cached encodings with
// up to `context_sentences` preceding same-speaker sentences as prompt
// history.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "megalab/disentangler.hpp"
#include "megalab/pllm.hpp"

namespace megalab {

struct EncodedUtterance {
  std::string utterance_id;
  std::string speaker_id;
  ad::Matrix content;       // phonemes x content hidden
  std::vector<int> codes;   // one per phoneme
  ad::Matrix timbre;        // 1 x timbre hidden
};

[[nodiscard]] EncodedUtterance encode_utterance(const Disentangler& model, const PhonemeUtterance& utt);
[[nodiscard]] std::vector<EncodedUtterance> encode_corpus(const Disentangler& model, const Manifest& manifest);

class StageTwoCorpus {
 public:
  StageTwoCorpus(std::vector<EncodedUtterance> utterances, int context_sentences, int max_positions);

  [[nodiscard]] std::size_t size() const { return utterances_.size(); }
  [[nodiscard]] const EncodedUtterance& utterance(std::size_t i) const { return utterances_[i]; }
  // Target utterance i, prompt = the consecutive same-speaker sentences just
  // before it (oldest first), as many as the sentence and position budgets
  // allow. Timbre comes from the target utterance.
  [[nodiscard]] PLLMExample example(std::size_t i) const;
  [[nodiscard]] std::vector<PLLMExample> sample_batch(int batch_size, Rng& rng) const;

 private:
  std::vector<EncodedUtterance> utterances_;
  std::vector<std::size_t> previous_;  // index of the previous same-speaker sentence, or npos
  int context_sentences_;
  int max_positions_;
};

// Batch for global step s comes from make_rng(seed, "stage2", s).
using StageTwoCallback = std::function<void(long long step, double loss)>;
void train_stage_two(PLLMTrainer& trainer, const StageTwoCorpus& corpus, long long steps, std::uint64_t seed,
                     const StageTwoCallback& callback = {});

}  // namespace megalab

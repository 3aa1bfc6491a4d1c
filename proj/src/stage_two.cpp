#include "megalab/stage_two.hpp"

#include <limits>
#include <map>

#include "megalab/error.hpp"

namespace megalab {

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

}  // namespace

EncodedUtterance encode_utterance(const Disentangler& model, const PhonemeUtterance& utt) {
  validate(utt);
  ad::NoGradGuard guard;
  EncodedUtterance e;
  e.utterance_id = utt.utterance_id;
  e.speaker_id = utt.speaker_id;
  e.content = model.content_encode(utt.phonemes).value();
  e.codes = model.prosody_encode(slice_low_band(utt.mel, model.config().low_bins), utt.durations).codes;
  e.timbre = model.timbre_encode(utt.mel).value();
  return e;
}

std::vector<EncodedUtterance> encode_corpus(const Disentangler& model, const Manifest& manifest) {
  std::vector<EncodedUtterance> out;
  out.reserve(manifest.records.size());
  for (const auto& utt : manifest.records) out.push_back(encode_utterance(model, utt));
  return out;
}

StageTwoCorpus::StageTwoCorpus(std::vector<EncodedUtterance> utterances, int context_sentences, int max_positions)
    : utterances_(std::move(utterances)), context_sentences_(context_sentences), max_positions_(max_positions) {
  if (utterances_.empty()) {
    throw ValidationError("stage 2: empty corpus");
  }
  std::map<std::string, std::size_t> last;
  previous_.assign(utterances_.size(), kNone);
  for (std::size_t i = 0; i < utterances_.size(); ++i) {
    auto it = last.find(utterances_[i].speaker_id);
    if (it != last.end()) previous_[i] = it->second;
    last[utterances_[i].speaker_id] = i;
  }
}

PLLMExample StageTwoCorpus::example(std::size_t i) const {
  const EncodedUtterance& target = utterances_.at(i);
  const auto tt = static_cast<int>(target.codes.size());
  // timbre + target content + BOS + codes, one separator before the content
  int used = 1 + tt + 1 + tt + 1;
  if (used > max_positions_) {
    throw ValidationError("stage 2: utterance " + target.utterance_id + " alone exceeds the position budget");
  }
  std::vector<std::size_t> history;
  for (std::size_t j = previous_[i]; j != kNone && static_cast<int>(history.size()) < context_sentences_;
       j = previous_[j]) {
    const int extra = 2 * static_cast<int>(utterances_[j].codes.size()) + (history.empty() ? 2 : 0);
    if (used + extra > max_positions_) break;
    used += extra;
    history.push_back(j);
  }
  PLLMExample ex;
  ex.targets = target.codes;
  ex.context.timbre = target.timbre;
  ex.context.target_content = target.content;
  int rows = 0;
  for (std::size_t j : history) rows += static_cast<int>(utterances_[j].codes.size());
  ex.context.prompt_content.resize(rows, target.content.cols());
  int at = 0;
  for (auto it = history.rbegin(); it != history.rend(); ++it) {
    const EncodedUtterance& p = utterances_[*it];
    ex.context.prompt_content.middleRows(at, p.content.rows()) = p.content;
    ex.context.prompt_codes.insert(ex.context.prompt_codes.end(), p.codes.begin(), p.codes.end());
    at += static_cast<int>(p.content.rows());
  }
  return ex;
}

std::vector<PLLMExample> StageTwoCorpus::sample_batch(int batch_size, Rng& rng) const {
  std::vector<PLLMExample> batch;
  for (int b = 0; b < batch_size; ++b) batch.push_back(example(uniform_index(rng, utterances_.size())));
  return batch;
}

void train_stage_two(PLLMTrainer& trainer, const StageTwoCorpus& corpus, long long steps, std::uint64_t seed,
                     const StageTwoCallback& callback) {
  const int batch_size = trainer.model().config().optimizer.batch_size;
  for (long long i = 0; i < steps; ++i) {
    const long long s = trainer.global_step();
    Rng rng = make_rng(seed, "stage2", static_cast<std::uint64_t>(s));
    const double loss = trainer.step(corpus.sample_batch(batch_size, rng));
    if (callback) callback(s + 1, loss);
  }
}

}  // namespace megalab

#pragma once

// Decoding pipelines on frozen models: prompt-conditioned synthesis, the
// candidate-rescoring speech editor, and the vocoder boundary.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "megalab/audio.hpp"
#include "megalab/disentangler.hpp"
#include "megalab/pllm.hpp"

namespace megalab {

// Symbol -> id table shared by prompt and target languages.
class PhonemeTable {
 public:
  PhonemeTable() = default;
  // One symbol per line, optionally followed by whitespace and an explicit
  // id; blank lines and '#' comments are skipped.
  [[nodiscard]] static PhonemeTable parse(const std::string& text);
  [[nodiscard]] static PhonemeTable load(const std::filesystem::path& path);

  void add(const std::string& symbol, int id);
  [[nodiscard]] int id(const std::string& symbol) const;  // ValidationError when unknown
  [[nodiscard]] bool contains(const std::string& symbol) const { return ids_.contains(symbol); }
  [[nodiscard]] std::vector<int> encode(const std::vector<std::string>& symbols) const;
  [[nodiscard]] std::size_t size() const { return ids_.size(); }
  [[nodiscard]] int max_id() const;
  [[nodiscard]] const std::map<std::string, int>& entries() const { return ids_; }

 private:
  std::map<std::string, int> ids_;
};

// Keeps every id of `a`; symbols only in `b` keep their id when it is free
// and are otherwise appended after the largest id. Shared symbols must agree.
[[nodiscard]] PhonemeTable union_tables(const PhonemeTable& a, const PhonemeTable& b);

struct SynthesisRequest {
  PhonemeUtterance prompt;
  std::vector<int> target_phonemes;
  int top_k = 5;
  std::uint64_t seed = 0;
};

struct SynthesisResult {
  MelSpectrogram mel;
  std::vector<int> codes;      // one per target phoneme
  std::vector<int> durations;  // frames per target phoneme
};

struct EditRequest {
  std::string utterance_id;
  int left = 0;   // L, in original phoneme indices
  int right = 0;  // R (exclusive)
  // Replacement for phonemes [L, R); absent means regenerate the prosody of
  // the original phonemes.
  std::optional<std::vector<int>> replacement;
  int candidates = 16;  // N
  int top_k = 5;
  std::uint64_t seed = 0;
};

struct EditCandidate {
  std::vector<int> path;  // codes over the masked span
  double score = 0.0;     // span log-likelihood plus right-context log-likelihood
};

struct EditResult {
  MelSpectrogram mel;
  std::vector<int> phonemes;   // edited transcript
  std::vector<int> codes;      // full edited code sequence
  std::vector<int> durations;
  int mask_begin = 0;          // masked span in edited indices
  int mask_end = 0;
  std::vector<EditCandidate> candidates;
  int selected = -1;           // index into candidates, -1 for an empty mask
  bool enumerated = false;     // candidate set is the complete top-k tree
};

[[nodiscard]] nlohmann::json to_json(const EditRequest& req);
[[nodiscard]] EditRequest edit_request_from_json(const nlohmann::json& j);

class Synthesizer {
 public:
  // Throws CompatibilityError when the two models disagree on codebook size
  // or encoder widths.
  Synthesizer(const Disentangler& disentangler, const PLLM& pllm);

  [[nodiscard]] const Disentangler& disentangler() const { return dis_; }
  [[nodiscard]] const PLLM& pllm() const { return lm_; }

  [[nodiscard]] PLLMContext prompt_context(const PhonemeUtterance& prompt, std::span<const int> target_phonemes) const;

  [[nodiscard]] SynthesisResult synthesize_zero_shot(const SynthesisRequest& req) const;
  // The cross-lingual path is the same procedure: phoneme ids from both
  // languages index one union table.
  [[nodiscard]] SynthesisResult synthesize_cross_lingual(const SynthesisRequest& req) const {
    return synthesize_zero_shot(req);
  }

  // Decodes given codes; durations are predicted (>= 1 frame) when absent.
  [[nodiscard]] SynthesisResult decode(std::span<const int> phonemes, std::span<const int> codes,
                                       const MelSpectrogram& timbre_source,
                                       const std::vector<int>* durations = nullptr) const;

  [[nodiscard]] EditResult edit_speech(const PhonemeUtterance& utterance, const EditRequest& req) const;

 private:
  const Disentangler& dis_;
  const PLLM& lm_;
};

class Vocoder {
 public:
  virtual ~Vocoder() = default;
  [[nodiscard]] virtual Waveform vocode(const MelSpectrogram& mel) const = 0;
};

class GriffinLimVocoder : public Vocoder {
 public:
  explicit GriffinLimVocoder(AudioConfig config = {}, int iterations = 32) : config_(config), iterations_(iterations) {}
  [[nodiscard]] Waveform vocode(const MelSpectrogram& mel) const override;

 private:
  AudioConfig config_;
  int iterations_;
};

// Runs a shell command template with {mel} and {wav} placeholders. The mel is
// written in the MEL1 binary format; the command must produce the WAV.
class ExternalVocoder : public Vocoder {
 public:
  ExternalVocoder(std::string command_template, std::filesystem::path work_dir);
  [[nodiscard]] Waveform vocode(const MelSpectrogram& mel) const override;

 private:
  std::string template_;
  std::filesystem::path work_dir_;
};

[[nodiscard]] std::unique_ptr<Vocoder> make_vocoder(const std::string& spec, const AudioConfig& audio,
                                                    const std::filesystem::path& work_dir);

}  // namespace megalab

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "megalab/audio.hpp"
#include "megalab/mel.hpp"
#include "megalab/rng.hpp"

namespace megalab {

// Ground-truth latent factors of a procedurally generated utterance.
struct SyntheticFactors {
  int speaker_index = 0;
  std::vector<int> prosody_states;   // one per phoneme
  std::vector<double> pitch_hz;      // one per frame
  std::vector<double> energy;        // one per phoneme
  std::vector<double> envelope;      // speaker spectral envelope, one per bin
};

struct PhonemeUtterance {
  std::string utterance_id;
  std::string speaker_id;
  std::vector<int> phonemes;
  std::vector<int> durations;
  MelSpectrogram mel;
  std::string mel_path;
  std::optional<SyntheticFactors> factors;

  [[nodiscard]] int phoneme_count() const { return static_cast<int>(phonemes.size()); }
};

// Throws ValidationError naming the utterance when lengths or the
// duration/frame sum disagree.
void validate(const PhonemeUtterance& utt);

struct Manifest {
  std::vector<PhonemeUtterance> records;
  std::vector<std::string> warnings;

  [[nodiscard]] std::map<std::string, std::vector<std::size_t>> speaker_groups() const;
  [[nodiscard]] const PhonemeUtterance* find(const std::string& utterance_id) const;
};

// Line-delimited JSON records with fields utterance_id, speaker_id,
// phonemes, durations (space-separated integers) and mel_path (relative
// paths resolve against the manifest's directory).
[[nodiscard]] Manifest load_manifest(const std::filesystem::path& path);

// Tab-separated aligned corpus, one utterance per line:
//   utterance_id  speaker_id  phonemes  durations  audio_path
// phonemes and durations are space-separated integers; audio_path is a MEL1
// file or a mono WAV (converted with log_mel). Relative paths resolve against
// the file's directory; blank lines and '#' lines are skipped. Errors name the
// offending line.
[[nodiscard]] Manifest load_raw_corpus(const std::filesystem::path& path, const AudioConfig& audio = {});

// Writes `<dir>/manifest.jsonl` and `<dir>/mels/<utterance_id>.mel`.
void save_manifest(Manifest& manifest, const std::filesystem::path& dir);

[[nodiscard]] std::vector<int> parse_int_list(const std::string& text);
[[nodiscard]] std::string format_int_list(const std::vector<int>& values);

// Uniform draw among other utterances of the same speaker. Throws
// ValidationError for single-utterance speakers; use
// sample_reference_or_self for the self-reference fallback.
[[nodiscard]] const PhonemeUtterance& sample_reference(const Manifest& manifest, const PhonemeUtterance& utt, Rng& rng);
[[nodiscard]] const PhonemeUtterance& sample_reference_or_self(const Manifest& manifest, const PhonemeUtterance& utt,
                                                               Rng& rng);

}  // namespace megalab

#pragma once

// Objective metrics: pitch contours and their DTW distance, cosine speaker
// similarity behind a pluggable embedder, the repeat/skip audit, linear
// probes and the bottleneck sweep with shuffled timbre.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "megalab/audio.hpp"
#include "megalab/config.hpp"
#include "megalab/disentangler.hpp"
#include "megalab/manifest.hpp"
#include "megalab/synthetic.hpp"

namespace megalab {

struct PitchContour {
  std::vector<double> values;  // Hz, 0 on unvoiced frames
  std::vector<bool> voiced;

  [[nodiscard]] std::size_t frames() const { return values.size(); }
  [[nodiscard]] std::vector<double> voiced_values() const;
  // ValidationError unless values are finite, >= 0 and zero exactly where unvoiced.
  void validate() const;
};

struct PitchTrackerConfig {
  int sample_rate = 16000;
  int frame_length = 1024;
  int hop = 256;
  double min_hz = 60.0;
  double max_hz = 500.0;
  double voicing_threshold = 0.45;  // normalized autocorrelation peak
  double silence_rms = 1e-4;
};

// Normalized-autocorrelation F0 per centered frame (1 + samples / hop frames).
[[nodiscard]] PitchContour pitch_contour(const Waveform& wave, const PitchTrackerConfig& config = {});
// Stored ground-truth trajectory of a synthetic utterance.
[[nodiscard]] PitchContour pitch_contour(const SyntheticFactors& factors);
// Low-band bump tracker for synthetic-style mels; every frame is voiced.
[[nodiscard]] PitchContour pitch_contour(const MelSpectrogram& mel, int low_bins);

// Accumulated absolute-difference cost of the optimal full-window warping
// path with steps (1,0), (0,1), (1,1).
[[nodiscard]] double dtw_distance(std::span<const double> a, std::span<const double> b);
// Over voiced frames only; EmptyVoicedError when either side has none.
[[nodiscard]] double dtw_distance(const PitchContour& a, const PitchContour& b);

// ValidationError on a zero-norm or mismatched vector.
[[nodiscard]] double cosine_similarity(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b);

class SpeakerEmbedder {
 public:
  virtual ~SpeakerEmbedder() = default;
  [[nodiscard]] virtual Eigen::RowVectorXd embed(const MelSpectrogram& mel) const = 0;
};

// The stage-1 timbre encoder.
class TimbreEmbedder : public SpeakerEmbedder {
 public:
  explicit TimbreEmbedder(const Disentangler& model) : model_(model) {}
  [[nodiscard]] Eigen::RowVectorXd embed(const MelSpectrogram& mel) const override;

 private:
  const Disentangler& model_;
};

// Long-term average spectrum with its mean level removed. After fit() the
// spectrum is centred on the corpus mean and projected onto the linear
// discriminant directions that separate the labelled speakers.
class LtasEmbedder : public SpeakerEmbedder {
 public:
  LtasEmbedder() = default;
  [[nodiscard]] static LtasEmbedder fit(const Manifest& corpus, double ridge = 1e-3);
  [[nodiscard]] Eigen::RowVectorXd embed(const MelSpectrogram& mel) const override;
  [[nodiscard]] bool fitted() const { return projection_.size() > 0; }

 private:
  Eigen::RowVectorXd mean_;
  Eigen::MatrixXd projection_;
};

[[nodiscard]] double speaker_similarity(const MelSpectrogram& a, const MelSpectrogram& b,
                                        const SpeakerEmbedder& embedder);
[[nodiscard]] double speaker_similarity(const Waveform& a, const Waveform& b, const SpeakerEmbedder& embedder,
                                        const AudioConfig& audio = {});

struct RobustnessCounts {
  int repeats = 0;  // phonemes emitted more than once
  int skips = 0;    // phonemes never emitted
  [[nodiscard]] bool clean() const { return repeats == 0 && skips == 0; }
};

// Phoneme index of every emitted segment, in output order: phonemes with a
// positive duration emit once.
[[nodiscard]] std::vector<int> alignment_emissions(std::span<const int> durations);
[[nodiscard]] RobustnessCounts robustness_check(int phoneme_count, std::span<const int> emissions);
// Audits a decoded utterance: one code and one duration per phoneme and a
// frame count equal to the duration sum, then counts repeats and skips.
[[nodiscard]] RobustnessCounts robustness_check(int phoneme_count, std::span<const int> codes,
                                                std::span<const int> durations, int frames);

// Long, repetitive phoneme strings for the robustness audit: repeated short
// motifs, runs of one phoneme and alternations, min_length..max_length long.
[[nodiscard]] std::vector<std::vector<int>> stress_sentences(int count, int vocab_size, std::uint64_t seed,
                                                             int min_length = 40, int max_length = 80);

struct ProbeResult {
  double accuracy = 0.0;  // held-out, pooled over folds
  double chance = 0.0;    // majority-class rate
  int classes = 0;
  int samples = 0;
};

struct ProbeConfig {
  int folds = 4;
  int iterations = 500;
  double learning_rate = 0.5;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

// Multinomial logistic regression on standardized features, evaluated by
// stratified k-fold cross-validation.
[[nodiscard]] ProbeResult linear_probe(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                                       const ProbeConfig& config = {});

// Speaker labels (in first-appearance order), timbre vectors and
// phoneme-averaged quantized prosody vectors of a corpus.
struct ProbeFeatures {
  Eigen::MatrixXd timbre;
  Eigen::MatrixXd prosody;
  std::vector<int> speakers;
};
[[nodiscard]] ProbeFeatures probe_features(const Disentangler& model, const Manifest& corpus);

struct MetricReport {
  double pitch_dtw = 0.0;
  double speaker_cos = 0.0;
  int repeats = 0;
  int skips = 0;
  int error_sentences = 0;
  int sentences = 0;
  void validate() const;
};

[[nodiscard]] nlohmann::json to_json(const MetricReport& report);
[[nodiscard]] MetricReport metric_report_from_json(const nlohmann::json& j);

struct SweepConfig {
  std::string label;
  int code_dim = 0;
  int codebook_size = 0;
};

struct SweepSettings {
  DisentanglerConfig base;
  SyntheticFactorSpec data;  // training corpus
  long long steps = 1000;
  std::uint64_t seed = 0;
};

struct SweepRow {
  std::string label;
  int code_dim = 0;
  int codebook_size = 0;
  std::uint64_t seed = 0;
  double pitch_dtw = 0.0;    // mean per-utterance DTW against the stored trajectory
  double speaker_cos = 0.0;  // mean cosine against the shuffled timbre source
  double final_loss = 0.0;   // mean reconstruction loss over the last tenth of training
  int codes_used = 0;
  bool diverged = false;
  bool collapsed = false;    // at most one code in use
};

// Pairs every utterance with the timbre of another one under a seeded
// derangement.
[[nodiscard]] std::vector<std::size_t> shuffled_timbre_sources(std::size_t n, std::uint64_t seed);

// Reconstructs every utterance with its own content and prosody and the
// shuffled timbre source.
struct ShuffledTimbreScores {
  double pitch_dtw = 0.0;
  double speaker_cos = 0.0;
  int codes_used = 0;
};
[[nodiscard]] ShuffledTimbreScores score_shuffled_timbre(const Disentangler& model, const Manifest& corpus,
                                                         const SpeakerEmbedder& embedder, std::uint64_t seed);

// Same speakers as `training`, fresh content and prosody draws.
[[nodiscard]] SyntheticFactorSpec held_out_spec(const SyntheticFactorSpec& training);

// Trains one stage-1 model per config on the synthetic corpus and scores it
// on the held-out corpus. Speaker similarity uses the spectral embedder
// LDA-fitted on the training corpus (at least three speakers).
[[nodiscard]] std::vector<SweepRow> disentanglement_sweep(const std::vector<SweepConfig>& configs,
                                                          const SweepSettings& settings);

[[nodiscard]] std::string sweep_table_csv(const std::vector<SweepRow>& rows);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace megalab

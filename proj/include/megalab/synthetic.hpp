#pragma once

// Procedural factor-controlled corpus. Each utterance is a mel-like matrix
//
//   base + content(phoneme) + pitch bump(state) + energy(state)
//        + envelope(speaker) * (leak in the low band, 1 above) + noise
//
// where the three latent factors are independent: speakers own a smooth
// spectral envelope, phonemes own a pair of formant bumps above the low band,
// and per-phoneme prosody states follow a first-order Markov chain that sets
// pitch (a bump inside the low band), energy and a duration offset.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "megalab/manifest.hpp"
#include "megalab/rng.hpp"

namespace megalab {

struct ProsodyProcess {
  Eigen::MatrixXd transition;      // states x states, rows sum to 1
  std::vector<double> pitch_hz;    // per state
  std::vector<double> energy;      // per state
  std::vector<int> duration_offset;

  [[nodiscard]] int states() const { return static_cast<int>(transition.rows()); }
};

// Sticky chain with `stay` self-transition mass and seeded off-diagonal mass.
[[nodiscard]] ProsodyProcess default_prosody_process(int states = 6, std::uint64_t seed = 17, double stay = 0.4);

struct SyntheticFactorSpec {
  int n_speakers = 4;
  int utterances_per_speaker = 8;
  std::uint64_t timbre_seed = 1;
  std::uint64_t prosody_seed = 2;
  std::uint64_t content_seed = 3;
  int phoneme_vocab_size = 16;
  int min_phonemes = 8;
  int max_phonemes = 14;
  int mel_bins = kDefaultMelBins;
  int low_bins = kLowBandBins;
  double timbre_scale = 1.0;
  double timbre_leak = 0.3;  // envelope gain inside the low band
  double noise = 0.05;
  ProsodyProcess prosody = default_prosody_process();
};

void validate(const SyntheticFactorSpec& spec);

[[nodiscard]] std::vector<int> sample_markov_chain(const Eigen::MatrixXd& transition,
                                                   const Eigen::VectorXd& initial, int length, Rng& rng);
[[nodiscard]] Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& transition);
// H(X_t | X_{t-1}) under the stationary distribution, in nats.
[[nodiscard]] double conditional_entropy(const Eigen::MatrixXd& transition);

[[nodiscard]] std::vector<double> speaker_envelope(const SyntheticFactorSpec& spec, int speaker);

[[nodiscard]] Manifest generate_synthetic_dataset(const SyntheticFactorSpec& spec);

// Pitch bump centre (fractional bin) for a frequency, and its inverse.
[[nodiscard]] double pitch_to_bin(double hz, int low_bins);
[[nodiscard]] double bin_to_pitch(double bin, int low_bins);

// Reads the rendered pitch back out of a (possibly reconstructed) mel by
// locating the low-band bump per frame.
[[nodiscard]] std::vector<double> estimate_synthetic_pitch(const MelSpectrogram& mel, int low_bins = kLowBandBins);

}  // namespace megalab

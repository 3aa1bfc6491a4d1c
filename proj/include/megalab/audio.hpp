#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <vector>

#include "megalab/mel.hpp"

namespace megalab {

// STFT/mel front-end parameters. Window 1024 / hop 256 at 16 kHz.
struct AudioConfig {
  int sample_rate = 16000;
  int n_fft = 1024;
  int hop = 256;
  int n_mels = kDefaultMelBins;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;
};

struct Waveform {
  std::vector<float> samples;
  int sample_rate = 16000;
};

// Mono 16-bit PCM WAV.
void write_wav(const std::filesystem::path& path, const Waveform& wave);
[[nodiscard]] Waveform read_wav(const std::filesystem::path& path);

// HTK-scale triangular filters, n_mels x (n_fft/2 + 1).
[[nodiscard]] Eigen::MatrixXd mel_filterbank(const AudioConfig& config);

// Centered (reflect-padded) STFT magnitudes, frames x (n_fft/2 + 1).
[[nodiscard]] Eigen::MatrixXd stft_magnitude(const std::vector<float>& signal, const AudioConfig& config);

// ln(max(filterbank * |STFT|, floor)).
[[nodiscard]] MelSpectrogram log_mel(const std::vector<float>& signal, const AudioConfig& config);

// Iterative phase reconstruction from a log-mel spectrogram; returns
// frames * hop samples.
[[nodiscard]] std::vector<float> griffin_lim(const MelSpectrogram& mel, const AudioConfig& config, int iterations);

}  // namespace megalab

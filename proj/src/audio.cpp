#include "megalab/audio.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>

#include "megalab/error.hpp"

namespace megalab {

namespace {

using Complex = std::complex<double>;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> hann(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

std::vector<double> reflect_pad(const std::vector<float>& x, int pad) {
  const int n = static_cast<int>(x.size());
  std::vector<double> out(static_cast<std::size_t>(n + 2 * pad));
  for (int i = 0; i < n + 2 * pad; ++i) {
    int src = i - pad;
    if (n == 1) {
      src = 0;
    } else {
      while (src < 0 || src >= n) {
        if (src < 0) src = -src;
        if (src >= n) src = 2 * (n - 1) - src;
      }
    }
    out[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(src)];
  }
  return out;
}

int frame_count(std::size_t samples, int hop) { return 1 + static_cast<int>(samples) / hop; }

std::vector<std::vector<Complex>> stft(const std::vector<float>& signal, const AudioConfig& cfg) {
  const auto padded = reflect_pad(signal, cfg.n_fft / 2);
  const auto window = hann(cfg.n_fft);
  const int frames = frame_count(signal.size(), cfg.hop);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<std::vector<Complex>> out(static_cast<std::size_t>(frames));
  std::vector<double> buf(static_cast<std::size_t>(cfg.n_fft));
  for (int f = 0; f < frames; ++f) {
    for (int i = 0; i < cfg.n_fft; ++i) {
      const std::size_t src = static_cast<std::size_t>(f) * cfg.hop + static_cast<std::size_t>(i);
      buf[static_cast<std::size_t>(i)] = src < padded.size() ? padded[src] * window[static_cast<std::size_t>(i)] : 0.0;
    }
    fft.fwd(out[static_cast<std::size_t>(f)], buf);
  }
  return out;
}

// Overlap-add inverse with window-square normalisation; trims the centre
// padding and returns frames * hop samples.
std::vector<float> istft(const std::vector<std::vector<Complex>>& spec, const AudioConfig& cfg) {
  const int frames = static_cast<int>(spec.size());
  const auto window = hann(cfg.n_fft);
  const std::size_t total = static_cast<std::size_t>(frames - 1) * cfg.hop + static_cast<std::size_t>(cfg.n_fft);
  std::vector<double> acc(total, 0.0);
  std::vector<double> norm(total, 0.0);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> frame;
  for (int f = 0; f < frames; ++f) {
    std::vector<Complex> bins = spec[static_cast<std::size_t>(f)];
    fft.inv(frame, bins, cfg.n_fft);
    for (int i = 0; i < cfg.n_fft; ++i) {
      const std::size_t dst = static_cast<std::size_t>(f) * cfg.hop + static_cast<std::size_t>(i);
      acc[dst] += frame[static_cast<std::size_t>(i)] * window[static_cast<std::size_t>(i)];
      norm[dst] += window[static_cast<std::size_t>(i)] * window[static_cast<std::size_t>(i)];
    }
  }
  const std::size_t length = static_cast<std::size_t>(frames) * cfg.hop;
  std::vector<float> out(length, 0.0F);
  const std::size_t offset = static_cast<std::size_t>(cfg.n_fft / 2);
  for (std::size_t i = 0; i < length && i + offset < total; ++i) {
    const double n = norm[i + offset];
    out[i] = static_cast<float>(n > 1e-8 ? acc[i + offset] / n : 0.0);
  }
  return out;
}

void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void put_u16(std::ofstream& out, std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); }

}  // namespace

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(wave.samples.size() * 2);
  out.write("RIFF", 4);
  put_u32(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate * 2));
  put_u16(out, 2);
  put_u16(out, 16);
  out.write("data", 4);
  put_u32(out, data_bytes);
  for (float s : wave.samples) {
    const auto v = static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0F, 1.0F) * 32767.0F));
    out.write(reinterpret_cast<const char*>(&v), 2);
  }
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto u32 = [&](std::size_t pos) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    return v;
  };
  auto u16 = [&](std::size_t pos) {
    std::uint16_t v;
    std::memcpy(&v, bytes.data() + pos, 2);
    return v;
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw IoError(path.string() + ": not a RIFF/WAVE file");
  }
  Waveform wave;
  int channels = 0;
  int bits = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.data() + pos, 4);
    const std::uint32_t size = u32(pos + 4);
    const std::size_t body = pos + 8;
    if (id == "fmt ") {
      if (u16(body) != 1) throw IoError(path.string() + ": only PCM WAV is supported");
      channels = u16(body + 2);
      wave.sample_rate = static_cast<int>(u32(body + 4));
      bits = u16(body + 14);
    } else if (id == "data") {
      if (channels != 1 || bits != 16) throw IoError(path.string() + ": expected mono 16-bit PCM");
      const std::size_t n = std::min<std::size_t>(size, bytes.size() - body) / 2;
      wave.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::int16_t v;
        std::memcpy(&v, bytes.data() + body + 2 * i, 2);
        wave.samples[i] = static_cast<float>(v) / 32767.0F;
      }
      return wave;
    }
    pos = body + size + (size % 2);
  }
  throw IoError(path.string() + ": no data chunk");
}

Eigen::MatrixXd mel_filterbank(const AudioConfig& cfg) {
  const int n_freq = cfg.n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(cfg.fmin);
  const double mel_hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels + 2));
  for (int i = 0; i < cfg.n_mels + 2; ++i) {
    edges[static_cast<std::size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1));
  }
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(cfg.n_mels, n_freq);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[static_cast<std::size_t>(m)];
    const double mid = edges[static_cast<std::size_t>(m + 1)];
    const double hi = edges[static_cast<std::size_t>(m + 2)];
    for (int k = 0; k < n_freq; ++k) {
      const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
      const double up = (f - lo) / (mid - lo);
      const double down = (hi - f) / (hi - mid);
      fb(m, k) = std::max(0.0, std::min(up, down));
    }
  }
  return fb;
}

Eigen::MatrixXd stft_magnitude(const std::vector<float>& signal, const AudioConfig& cfg) {
  if (signal.empty()) throw ValidationError("stft of an empty signal");
  const auto spec = stft(signal, cfg);
  Eigen::MatrixXd mag(static_cast<Eigen::Index>(spec.size()), cfg.n_fft / 2 + 1);
  for (std::size_t f = 0; f < spec.size(); ++f) {
    for (int k = 0; k < mag.cols(); ++k) mag(static_cast<Eigen::Index>(f), k) = std::abs(spec[f][static_cast<std::size_t>(k)]);
  }
  return mag;
}

MelSpectrogram log_mel(const std::vector<float>& signal, const AudioConfig& cfg) {
  const Eigen::MatrixXd mag = stft_magnitude(signal, cfg);
  Eigen::MatrixXd mel = mag * mel_filterbank(cfg).transpose();
  return {mel.array().max(cfg.log_floor).log().matrix()};
}

std::vector<float> griffin_lim(const MelSpectrogram& mel, const AudioConfig& cfg, int iterations) {
  if (mel.bins() != cfg.n_mels) {
    throw ValidationError("vocoder expects " + std::to_string(cfg.n_mels) + " mel bins, got " +
                          std::to_string(mel.bins()));
  }
  validate(mel);
  const Eigen::MatrixXd fb = mel_filterbank(cfg);
  const Eigen::MatrixXd pinv = fb.completeOrthogonalDecomposition().pseudoInverse();
  const Eigen::MatrixXd linear_mel = mel.values.array().exp().matrix();
  const Eigen::MatrixXd target = (linear_mel * pinv.transpose()).cwiseMax(0.0);  // frames x n_freq
  const int frames = mel.frames();
  const int n_freq = cfg.n_fft / 2 + 1;

  // Deterministic initial phase.
  std::vector<std::vector<Complex>> spec(static_cast<std::size_t>(frames), std::vector<Complex>(static_cast<std::size_t>(n_freq)));
  for (int f = 0; f < frames; ++f) {
    for (int k = 0; k < n_freq; ++k) {
      const double phase = std::fmod(0.7548776662 * f * n_freq + 0.5698402910 * k, 1.0) * 2.0 * std::numbers::pi;
      spec[static_cast<std::size_t>(f)][static_cast<std::size_t>(k)] = std::polar(target(f, k), phase);
    }
  }
  std::vector<float> wave = istft(spec, cfg);
  for (int it = 0; it < iterations; ++it) {
    // Trim to the sample count whose centred STFT has exactly `frames` frames.
    std::vector<float> trimmed(wave.begin(), wave.begin() + static_cast<std::ptrdiff_t>((frames - 1) * cfg.hop));
    if (trimmed.empty()) trimmed.push_back(0.0F);
    auto est = stft(trimmed, cfg);
    for (int f = 0; f < frames; ++f) {
      for (int k = 0; k < n_freq; ++k) {
        const Complex c = est[static_cast<std::size_t>(f)][static_cast<std::size_t>(k)];
        const double mag = std::abs(c);
        const Complex unit = mag > 1e-12 ? c / mag : Complex(1.0, 0.0);
        spec[static_cast<std::size_t>(f)][static_cast<std::size_t>(k)] = unit * target(f, k);
      }
    }
    wave = istft(spec, cfg);
  }
  return wave;
}

}  // namespace megalab

#include "megalab/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "megalab/error.hpp"

namespace megalab {

namespace {

constexpr double kPitchFloorHz = 80.0;
constexpr double kBaseLevel = -2.0;
constexpr double kPitchAmplitude = 2.0;
constexpr double kPitchWidth = 0.8;

int sample_categorical(const Eigen::Ref<const Eigen::RowVectorXd>& probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    acc += probs(i);
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size() - 1);
}

struct PhonemeShape {
  double center[2];
  double amplitude[2];
  double width[2];
  int base_duration;
};

PhonemeShape phoneme_shape(const SyntheticFactorSpec& spec, int phoneme) {
  Rng rng = make_rng(spec.content_seed, "phoneme", static_cast<std::uint64_t>(phoneme));
  PhonemeShape s{};
  const double lo = spec.low_bins + 2.0;
  const double hi = spec.mel_bins - 3.0;
  for (int k = 0; k < 2; ++k) {
    s.center[k] = lo + uniform01(rng) * (hi - lo);
    s.amplitude[k] = 1.0 + uniform01(rng);
    s.width[k] = 1.5 + 1.5 * uniform01(rng);
  }
  s.base_duration = 3 + phoneme % 3;
  return s;
}

}  // namespace

ProsodyProcess default_prosody_process(int states, std::uint64_t seed, double stay) {
  if (states < 1) throw ValidationError("prosody process needs at least one state");
  ProsodyProcess p;
  Rng rng = make_rng(seed, "prosody-process");
  p.transition = Eigen::MatrixXd::Zero(states, states);
  for (int i = 0; i < states; ++i) {
    Eigen::RowVectorXd row(states);
    for (int j = 0; j < states; ++j) row(j) = 0.2 + uniform01(rng);
    row(i) = 0.0;
    if (states == 1) {
      p.transition(i, i) = 1.0;
      continue;
    }
    row *= (1.0 - stay) / row.sum();
    row(i) = stay;
    p.transition.row(i) = row;
  }
  const double lo = 95.0;
  const double hi = 290.0;
  for (int i = 0; i < states; ++i) {
    const double frac = states == 1 ? 0.5 : static_cast<double>(i) / (states - 1);
    p.pitch_hz.push_back(lo * std::pow(hi / lo, frac));
    p.energy.push_back(0.4 * std::sin(2.1 * i + 0.5));
    p.duration_offset.push_back((i * 2) % 3 - 1);
  }
  return p;
}

void validate(const SyntheticFactorSpec& spec) {
  if (spec.n_speakers < 1 || spec.utterances_per_speaker < 1) {
    throw ValidationError("synthetic spec needs at least one speaker and one utterance per speaker");
  }
  if (spec.phoneme_vocab_size < 1 || spec.min_phonemes < 1 || spec.max_phonemes < spec.min_phonemes) {
    throw ValidationError("synthetic spec has an invalid phoneme configuration");
  }
  if (spec.low_bins < 4 || spec.mel_bins <= spec.low_bins + 4) {
    throw ValidationError("synthetic spec needs mel_bins > low_bins + 4 and low_bins >= 4");
  }
  const auto& p = spec.prosody;
  const auto s = static_cast<std::size_t>(p.states());
  if (p.states() < 1 || p.transition.cols() != p.states() || p.pitch_hz.size() != s || p.energy.size() != s ||
      p.duration_offset.size() != s) {
    throw ValidationError("prosody process tables disagree on the state count");
  }
  for (int i = 0; i < p.states(); ++i) {
    if (std::abs(p.transition.row(i).sum() - 1.0) > 1e-9 || (p.transition.row(i).array() < 0.0).any()) {
      throw ValidationError("prosody transition rows must be probability vectors");
    }
  }
}

std::vector<int> sample_markov_chain(const Eigen::MatrixXd& transition, const Eigen::VectorXd& initial, int length,
                                     Rng& rng) {
  std::vector<int> states;
  states.reserve(static_cast<std::size_t>(length));
  if (length <= 0) return states;
  states.push_back(sample_categorical(initial.transpose(), rng));
  for (int t = 1; t < length; ++t) states.push_back(sample_categorical(transition.row(states.back()), rng));
  return states;
}

Eigen::VectorXd stationary_distribution(const Eigen::MatrixXd& transition) {
  const Eigen::Index n = transition.rows();
  Eigen::RowVectorXd pi = Eigen::RowVectorXd::Constant(n, 1.0 / static_cast<double>(n));
  for (int it = 0; it < 10000; ++it) {
    Eigen::RowVectorXd next = pi * transition;
    if ((next - pi).cwiseAbs().maxCoeff() < 1e-15) {
      pi = next;
      break;
    }
    pi = next;
  }
  return pi.transpose() / pi.sum();
}

double conditional_entropy(const Eigen::MatrixXd& transition) {
  const Eigen::VectorXd pi = stationary_distribution(transition);
  double h = 0.0;
  for (Eigen::Index i = 0; i < transition.rows(); ++i) {
    for (Eigen::Index j = 0; j < transition.cols(); ++j) {
      const double p = transition(i, j);
      if (p > 0.0) h -= pi(i) * p * std::log(p);
    }
  }
  return h;
}

std::vector<double> speaker_envelope(const SyntheticFactorSpec& spec, int speaker) {
  Rng rng = make_rng(spec.timbre_seed, "speaker", static_cast<std::uint64_t>(speaker));
  const double offset = 0.3 * normal01(rng);
  double amp[4];
  double phase[4];
  for (int j = 0; j < 4; ++j) {
    amp[j] = 0.6 * normal01(rng) / (j + 1);
    phase[j] = 2.0 * std::numbers::pi * uniform01(rng);
  }
  std::vector<double> env(static_cast<std::size_t>(spec.mel_bins));
  for (int b = 0; b < spec.mel_bins; ++b) {
    double v = offset;
    for (int j = 0; j < 4; ++j) {
      v += amp[j] * std::cos(std::numbers::pi * (j + 1) * b / (spec.mel_bins - 1) + phase[j]);
    }
    env[static_cast<std::size_t>(b)] = spec.timbre_scale * v;
  }
  return env;
}

double pitch_to_bin(double hz, int low_bins) {
  return 1.5 + (low_bins - 4) * std::log2(std::max(hz, 1.0) / kPitchFloorHz) / 2.0;
}

double bin_to_pitch(double bin, int low_bins) {
  return kPitchFloorHz * std::exp2(2.0 * (bin - 1.5) / (low_bins - 4));
}

Manifest generate_synthetic_dataset(const SyntheticFactorSpec& spec) {
  validate(spec);
  const auto& proc = spec.prosody;
  const Eigen::VectorXd initial = stationary_distribution(proc.transition);
  std::vector<PhonemeShape> shapes;
  for (int p = 0; p < spec.phoneme_vocab_size; ++p) shapes.push_back(phoneme_shape(spec, p));

  Manifest manifest;
  for (int s = 0; s < spec.n_speakers; ++s) {
    const auto envelope = speaker_envelope(spec, s);
    for (int u = 0; u < spec.utterances_per_speaker; ++u) {
      const auto index = static_cast<std::uint64_t>(s * spec.utterances_per_speaker + u);
      Rng content_rng = make_rng(spec.content_seed, "utterance", index);
      Rng prosody_rng = make_rng(spec.prosody_seed, "utterance", index);
      Rng noise_rng = make_rng(spec.prosody_seed, "noise", index);

      const int span = spec.max_phonemes - spec.min_phonemes + 1;
      const int n_ph = spec.min_phonemes + static_cast<int>(uniform_index(content_rng, static_cast<std::size_t>(span)));
      PhonemeUtterance utt;
      char id[64];
      std::snprintf(id, sizeof(id), "spk%02d_utt%03d", s, u);
      utt.utterance_id = id;
      std::snprintf(id, sizeof(id), "spk%02d", s);
      utt.speaker_id = id;
      SyntheticFactors factors;
      factors.speaker_index = s;
      factors.envelope = envelope;
      factors.prosody_states = sample_markov_chain(proc.transition, initial, n_ph, prosody_rng);
      for (int i = 0; i < n_ph; ++i) {
        const int ph = static_cast<int>(uniform_index(content_rng, static_cast<std::size_t>(spec.phoneme_vocab_size)));
        const int state = factors.prosody_states[static_cast<std::size_t>(i)];
        const int jitter = static_cast<int>(uniform_index(content_rng, 2));
        utt.phonemes.push_back(ph);
        utt.durations.push_back(std::max(2, shapes[static_cast<std::size_t>(ph)].base_duration +
                                                proc.duration_offset[static_cast<std::size_t>(state)] + jitter));
        factors.energy.push_back(proc.energy[static_cast<std::size_t>(state)]);
      }

      int frames = 0;
      for (int d : utt.durations) frames += d;
      Eigen::MatrixXd mel(frames, spec.mel_bins);
      int f = 0;
      for (int i = 0; i < n_ph; ++i) {
        const auto& shape = shapes[static_cast<std::size_t>(utt.phonemes[static_cast<std::size_t>(i)])];
        const int state = factors.prosody_states[static_cast<std::size_t>(i)];
        const double hz = proc.pitch_hz[static_cast<std::size_t>(state)];
        const double centre = pitch_to_bin(hz, spec.low_bins);
        const double energy = proc.energy[static_cast<std::size_t>(state)];
        for (int k = 0; k < utt.durations[static_cast<std::size_t>(i)]; ++k, ++f) {
          factors.pitch_hz.push_back(hz);
          for (int b = 0; b < spec.mel_bins; ++b) {
            double v = kBaseLevel + energy;
            if (b < spec.low_bins) {
              const double d = b - centre;
              v += kPitchAmplitude * std::exp(-d * d / (2.0 * kPitchWidth * kPitchWidth));
              v += spec.timbre_leak * envelope[static_cast<std::size_t>(b)];
            } else {
              for (int m = 0; m < 2; ++m) {
                const double d = (b - shape.center[m]) / shape.width[m];
                v += shape.amplitude[m] * std::exp(-0.5 * d * d);
              }
              v += envelope[static_cast<std::size_t>(b)];
            }
            v += spec.noise * normal01(noise_rng);
            mel(f, b) = v;
          }
        }
      }
      utt.mel.values = std::move(mel);
      utt.factors = std::move(factors);
      manifest.records.push_back(std::move(utt));
    }
  }
  return manifest;
}

std::vector<double> estimate_synthetic_pitch(const MelSpectrogram& mel, int low_bins) {
  const int n = std::min(mel.bins(), low_bins);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(mel.frames()));
  std::vector<double> row(static_cast<std::size_t>(n));
  for (int f = 0; f < mel.frames(); ++f) {
    for (int b = 0; b < n; ++b) row[static_cast<std::size_t>(b)] = mel.values(f, b);
    std::vector<double> sorted = row;
    std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
    const double baseline = sorted[static_cast<std::size_t>(n / 2)];
    const int peak = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    double num = 0.0;
    double den = 0.0;
    for (int b = std::max(0, peak - 1); b <= std::min(n - 1, peak + 1); ++b) {
      const double w = std::max(0.0, row[static_cast<std::size_t>(b)] - baseline);
      num += w * b;
      den += w;
    }
    const double centre = den > 0.0 ? num / den : peak;
    out.push_back(bin_to_pitch(centre, low_bins));
  }
  return out;
}

}  // namespace megalab

#pragma once

// First-stage acoustic model: prosody / content / timbre encoders, the VQ
// bottleneck, duration predictor, mel decoder and the multi-window
// least-squares discriminator, plus the training step that ties them
// together.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "megalab/autodiff.hpp"
#include "megalab/config.hpp"
#include "megalab/manifest.hpp"
#include "megalab/nn.hpp"
#include "megalab/quantizer.hpp"

namespace megalab {

struct ProsodyEncoding {
  std::vector<int> codes;   // one per phoneme
  ad::Var pre_quant;        // phonemes x code_dim
  ad::Var quantized;        // straight-through z_q
  ad::Var codebook_loss;
  ad::Var commit_loss;
};

// Stage-1 forward pass of one utterance with ground-truth durations.
struct Reconstruction {
  ProsodyEncoding prosody;
  ad::Var content;          // phonemes x hidden
  ad::Var timbre;           // 1 x hidden
  ad::Var log_durations;    // phonemes x 1
  ad::Var mel;              // frames x mel_bins
};

class Disentangler {
 public:
  Disentangler(DisentanglerConfig config, std::uint64_t seed);
  Disentangler(const Disentangler&) = delete;
  Disentangler& operator=(const Disentangler&) = delete;
  Disentangler(Disentangler&&) = default;
  Disentangler& operator=(Disentangler&&) = default;

  [[nodiscard]] const DisentanglerConfig& config() const { return config_; }

  // Low-band input only: rejects mels whose width differs from low_bins.
  [[nodiscard]] ProsodyEncoding prosody_encode(const MelSpectrogram& mel_low, std::span<const int> durations) const;
  [[nodiscard]] ad::Var content_encode(std::span<const int> phonemes) const;
  [[nodiscard]] ad::Var timbre_frame_features(const MelSpectrogram& mel) const;
  [[nodiscard]] ad::Var timbre_encode(const MelSpectrogram& mel_ref) const;
  [[nodiscard]] ad::Var duration_log_predict(const ad::Var& content, const ad::Var& prosody) const;
  // round(exp(log_d) - 1), clamped to >= min_frames.
  [[nodiscard]] std::vector<int> predict_durations(const ad::Var& content, const ad::Var& prosody,
                                                   int min_frames = 0) const;
  [[nodiscard]] ad::Var decode_mel(const ad::Var& prosody_frames, const ad::Var& timbre,
                                   const ad::Var& content_frames) const;
  // Codebook rows for the given codes (z_q without the straight-through path).
  [[nodiscard]] ad::Var code_embeddings(std::span<const int> codes) const;

  // Windows (ascending) that fit in `frames`.
  [[nodiscard]] std::vector<int> feasible_windows(int frames) const;
  // One scalar per feasible window; starts[i] is the first frame of window i.
  [[nodiscard]] std::vector<ad::Var> discriminate(const ad::Var& mel, std::span<const int> starts) const;
  // Uniformly random feasible start per window.
  [[nodiscard]] std::vector<int> sample_window_starts(int frames, Rng& rng) const;
  [[nodiscard]] std::vector<double> discriminate(const MelSpectrogram& mel, Rng& rng) const;

  [[nodiscard]] Reconstruction reconstruct(const PhonemeUtterance& target, const MelSpectrogram& reference) const;

  [[nodiscard]] nn::ParameterSet& generator_parameters() { return generator_; }
  [[nodiscard]] nn::ParameterSet& discriminator_parameters() { return discriminator_; }
  [[nodiscard]] const nn::ParameterSet& generator_parameters() const { return generator_; }
  [[nodiscard]] const nn::ParameterSet& discriminator_parameters() const { return discriminator_; }
  [[nodiscard]] const ad::Var& codebook() const { return codebook_; }
  [[nodiscard]] ad::Var& codebook() { return codebook_; }

 private:
  struct SubDiscriminator {
    std::vector<nn::Conv2d> convs;
    nn::Linear head;
  };

  DisentanglerConfig config_;
  nn::ParameterSet generator_;
  nn::ParameterSet discriminator_;

  nn::ConvStack prosody_frame_stack_;
  nn::ConvStack prosody_phoneme_stack_;
  nn::Linear prosody_down_;
  ad::Var codebook_;

  nn::Embedding phoneme_embedding_;
  std::vector<nn::TransformerLayer> content_layers_;
  nn::LayerNorm content_norm_;

  nn::ConvStack timbre_stack_;

  nn::Linear duration_prosody_in_;
  nn::ConvStack duration_stack_;
  nn::Linear duration_out_;

  nn::Linear decoder_content_in_;
  nn::Linear decoder_prosody_in_;
  nn::Linear decoder_timbre_in_;
  nn::ConvStack decoder_stack_;
  nn::Linear decoder_out_;

  std::vector<SubDiscriminator> sub_discriminators_;
};

// Reconstruction + codebook + weighted commitment terms. Exactly zero when
// y == y_hat and h == z_q.
[[nodiscard]] ad::Var vq_loss(const ad::Var& y, const ad::Var& y_hat, const ad::Var& h, const ad::Var& z_q,
                              double commit_weight);
// mean_w (D(real) - 1)^2 + D(fake)^2
[[nodiscard]] ad::Var lsgan_discriminator_loss(std::span<const ad::Var> real, std::span<const ad::Var> fake);
// mean_w (D(fake) - 1)^2
[[nodiscard]] ad::Var lsgan_generator_loss(std::span<const ad::Var> fake);
// MSE between predicted log durations and log(1 + d).
[[nodiscard]] ad::Var duration_loss(const ad::Var& log_durations, std::span<const int> durations);

struct TrainingPair {
  const PhonemeUtterance* target = nullptr;
  const PhonemeUtterance* reference = nullptr;
};

[[nodiscard]] std::vector<TrainingPair> sample_batch(const Manifest& manifest, int batch_size, Rng& rng);

struct StageOneLosses {
  double reconstruction = 0;
  double codebook = 0;
  double commit = 0;
  double duration = 0;
  double adversarial = 0;
  double generator_total = 0;
  double discriminator = 0;
};

class DisentanglerTrainer {
 public:
  explicit DisentanglerTrainer(Disentangler& model);

  // One generator update followed by one discriminator update.
  StageOneLosses step(std::span<const TrainingPair> batch, Rng& rng);

  [[nodiscard]] const Disentangler& model() const { return model_; }
  [[nodiscard]] Disentangler& model() { return model_; }
  [[nodiscard]] nn::Adam& generator_optimizer() { return generator_opt_; }
  [[nodiscard]] const nn::Adam& generator_optimizer() const { return generator_opt_; }
  [[nodiscard]] nn::Adam& discriminator_optimizer() { return discriminator_opt_; }
  [[nodiscard]] const nn::Adam& discriminator_optimizer() const { return discriminator_opt_; }
  [[nodiscard]] long long global_step() const { return generator_opt_.step_count(); }
  [[nodiscard]] std::vector<long long>& code_last_used() { return last_used_; }
  [[nodiscard]] const std::vector<long long>& code_last_used() const { return last_used_; }

 private:
  void revive_dead_codes(const std::vector<ad::Matrix>& encoder_outputs, Rng& rng);

  Disentangler& model_;
  nn::Adam generator_opt_;
  nn::Adam discriminator_opt_;
  std::vector<long long> last_used_;
};

// Runs `steps` training steps; the batch for global step s is drawn from
// make_rng(seed, "stage1", s) so interrupted runs resume bit-identically.
using StageOneCallback = std::function<void(long long step, const StageOneLosses&)>;
void train_stage_one(DisentanglerTrainer& trainer, const Manifest& manifest, long long steps, std::uint64_t seed,
                     const StageOneCallback& callback = {});

}  // namespace megalab

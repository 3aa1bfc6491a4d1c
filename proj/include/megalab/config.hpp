#pragma once

// Hyper-parameters for both training stages. Defaults reproduce the
// full-scale model; toy_* helpers return the desk-scale variants used by the
// test suites. Configs round-trip through an INI file, and the canonical INI
// text is what the checkpoint hash covers.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace megalab {

namespace nn {
struct AdamConfig;
}

struct ProsodyEncoderConfig {
  int frame_layers = 3;     // conv stack before phoneme pooling
  int phoneme_layers = 2;   // conv stack after pooling
  int hidden = 320;
  int kernel = 5;
  int codebook_size = 2048;
  int code_dim = 256;
};

struct ContentEncoderConfig {
  int vocab_size = 128;
  int layers = 4;
  int heads = 2;
  int hidden = 320;
  int kernel = 5;
  int filter = 1280;
};

struct TimbreEncoderConfig {
  int layers = 5;
  int hidden = 320;
  int kernel = 31;
};

struct MelDecoderConfig {
  int layers = 5;
  int hidden = 320;
  int kernel = 5;
};

struct DurationPredictorConfig {
  int layers = 3;
  int hidden = 320;
  int kernel = 3;
};

struct DiscriminatorConfig {
  std::vector<int> windows{32, 64, 128};
  int conv_layers = 3;
  int hidden = 192;
};

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  int warmup_steps = 4000;
  bool noam_decay = true;
  double clip_norm = 1.0;
  int batch_size = 30;
  long long total_steps = 320000;
};

struct DisentanglerConfig {
  int mel_bins = 80;
  int low_bins = 20;
  ProsodyEncoderConfig prosody;
  ContentEncoderConfig content;
  TimbreEncoderConfig timbre;
  MelDecoderConfig decoder;
  DurationPredictorConfig duration;
  DiscriminatorConfig discriminator;
  double commit_weight = 0.25;
  double adversarial_weight = 0.05;
  double duration_weight = 1.0;
  int dead_code_steps = 200;
  OptimizerConfig optimizer;
};

struct PLLMConfig {
  int layers = 8;
  int heads = 8;
  int hidden = 512;
  int filter = 2048;
  int kernel = 5;
  int codebook_size = 2048;   // code classes; BOS = K, EOS = K + 1
  int content_dim = 320;
  int timbre_dim = 320;
  int context_sentences = 7;
  int max_positions = 1024;
  int top_k = 5;
  double eos_weight = 1.0;
  int max_candidates = 256;
  OptimizerConfig optimizer{.learning_rate = 1e-3, .total_steps = 100000};

  [[nodiscard]] int bos() const { return codebook_size; }
  [[nodiscard]] int eos() const { return codebook_size + 1; }
  [[nodiscard]] int embedding_rows() const { return codebook_size + 2; }
};

[[nodiscard]] nn::AdamConfig adam_config(const OptimizerConfig& optimizer);

void validate(const DisentanglerConfig& config);
void validate(const PLLMConfig& config);

[[nodiscard]] std::string to_ini(const DisentanglerConfig& config);
[[nodiscard]] std::string to_ini(const PLLMConfig& config);
[[nodiscard]] DisentanglerConfig disentangler_config_from_ini(const std::string& text);
[[nodiscard]] PLLMConfig pllm_config_from_ini(const std::string& text);

[[nodiscard]] std::string config_hash(const std::string& canonical_ini);

// Desk-scale variants (small widths, short windows) used by tests and the
// toy experiments.
[[nodiscard]] DisentanglerConfig toy_disentangler_config();
[[nodiscard]] PLLMConfig toy_pllm_config(int codebook_size);

}  // namespace megalab

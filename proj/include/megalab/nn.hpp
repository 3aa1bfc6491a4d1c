#pragma once

// Layers built on megalab::ad. Each layer registers its trainable leaves in a
// ParameterSet under a hierarchical name ("decoder.block0.conv.weight"); the
// names are the checkpoint keys.

#include <string>
#include <utility>
#include <vector>

#include "megalab/autodiff.hpp"
#include "megalab/rng.hpp"

namespace megalab::nn {

using ad::Matrix;
using ad::Var;

class ParameterSet {
 public:
  Var add(const std::string& name, Matrix init);

  [[nodiscard]] const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  [[nodiscard]] std::size_t size() const { return entries_.size(); }
  [[nodiscard]] std::size_t scalar_count() const;
  [[nodiscard]] const Var* find(const std::string& name) const;

  void zero_grad();

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

[[nodiscard]] Matrix init_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, const std::string& name, int in, int out, Rng& rng);
  [[nodiscard]] Var operator()(const Var& x) const;
  [[nodiscard]] int in_features() const { return in_; }
  [[nodiscard]] int out_features() const { return out_; }

 private:
  Var weight_;
  Var bias_;
  int in_ = 0;
  int out_ = 0;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet& params, const std::string& name, int channels);
  [[nodiscard]] Var operator()(const Var& x) const;

 private:
  Var gamma_;
  Var beta_;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(ParameterSet& params, const std::string& name, int count, int dim, Rng& rng);
  [[nodiscard]] Var operator()(std::span<const int> ids) const;
  [[nodiscard]] int count() const { return count_; }
  [[nodiscard]] const Var& table() const { return table_; }

 private:
  Var table_;
  int count_ = 0;
};

enum class Padding { kSame, kCausal };

// Index table for a length-preserving 1-D convolution over `length` rows.
[[nodiscard]] ad::IndexTable conv1d_table(int length, int kernel, Padding padding);

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParameterSet& params, const std::string& name, int in, int out, int kernel, Rng& rng,
         Padding padding = Padding::kSame);
  [[nodiscard]] Var operator()(const Var& x) const;

 private:
  Var weight_;  // (kernel*in) x out
  Var bias_;
  int kernel_ = 1;
  Padding padding_ = Padding::kSame;
};

// 2-D feature map of height x width cells, one row per cell (row-major
// cell order), one column per channel.
struct FeatureMap {
  Var cells;
  int height = 0;
  int width = 0;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterSet& params, const std::string& name, int in, int out, int kernel, int stride, Rng& rng);
  [[nodiscard]] FeatureMap operator()(const FeatureMap& x) const;

 private:
  Var weight_;
  Var bias_;
  int kernel_ = 3;
  int stride_ = 1;
};

// conv -> ReLU -> LayerNorm, residual when channel counts agree.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(ParameterSet& params, const std::string& name, int in, int out, int kernel, Rng& rng,
            Padding padding = Padding::kSame);
  [[nodiscard]] Var operator()(const Var& x) const;

 private:
  Conv1d conv_;
  LayerNorm norm_;
  bool residual_ = false;
};

class ConvStack {
 public:
  ConvStack() = default;
  ConvStack(ParameterSet& params, const std::string& name, int in, int hidden, int layers, int kernel, Rng& rng,
            Padding padding = Padding::kSame);
  [[nodiscard]] Var operator()(const Var& x) const;

 private:
  std::vector<ConvBlock> blocks_;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet& params, const std::string& name, int channels, int heads, bool causal,
                     Rng& rng);
  [[nodiscard]] Var operator()(const Var& x) const;

 private:
  Linear qkv_;
  Linear out_;
  int heads_ = 1;
  int channels_ = 0;
  bool causal_ = false;
};

// Pre-norm transformer layer whose feed-forward part is a 1-D convolution
// followed by a pointwise projection.
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(ParameterSet& params, const std::string& name, int channels, int heads, int filter, int kernel,
                   bool causal, Rng& rng);
  [[nodiscard]] Var operator()(const Var& x) const;

 private:
  LayerNorm norm1_;
  MultiHeadAttention attention_;
  LayerNorm norm2_;
  Conv1d ffn_in_;
  Linear ffn_out_;
};

// Sinusoidal positional table, rows = positions.
[[nodiscard]] Matrix sinusoid_positions(int length, int channels, int offset = 0);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  int warmup_steps = 0;         // linear warmup, then inverse-sqrt decay when noam
  bool noam_decay = false;
  double clip_norm = 0.0;       // 0 disables global-norm clipping
};

class Adam {
 public:
  Adam() = default;
  Adam(const ParameterSet& params, AdamConfig config);

  // Applies one update from the accumulated gradients, then clears them.
  // Returns the pre-clipping global gradient norm.
  double step();

  [[nodiscard]] double current_learning_rate() const;
  [[nodiscard]] long long step_count() const { return step_; }
  void set_step_count(long long s) { step_ = s; }

  [[nodiscard]] std::vector<Matrix>& first_moments() { return m_; }
  [[nodiscard]] std::vector<Matrix>& second_moments() { return v_; }
  [[nodiscard]] const std::vector<Matrix>& first_moments() const { return m_; }
  [[nodiscard]] const std::vector<Matrix>& second_moments() const { return v_; }
  [[nodiscard]] const AdamConfig& config() const { return config_; }

 private:
  std::vector<Var> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  AdamConfig config_;
  long long step_ = 0;
};

}  // namespace megalab::nn

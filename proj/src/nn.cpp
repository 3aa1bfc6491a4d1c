#include "megalab/nn.hpp"

#include <cmath>

#include "megalab/error.hpp"

namespace megalab::nn {

Var ParameterSet::add(const std::string& name, Matrix init) {
  if (find(name) != nullptr) {
    throw ValidationError("duplicate parameter name: " + name);
  }
  Var v = ad::leaf(std::move(init));
  entries_.emplace_back(name, v);
  return v;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : entries_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

const Var* ParameterSet::find(const std::string& name) const {
  for (const auto& [n, v] : entries_) {
    if (n == name) return &v;
  }
  return nullptr;
}

void ParameterSet::zero_grad() {
  for (auto& [name, v] : entries_) v.zero_grad();
}

Matrix init_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal01(rng) * stddev;
  }
  return m;
}

Linear::Linear(ParameterSet& params, const std::string& name, int in, int out, Rng& rng) : in_(in), out_(out) {
  weight_ = params.add(name + ".weight", init_normal(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  bias_ = params.add(name + ".bias", Matrix::Zero(1, out));
}

Var Linear::operator()(const Var& x) const { return ad::add_row(ad::matmul(x, weight_), bias_); }

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, int channels) {
  gamma_ = params.add(name + ".gamma", Matrix::Ones(1, channels));
  beta_ = params.add(name + ".beta", Matrix::Zero(1, channels));
}

Var LayerNorm::operator()(const Var& x) const { return ad::layer_norm(x, gamma_, beta_); }

Embedding::Embedding(ParameterSet& params, const std::string& name, int count, int dim, Rng& rng) : count_(count) {
  table_ = params.add(name + ".table", init_normal(count, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng));
}

Var Embedding::operator()(std::span<const int> ids) const {
  for (int id : ids) {
    if (id < 0 || id >= count_) {
      throw ValidationError("embedding id " + std::to_string(id) + " outside [0, " + std::to_string(count_) + ")");
    }
  }
  return ad::gather_rows(table_, ids);
}

ad::IndexTable conv1d_table(int length, int kernel, Padding padding) {
  const int left = padding == Padding::kCausal ? kernel - 1 : kernel / 2;
  ad::IndexTable table(length, kernel);
  for (int t = 0; t < length; ++t) {
    for (int j = 0; j < kernel; ++j) {
      const int src = t + j - left;
      table(t, j) = (src >= 0 && src < length) ? src : -1;
    }
  }
  return table;
}

Conv1d::Conv1d(ParameterSet& params, const std::string& name, int in, int out, int kernel, Rng& rng,
               Padding padding)
    : kernel_(kernel), padding_(padding) {
  const double fan_in = static_cast<double>(in * kernel);
  weight_ = params.add(name + ".weight", init_normal(static_cast<Eigen::Index>(kernel) * in, out,
                                                     1.0 / std::sqrt(fan_in), rng));
  bias_ = params.add(name + ".bias", Matrix::Zero(1, out));
}

Var Conv1d::operator()(const Var& x) const {
  const auto table = conv1d_table(static_cast<int>(x.rows()), kernel_, padding_);
  return ad::add_row(ad::matmul(ad::im2col(x, table), weight_), bias_);
}

Conv2d::Conv2d(ParameterSet& params, const std::string& name, int in, int out, int kernel, int stride, Rng& rng)
    : kernel_(kernel), stride_(stride) {
  const double fan_in = static_cast<double>(in * kernel * kernel);
  weight_ = params.add(name + ".weight", init_normal(static_cast<Eigen::Index>(kernel) * kernel * in, out,
                                                     1.0 / std::sqrt(fan_in), rng));
  bias_ = params.add(name + ".bias", Matrix::Zero(1, out));
}

FeatureMap Conv2d::operator()(const FeatureMap& x) const {
  const int pad = kernel_ / 2;
  const int out_h = (x.height + 2 * pad - kernel_) / stride_ + 1;
  const int out_w = (x.width + 2 * pad - kernel_) / stride_ + 1;
  if (out_h < 1 || out_w < 1) {
    throw ValidationError("conv2d: input map too small");
  }
  ad::IndexTable table(static_cast<Eigen::Index>(out_h) * out_w, kernel_ * kernel_);
  for (int oh = 0; oh < out_h; ++oh) {
    for (int ow = 0; ow < out_w; ++ow) {
      for (int kh = 0; kh < kernel_; ++kh) {
        for (int kw = 0; kw < kernel_; ++kw) {
          const int h = oh * stride_ + kh - pad;
          const int w = ow * stride_ + kw - pad;
          const bool inside = h >= 0 && h < x.height && w >= 0 && w < x.width;
          table(oh * out_w + ow, kh * kernel_ + kw) = inside ? h * x.width + w : -1;
        }
      }
    }
  }
  return {ad::add_row(ad::matmul(ad::im2col(x.cells, table), weight_), bias_), out_h, out_w};
}

ConvBlock::ConvBlock(ParameterSet& params, const std::string& name, int in, int out, int kernel, Rng& rng,
                     Padding padding)
    : conv_(params, name + ".conv", in, out, kernel, rng, padding),
      norm_(params, name + ".norm", out),
      residual_(in == out) {}

Var ConvBlock::operator()(const Var& x) const {
  Var y = norm_(ad::relu(conv_(x)));
  return residual_ ? ad::add(x, y) : y;
}

ConvStack::ConvStack(ParameterSet& params, const std::string& name, int in, int hidden, int layers, int kernel,
                     Rng& rng, Padding padding) {
  for (int i = 0; i < layers; ++i) {
    blocks_.emplace_back(params, name + ".block" + std::to_string(i), i == 0 ? in : hidden, hidden, kernel, rng,
                         padding);
  }
}

Var ConvStack::operator()(const Var& x) const {
  Var h = x;
  for (const auto& b : blocks_) h = b(h);
  return h;
}

MultiHeadAttention::MultiHeadAttention(ParameterSet& params, const std::string& name, int channels, int heads,
                                       bool causal, Rng& rng)
    : qkv_(params, name + ".qkv", channels, 3 * channels, rng),
      out_(params, name + ".out", channels, channels, rng),
      heads_(heads),
      channels_(channels),
      causal_(causal) {
  if (channels % heads != 0) {
    throw ValidationError("attention: channels must be divisible by heads");
  }
}

Var MultiHeadAttention::operator()(const Var& x) const {
  const Eigen::Index t = x.rows();
  const int dh = channels_ / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var qkv = qkv_(x);
  Var mask;
  if (causal_) {
    Matrix m = Matrix::Zero(t, t);
    for (Eigen::Index i = 0; i < t; ++i) {
      for (Eigen::Index j = i + 1; j < t; ++j) m(i, j) = -1e9;
    }
    mask = ad::constant(std::move(m));
  }
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads_));
  for (int h = 0; h < heads_; ++h) {
    Var q = ad::slice_cols(qkv, static_cast<Eigen::Index>(h) * dh, dh);
    Var k = ad::slice_cols(qkv, channels_ + static_cast<Eigen::Index>(h) * dh, dh);
    Var v = ad::slice_cols(qkv, 2 * channels_ + static_cast<Eigen::Index>(h) * dh, dh);
    Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt);
    if (causal_) scores = ad::add(scores, mask);
    outs.push_back(ad::matmul(ad::softmax_rows(scores), v));
  }
  return out_(heads_ == 1 ? outs.front() : ad::concat_cols(outs));
}

TransformerLayer::TransformerLayer(ParameterSet& params, const std::string& name, int channels, int heads,
                                   int filter, int kernel, bool causal, Rng& rng)
    : norm1_(params, name + ".norm1", channels),
      attention_(params, name + ".attn", channels, heads, causal, rng),
      norm2_(params, name + ".norm2", channels),
      ffn_in_(params, name + ".ffn_in", channels, filter, kernel, rng, causal ? Padding::kCausal : Padding::kSame),
      ffn_out_(params, name + ".ffn_out", filter, channels, rng) {}

Var TransformerLayer::operator()(const Var& x) const {
  Var h = ad::add(x, attention_(norm1_(x)));
  return ad::add(h, ffn_out_(ad::relu(ffn_in_(norm2_(h)))));
}

Matrix sinusoid_positions(int length, int channels, int offset) {
  Matrix p(length, channels);
  for (int t = 0; t < length; ++t) {
    for (int c = 0; c < channels; ++c) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) / channels);
      const double angle = static_cast<double>(t + offset) * rate;
      p(t, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return p;
}

Adam::Adam(const ParameterSet& params, AdamConfig config) : config_(config) {
  for (const auto& [name, v] : params.entries()) {
    params_.push_back(v);
    m_.push_back(Matrix::Zero(v.rows(), v.cols()));
    v_.push_back(Matrix::Zero(v.rows(), v.cols()));
  }
}

double Adam::current_learning_rate() const {
  const double s = static_cast<double>(step_ + 1);
  if (config_.warmup_steps <= 0) return config_.learning_rate;
  const double w = static_cast<double>(config_.warmup_steps);
  if (config_.noam_decay) return config_.learning_rate * std::min(s / w, std::sqrt(w / s));
  return config_.learning_rate * std::min(1.0, s / w);
}

double Adam::step() {
  double sq = 0.0;
  for (const auto& p : params_) {
    if (p.grad().size() != 0) sq += p.grad().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    throw NumericError("adam: non-finite gradient norm");
  }
  const double clip = (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;
  const double lr = current_learning_rate();
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.grad().size() == 0) continue;
    const Matrix g = p.grad() * clip;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    p.mutable_value().array() -=
        lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.epsilon);
    p.zero_grad();
  }
  return norm;
}

}  // namespace megalab::nn

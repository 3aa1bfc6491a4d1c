#include "megalab/pllm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "megalab/error.hpp"

namespace megalab {

namespace {

Eigen::RowVectorXd log_softmax(const Eigen::RowVectorXd& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

}  // namespace

PLLM::PLLM(PLLMConfig config, std::uint64_t seed) : config_(std::move(config)) {
  megalab::validate(config_);
  Rng rng = make_rng(seed, "pllm-init");
  const int h = config_.hidden;
  code_embedding_ = nn::Embedding(params_, "pllm.code_embedding", config_.embedding_rows(), h, rng);
  segment_embedding_ = nn::Embedding(params_, "pllm.segment_embedding", kSegmentKinds, h, rng);
  separator_ = params_.add("pllm.separator", nn::init_normal(1, h, 0.1, rng));
  content_in_ = nn::Linear(params_, "pllm.content_in", config_.content_dim, h, rng);
  timbre_in_ = nn::Linear(params_, "pllm.timbre_in", config_.timbre_dim, h, rng);
  for (int i = 0; i < config_.layers; ++i) {
    layers_.emplace_back(params_, "pllm.layer" + std::to_string(i), h, config_.heads, config_.filter, config_.kernel,
                         true, rng);
  }
  final_norm_ = nn::LayerNorm(params_, "pllm.final_norm", h);
  head_ = nn::Linear(params_, "pllm.head", h, config_.codebook_size + 1, rng);
}

void PLLM::validate(const PLLMContext& ctx) const {
  if (ctx.target_content.rows() == 0) {
    throw ValidationError("P-LLM: empty target content");
  }
  if (ctx.prompt_content.rows() != static_cast<Eigen::Index>(ctx.prompt_codes.size())) {
    throw ValidationError("P-LLM: prompt has " + std::to_string(ctx.prompt_content.rows()) + " content rows but " +
                          std::to_string(ctx.prompt_codes.size()) + " codes");
  }
  if (ctx.target_content.cols() != config_.content_dim ||
      (ctx.prompt_content.rows() > 0 && ctx.prompt_content.cols() != config_.content_dim)) {
    throw ValidationError("P-LLM: content width must be " + std::to_string(config_.content_dim));
  }
  if (ctx.timbre.rows() != 1 || ctx.timbre.cols() != config_.timbre_dim) {
    throw ValidationError("P-LLM: timbre must be 1 x " + std::to_string(config_.timbre_dim));
  }
  for (int c : ctx.prompt_codes) {
    if (c < 0 || c >= config_.codebook_size) {
      throw ValidationError("P-LLM: prompt code " + std::to_string(c) + " outside codebook");
    }
  }
}

SequenceLayout PLLM::layout(const PLLMContext& ctx) const {
  validate(ctx);
  const int tp = static_cast<int>(ctx.prompt_codes.size());
  SequenceLayout out;
  const int segments = tp > 0 ? 4 : 2;
  out.separators = segments - 1;
  out.conditioning_length = 2 * tp + 1 + ctx.target_length() + out.separators;
  return out;
}

ad::Var PLLM::embed(const PLLMContext& ctx, std::span<const int> target_codes) const {
  const SequenceLayout lay = layout(ctx);
  const int total = lay.conditioning_length + 1 + static_cast<int>(target_codes.size());
  if (total > config_.max_positions) {
    throw ValidationError("P-LLM: sequence of " + std::to_string(total) + " positions exceeds max_positions " +
                          std::to_string(config_.max_positions));
  }
  for (int c : target_codes) {
    if (c < 0 || c >= config_.codebook_size) {
      throw ValidationError("P-LLM: target code " + std::to_string(c) + " outside codebook");
    }
  }
  const int h = config_.hidden;
  auto decorate = [&](const ad::Var& rows, SegmentKind kind) {
    const int n = static_cast<int>(rows.rows());
    const std::vector<int> ids(static_cast<std::size_t>(n), static_cast<int>(kind));
    return ad::add(ad::add(rows, segment_embedding_(ids)), ad::constant(nn::sinusoid_positions(n, h)));
  };

  std::vector<ad::Var> parts;
  if (!ctx.prompt_codes.empty()) {
    parts.push_back(decorate(content_in_(ad::constant(ctx.prompt_content)), SegmentKind::kPromptContent));
    parts.push_back(separator_);
    parts.push_back(decorate(code_embedding_(ctx.prompt_codes), SegmentKind::kPromptCodes));
    parts.push_back(separator_);
  }
  parts.push_back(decorate(timbre_in_(ad::constant(ctx.timbre)), SegmentKind::kTimbre));
  parts.push_back(separator_);
  parts.push_back(decorate(content_in_(ad::constant(ctx.target_content)), SegmentKind::kTargetContent));

  std::vector<int> codes{config_.bos()};
  codes.insert(codes.end(), target_codes.begin(), target_codes.end());
  parts.push_back(decorate(code_embedding_(codes), SegmentKind::kTargetCodes));
  return ad::concat_rows(parts);
}

ad::Var PLLM::forward(const PLLMContext& ctx, std::span<const int> target_codes) const {
  ad::Var x = embed(ctx, target_codes);
  for (const auto& layer : layers_) x = layer(x);
  const Eigen::Index bos = layout(ctx).bos_position();
  ad::Var logits = head_(final_norm_(ad::slice_rows(x, bos, x.rows() - bos)));
  if (!logits.value().allFinite()) {
    throw NumericError("P-LLM: non-finite logits");
  }
  return logits;
}

TeacherForcedOutput PLLM::forward_teacher_forced(const PLLMContext& ctx, std::span<const int> targets) const {
  if (targets.empty()) {
    throw ValidationError("P-LLM: teacher forcing needs at least one target code");
  }
  if (static_cast<int>(targets.size()) != ctx.target_length()) {
    throw ValidationError("P-LLM: " + std::to_string(targets.size()) + " target codes for " +
                          std::to_string(ctx.target_length()) + " target phonemes");
  }
  const ad::Var full = forward(ctx, targets);
  const auto t = static_cast<Eigen::Index>(targets.size());
  TeacherForcedOutput out;
  out.logits = ad::slice_cols(ad::slice_rows(full, 0, t), 0, config_.codebook_size);
  out.loss = ad::cross_entropy(out.logits, targets);
  const std::vector<int> eos{config_.codebook_size};
  out.eos_loss = ad::cross_entropy(ad::slice_rows(full, t, 1), eos);
  return out;
}

ad::Var PLLM::training_loss(const PLLMContext& ctx, std::span<const int> targets) const {
  const TeacherForcedOutput out = forward_teacher_forced(ctx, targets);
  if (config_.eos_weight == 0.0) return out.loss;
  return ad::add(out.loss, ad::scale(out.eos_loss, config_.eos_weight));
}

Eigen::RowVectorXd PLLM::next_log_probs(const PLLMContext& ctx, std::span<const int> prefix) const {
  ad::NoGradGuard guard;
  const ad::Var logits = forward(ctx, prefix);
  return log_softmax(logits.value().row(logits.rows() - 1).head(config_.codebook_size));
}

double PLLM::score_path(const PLLMContext& ctx, std::span<const int> prefix, std::span<const int> codes) const {
  if (codes.empty()) {
    throw ValidationError("score_path: empty path");
  }
  if (static_cast<int>(prefix.size() + codes.size()) > ctx.target_length()) {
    throw ValidationError("score_path: prefix plus path is longer than the target");
  }
  for (int c : codes) {
    if (c < 0 || c >= config_.codebook_size) {
      throw ValidationError("score_path: code " + std::to_string(c) + " outside codebook");
    }
  }
  std::vector<int> input(prefix.begin(), prefix.end());
  input.insert(input.end(), codes.begin(), codes.end() - 1);
  ad::NoGradGuard guard;
  const ad::Matrix logits = forward(ctx, input).value();
  double score = 0.0;
  for (std::size_t t = 0; t < codes.size(); ++t) {
    const auto row = static_cast<Eigen::Index>(prefix.size() + t);
    score += log_softmax(logits.row(row).head(config_.codebook_size))(codes[t]);
  }
  return score;
}

std::vector<int> PLLM::sample_topk(const PLLMContext& ctx, int k, Rng& rng, std::span<const int> prefix,
                                   int count) const {
  if (k < 1 || k > config_.codebook_size) {
    throw ValidationError("top-k: k must lie in [1, " + std::to_string(config_.codebook_size) + "]");
  }
  if (count < 0) count = ctx.target_length();
  if (count > ctx.target_length() || static_cast<int>(prefix.size()) > count) {
    throw ValidationError("top-k: requested length does not fit the target");
  }
  std::vector<int> out(prefix.begin(), prefix.end());
  ad::NoGradGuard guard;
  while (static_cast<int>(out.size()) < count) {
    const ad::Var logits = forward(ctx, out);
    const Eigen::RowVectorXd last = logits.value().row(logits.rows() - 1).head(config_.codebook_size);
    out.push_back(sample_topk_from_logits(last, k, rng));
  }
  return out;
}

int sample_topk_from_logits(const Eigen::RowVectorXd& logits, int k, Rng& rng) {
  const int n = static_cast<int>(logits.size());
  if (k < 1 || k > n) {
    throw ValidationError("top-k: k must lie in [1, " + std::to_string(n) + "]");
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    return logits(a) > logits(b) || (logits(a) == logits(b) && a < b);
  });
  const double mx = logits(order[0]);
  std::vector<double> p(static_cast<std::size_t>(k));
  double z = 0.0;
  for (int i = 0; i < k; ++i) z += p[static_cast<std::size_t>(i)] = std::exp(logits(order[static_cast<std::size_t>(i)]) - mx);
  const double u = uniform01(rng) * z;
  double acc = 0.0;
  for (int i = 0; i < k; ++i) {
    acc += p[static_cast<std::size_t>(i)];
    if (u < acc) return order[static_cast<std::size_t>(i)];
  }
  return order[static_cast<std::size_t>(k - 1)];
}

PLLMTrainer::PLLMTrainer(PLLM& model) : model_(model), opt_(model.parameters(), adam_config(model.config().optimizer)) {}

double PLLMTrainer::step(std::span<const PLLMExample> batch) {
  if (batch.empty()) {
    throw ValidationError("P-LLM training step on an empty batch");
  }
  std::vector<ad::Var> losses;
  for (const auto& ex : batch) losses.push_back(model_.training_loss(ex.context, ex.targets));
  ad::Var total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = ad::add(total, losses[i]);
  total = ad::scale(total, 1.0 / static_cast<double>(losses.size()));
  const double value = total.scalar();
  if (!std::isfinite(value)) {
    throw NumericError("P-LLM loss is not finite");
  }
  ad::backward(total);
  opt_.step();
  return value;
}

}  // namespace megalab

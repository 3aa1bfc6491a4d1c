#include "doctest.h"

#include <cmath>

#include "megalab/error.hpp"
#include "megalab/pllm.hpp"
#include "megalab/synthetic.hpp"
#include "pllm_reference.hpp"

using namespace megalab;
using megalab::testing::random_context;

namespace {

void set_param(PLLM& model, const std::string& name, const ad::Matrix& value) {
  ad::Var v = *model.parameters().find(name);
  REQUIRE(v.rows() == value.rows());
  REQUIRE(v.cols() == value.cols());
  v.mutable_value() = value;
}

}  // namespace

TEST_CASE("sequence layout: 4-phoneme prompt, 6-phoneme target") {
  const PLLMConfig cfg = toy_pllm_config(8);
  const PLLM model(cfg, 1);
  Rng rng = make_rng(1, "layout");
  const PLLMContext ctx = random_context(cfg, 4, 6, rng);
  const SequenceLayout lay = model.layout(ctx);
  CHECK(lay.conditioning_length == 18);
  CHECK(lay.separators == 3);
  CHECK(lay.bos_position() == 18);
  const std::vector<int> codes{1, 2, 3};
  CHECK(model.embed(ctx, codes).rows() == 18 + 1 + 3);
  CHECK(model.forward(ctx, codes).rows() == 4);
  CHECK(model.forward(ctx, codes).cols() == cfg.codebook_size + 1);
}

TEST_CASE("sequence layout without a prompt") {
  const PLLMConfig cfg = toy_pllm_config(8);
  const PLLM model(cfg, 1);
  Rng rng = make_rng(2, "layout");
  const PLLMContext ctx = random_context(cfg, 0, 6, rng);
  const SequenceLayout lay = model.layout(ctx);
  CHECK(lay.separators == 1);
  CHECK(lay.conditioning_length == 1 + 1 + 6);
}

TEST_CASE("context validation") {
  const PLLMConfig cfg = toy_pllm_config(8);
  const PLLM model(cfg, 1);
  Rng rng = make_rng(3, "bad");
  PLLMContext ctx = random_context(cfg, 2, 0, rng);
  CHECK_THROWS_AS((void)model.layout(ctx), ValidationError);
  ctx = random_context(cfg, 2, 3, rng);
  ctx.prompt_codes.pop_back();
  CHECK_THROWS_AS((void)model.layout(ctx), ValidationError);
  ctx = random_context(cfg, 2, 3, rng);
  const std::vector<int> special{cfg.bos()};
  CHECK_THROWS_AS((void)model.embed(ctx, special), ValidationError);
  CHECK_THROWS_AS((void)model.score_path(ctx, {}, special), ValidationError);
}

TEST_CASE("special token ids at full scale") {
  const PLLMConfig cfg;
  CHECK(cfg.bos() == 2048);
  CHECK(cfg.eos() == 2049);
  CHECK(cfg.embedding_rows() == 2050);
  CHECK(cfg.layers == 8);
  CHECK(cfg.heads == 8);
  CHECK(cfg.hidden == 512);
  CHECK(cfg.top_k == 5);
  CHECK(cfg.context_sentences == 7);
}

TEST_CASE("uniform logits over 2048 classes give ln 2048") {
  PLLMConfig cfg = toy_pllm_config(2048);
  cfg.hidden = 8;
  cfg.filter = 8;
  cfg.content_dim = 4;
  cfg.timbre_dim = 4;
  PLLM model(cfg, 2);
  set_param(model, "pllm.head.weight", ad::Matrix::Zero(cfg.hidden, cfg.codebook_size + 1));
  Rng rng = make_rng(4, "uniform");
  const PLLMContext ctx = random_context(cfg, 3, 5, rng);
  const std::vector<int> targets{0, 17, 2047, 900, 5};
  const auto out = model.forward_teacher_forced(ctx, targets);
  CHECK(out.logits.cols() == 2048);
  CHECK(out.logits.rows() == 5);
  CHECK(std::abs(out.loss.scalar() - 7.6246) < 1e-4);
  CHECK(std::abs(out.loss.scalar() - std::log(2048.0)) < 1e-12);
}

TEST_CASE("raising the correct-class logit lowers the loss") {
  Rng rng = make_rng(5, "mono");
  ad::Matrix logits = nn::init_normal(3, 6, 1.0, rng);
  const std::vector<int> t{2, 0, 5};
  const double before = ad::cross_entropy(ad::constant(logits), t).scalar();
  logits(1, 0) += 0.3;
  CHECK(ad::cross_entropy(ad::constant(logits), t).scalar() < before);
}

TEST_CASE("causality: later target codes never change earlier logits") {
  const PLLMConfig cfg = toy_pllm_config(8);
  const PLLM model(cfg, 3);
  Rng rng = make_rng(6, "causal");
  const PLLMContext ctx = random_context(cfg, 3, 7, rng);
  std::vector<int> codes{1, 4, 2, 7, 0, 3, 5};
  const ad::Matrix base = model.forward(ctx, codes).value();
  for (int t = 0; t < 7; ++t) {
    std::vector<int> changed = codes;
    changed[t] = (changed[t] + 3) % 8;
    const ad::Matrix other = model.forward(ctx, changed).value();
    CHECK((base.topRows(t + 1) - other.topRows(t + 1)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((base.row(t + 1) - other.row(t + 1)).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("one-step continuations are normalized") {
  const PLLMConfig cfg = toy_pllm_config(8);
  const PLLM model(cfg, 4);
  Rng rng = make_rng(7, "norm");
  const PLLMContext ctx = random_context(cfg, 2, 5, rng);
  const std::vector<int> prefix{3, 1};
  double total = 0;
  for (int c = 0; c < 8; ++c) {
    const std::vector<int> one{c};
    total += std::exp(model.score_path(ctx, prefix, one));
  }
  CHECK(std::abs(total - 1.0) < 1e-5);
}

TEST_CASE("one-step path with probability 0.5 scores ln 0.5") {
  PLLMConfig cfg = toy_pllm_config(3);
  PLLM model(cfg, 5);
  set_param(model, "pllm.head.weight", ad::Matrix::Zero(cfg.hidden, 4));
  ad::Matrix bias = ad::Matrix::Zero(1, 4);
  bias(0, 1) = std::log(2.0);
  bias(0, 3) = 9.0;  // EOS column is excluded from code scoring
  set_param(model, "pllm.head.bias", bias);
  Rng rng = make_rng(8, "half");
  const PLLMContext ctx = random_context(cfg, 0, 2, rng);
  const std::vector<int> path{1};
  CHECK(std::abs(model.score_path(ctx, {}, path) - std::log(0.5)) < 1e-12);
}

TEST_CASE("score_path obeys the chain rule") {
  const PLLMConfig cfg = toy_pllm_config(8);
  const PLLM model(cfg, 6);
  Rng rng = make_rng(9, "chain");
  const PLLMContext ctx = random_context(cfg, 3, 8, rng);
  const std::vector<int> prefix{1, 2};
  const std::vector<int> a{5, 0, 7};
  const std::vector<int> b{3, 3};
  std::vector<int> ab = a;
  ab.insert(ab.end(), b.begin(), b.end());
  std::vector<int> prefix_a = prefix;
  prefix_a.insert(prefix_a.end(), a.begin(), a.end());
  CHECK(model.score_path(ctx, prefix, ab) ==
        doctest::Approx(model.score_path(ctx, prefix, a) + model.score_path(ctx, prefix_a, b)).epsilon(1e-12));
}

TEST_CASE("score_path matches an independent step-by-step recomputation") {
  const PLLMConfig cfg = toy_pllm_config(6);
  Rng rng = make_rng(10, "oracle");
  for (int trial = 0; trial < 5; ++trial) {
    const PLLM model(cfg, 100 + trial);
    const testing::ReferencePLLM reference(model);
    const PLLMContext ctx = random_context(cfg, 1 + trial, 6, rng);
    std::vector<int> prefix;
    std::vector<int> path;
    for (int i = 0; i < trial % 3; ++i) prefix.push_back(static_cast<int>(uniform_index(rng, 6)));
    for (int i = 0; i < 3; ++i) path.push_back(static_cast<int>(uniform_index(rng, 6)));
    CHECK(std::abs(model.score_path(ctx, prefix, path) - reference.score_path(ctx, prefix, path)) < 1e-5);
  }
}

TEST_CASE("top-k sampling from logits") {
  SUBCASE("k = 1 is argmax, independent of the seed") {
    Eigen::RowVectorXd logits(4);
    logits << 0.1, 2.0, 2.0, -1.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      Rng rng = make_rng(s, "greedy");
      CHECK(sample_topk_from_logits(logits, 1, rng) == 1);
    }
  }
  SUBCASE("k = 2 with renormalized probabilities 0.8 / 0.2") {
    Eigen::RowVectorXd logits(5);
    logits << std::log(0.8), -3.0, std::log(0.2), -5.0, -4.0;
    Rng rng = make_rng(11, "k2");
    int first = 0;
    int other = 0;
    for (int i = 0; i < 10000; ++i) {
      const int c = sample_topk_from_logits(logits, 2, rng);
      first += c == 0;
      other += c != 0 && c != 2;
    }
    CHECK(other == 0);
    CHECK(std::abs(first / 10000.0 - 0.8) <= 0.02);
  }
  SUBCASE("k = vocabulary reproduces the full distribution") {
    Eigen::RowVectorXd logits(4);
    logits << 0.0, 1.0, -0.5, 0.3;
    const Eigen::RowVectorXd p = logits.array().exp() / logits.array().exp().sum();
    Rng rng = make_rng(12, "full");
    Eigen::RowVectorXd freq = Eigen::RowVectorXd::Zero(4);
    for (int i = 0; i < 10000; ++i) freq(sample_topk_from_logits(logits, 4, rng)) += 1e-4;
    CHECK((freq - p).cwiseAbs().maxCoeff() <= 0.02);
  }
  Rng rng = make_rng(13, "range");
  CHECK_THROWS_AS((void)sample_topk_from_logits(Eigen::RowVectorXd::Zero(3), 4, rng), ValidationError);
  CHECK_THROWS_AS((void)sample_topk_from_logits(Eigen::RowVectorXd::Zero(3), 0, rng), ValidationError);
}

TEST_CASE("model sampling: length clamp and determinism") {
  const PLLMConfig cfg = toy_pllm_config(8);
  const PLLM model(cfg, 7);
  Rng ctx_rng = make_rng(14, "ctx");
  const PLLMContext ctx = random_context(cfg, 3, 10, ctx_rng);
  Rng a = make_rng(1, "s");
  Rng b = make_rng(1, "s");
  const auto x = model.sample_topk(ctx, 5, a);
  CHECK(x.size() == 10);
  CHECK(x == model.sample_topk(ctx, 5, b));
  Rng g1 = make_rng(1, "g");
  Rng g2 = make_rng(2, "g");
  CHECK(model.sample_topk(ctx, 1, g1) == model.sample_topk(ctx, 1, g2));
  const std::vector<int> prefix{4, 4};
  Rng c = make_rng(3, "p");
  const auto y = model.sample_topk(ctx, 3, c, prefix, 6);
  CHECK(y.size() == 6);
  CHECK(y[0] == 4);
  CHECK(y[1] == 4);
}

TEST_CASE("memorizing a single pair drives its loss towards zero") {
  PLLMConfig cfg = toy_pllm_config(8);
  cfg.optimizer.learning_rate = 1e-2;
  cfg.optimizer.warmup_steps = 0;
  PLLM model(cfg, 8);
  PLLMTrainer trainer(model);
  Rng rng = make_rng(15, "memo");
  PLLMExample ex{random_context(cfg, 2, 6, rng), {3, 1, 4, 1, 5, 2}};
  double loss = 0;
  for (int i = 0; i < 150; ++i) loss = trainer.step(std::span<const PLLMExample>(&ex, 1));
  CHECK(model.forward_teacher_forced(ex.context, ex.targets).loss.scalar() < 0.05);
  CHECK(loss < 0.2);
}

TEST_CASE("short Markov run moves towards the conditional entropy") {
  const ProsodyProcess process = default_prosody_process(4, 3, 0.6);
  const double h = conditional_entropy(process.transition);
  PLLMConfig cfg = toy_pllm_config(4);
  cfg.content_dim = 4;
  cfg.timbre_dim = 4;
  cfg.optimizer.learning_rate = 3e-3;
  cfg.optimizer.warmup_steps = 20;
  PLLM model(cfg, 9);
  PLLMTrainer trainer(model);
  const Eigen::VectorXd pi = stationary_distribution(process.transition);
  auto example = [&](Rng& rng) {
    PLLMExample ex;
    ex.context.timbre = ad::Matrix::Zero(1, 4);
    ex.context.target_content = ad::Matrix::Zero(48, 4);
    ex.context.prompt_content.resize(0, 4);
    ex.targets = sample_markov_chain(process.transition, pi, 48, rng);
    return ex;
  };
  for (int i = 0; i < 300; ++i) {
    Rng rng = make_rng(16, "markov", static_cast<std::uint64_t>(i));
    const PLLMExample ex = example(rng);
    (void)trainer.step(std::span<const PLLMExample>(&ex, 1));
  }
  double eval = 0;
  for (int i = 0; i < 20; ++i) {
    Rng rng = make_rng(17, "markov-eval", static_cast<std::uint64_t>(i));
    const PLLMExample ex = example(rng);
    eval += model.forward_teacher_forced(ex.context, ex.targets).loss.scalar() / 20;
  }
  CHECK(eval < std::log(4.0) - 0.5 * (std::log(4.0) - h));
}

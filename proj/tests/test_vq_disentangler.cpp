#include "doctest.h"

#include <chrono>
#include <cmath>

#include "gradcheck.hpp"
#include "megalab/disentangler.hpp"
#include "megalab/error.hpp"
#include "megalab/synthetic.hpp"

using namespace megalab;

namespace {

int brute_force_nearest(const Eigen::RowVectorXd& h, const Eigen::MatrixXd& codebook) {
  int best = -1;
  double best_d = 0;
  for (int k = 0; k < codebook.rows(); ++k) {
    double d = 0;
    for (int j = 0; j < codebook.cols(); ++j) d += (h(j) - codebook(k, j)) * (h(j) - codebook(k, j));
    if (best < 0 || d < best_d) {
      best = k;
      best_d = d;
    }
  }
  return best;
}

PhonemeUtterance toy_utterance(int phonemes, int frames_per_phoneme, int bins, std::uint64_t seed) {
  Rng rng = make_rng(seed, "toy-utt");
  PhonemeUtterance u;
  u.utterance_id = "toy";
  u.speaker_id = "s";
  for (int i = 0; i < phonemes; ++i) {
    u.phonemes.push_back(static_cast<int>(uniform_index(rng, 16)));
    u.durations.push_back(frames_per_phoneme);
  }
  u.mel.values = nn::init_normal(phonemes * frames_per_phoneme, bins, 1.0, rng);
  return u;
}

}  // namespace

TEST_CASE("quantize picks (0,0) for (0.2,0.1) with losses 0.05") {
  Eigen::MatrixXd codebook(2, 2);
  codebook << 0, 0, 1, 1;
  Eigen::RowVector2d h(0.2, 0.1);
  const auto q = quantize(h, codebook);
  CHECK(q.index == 0);
  CHECK(q.z_q(0) == 0.0);
  CHECK(q.z_q(1) == 0.0);
  CHECK(q.codebook_loss == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(q.commit_loss == doctest::Approx(0.05).epsilon(1e-12));
}

TEST_CASE("quantize on an exact entry returns it with zero losses") {
  Rng rng = make_rng(5, "exact");
  const Eigen::MatrixXd codebook = nn::init_normal(8, 4, 1.0, rng);
  const auto q = quantize(codebook.row(3), codebook);
  CHECK(q.index == 3);
  CHECK(q.codebook_loss == 0.0);
  CHECK(q.commit_loss == 0.0);
}

TEST_CASE("ties go to the lowest index; non-finite input is rejected") {
  Eigen::MatrixXd codebook(3, 1);
  codebook << 1, -1, 1;
  CHECK(nearest_code(Eigen::RowVectorXd::Zero(1), codebook) == 0);
  Eigen::RowVectorXd bad(1);
  bad << std::nan("");
  CHECK_THROWS_AS((void)nearest_code(bad, codebook), NumericError);
}

TEST_CASE("quantize agrees with exhaustive search on 1000 random vectors") {
  Rng rng = make_rng(11, "exhaustive");
  const Eigen::MatrixXd codebook = nn::init_normal(16, 4, 1.0, rng);
  int agree = 0;
  for (int i = 0; i < 1000; ++i) {
    const Eigen::RowVectorXd h = nn::init_normal(1, 4, 1.5, rng);
    agree += quantize(h, codebook).index == brute_force_nearest(h, codebook);
  }
  CHECK(agree == 1000);
}

TEST_CASE("vector quantizer output rows are codebook rows") {
  Rng rng = make_rng(12, "rows");
  const ad::Var codebook = ad::leaf(nn::init_normal(6, 3, 1.0, rng));
  const ad::Var h = ad::leaf(nn::init_normal(9, 3, 1.0, rng));
  const auto vq = vector_quantize(h, codebook);
  REQUIRE(vq.codes.size() == 9);
  for (int i = 0; i < 9; ++i) CHECK(vq.quantized.value().row(i) == codebook.value().row(vq.codes[i]));
}

TEST_CASE("straight-through gradient equals the gradient with z_q replaced by h") {
  Rng rng = make_rng(13, "st");
  Eigen::MatrixXd codebook(2, 2);
  codebook << -1, 0.5, 0.8, -0.3;
  const ad::Matrix w = nn::init_normal(4, 2, 1.0, rng);
  const ad::Matrix h0 = nn::init_normal(4, 2, 0.3, rng);
  const auto loss_of = [&](const ad::Var& z) { return ad::sum(ad::square(ad::tanh(ad::mul(z, ad::constant(w))))); };

  const ad::Var h = ad::leaf(h0);
  ad::backward(loss_of(vector_quantize(h, ad::constant(codebook)).quantized));
  const ad::Matrix st_grad = h.grad();

  // Finite differences of f(z) evaluated at z = z_q.
  ad::Matrix zq(4, 2);
  for (int i = 0; i < 4; ++i) zq.row(i) = codebook.row(nearest_code(h0.row(i), codebook));
  double worst = 0;
  for (Eigen::Index i = 0; i < zq.size(); ++i) {
    const double eps = 1e-6;
    ad::Matrix plus = zq;
    ad::Matrix minus = zq;
    plus.data()[i] += eps;
    minus.data()[i] -= eps;
    const double numeric = (loss_of(ad::constant(plus)).scalar() - loss_of(ad::constant(minus)).scalar()) / (2 * eps);
    worst = std::max(worst, std::abs(numeric - st_grad.data()[i]) / std::max(1e-3, std::abs(numeric)));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("codebook and commit losses route gradients to their own side") {
  Rng rng = make_rng(14, "routes");
  const ad::Var codebook = ad::leaf(nn::init_normal(4, 2, 1.0, rng));
  const ad::Var h = ad::leaf(nn::init_normal(3, 2, 1.0, rng));
  auto vq = vector_quantize(h, codebook);
  ad::backward(vq.codebook_loss);
  CHECK(h.grad().size() == 0);
  CHECK(codebook.grad().size() > 0);
  codebook.node()->grad.resize(0, 0);
  vq = vector_quantize(h, codebook);
  ad::backward(vq.commit_loss);
  CHECK(codebook.grad().size() == 0);
  CHECK(h.grad().norm() > 0);
}

TEST_CASE("L_VQ is exactly zero at y = y_hat, h = z_q") {
  Rng rng = make_rng(15, "zero");
  const ad::Matrix y = nn::init_normal(7, 5, 1.0, rng);
  const ad::Matrix h = nn::init_normal(3, 2, 1.0, rng);
  CHECK(vq_loss(ad::constant(y), ad::constant(y), ad::constant(h), ad::constant(h), 0.25).scalar() == 0.0);
}

TEST_CASE("LSGAN losses at their optimum") {
  std::vector<ad::Var> real{ad::scalar(1.0), ad::scalar(1.0)};
  std::vector<ad::Var> fake{ad::scalar(0.0), ad::scalar(0.0)};
  CHECK(lsgan_discriminator_loss(real, fake).scalar() == 0.0);
  CHECK(lsgan_generator_loss(real).scalar() == 0.0);
  CHECK(lsgan_generator_loss(fake).scalar() == doctest::Approx(1.0));
  CHECK(lsgan_discriminator_loss(fake, real).scalar() == doctest::Approx(2.0));
}

TEST_CASE("duration loss targets log(1 + d)") {
  ad::Matrix pred(2, 1);
  pred << std::log1p(3.0), std::log1p(0.0);
  const std::vector<int> d{3, 0};
  CHECK(duration_loss(ad::constant(pred), d).scalar() == doctest::Approx(0.0));
  pred(1, 0) = 1.0;
  CHECK(duration_loss(ad::constant(pred), d).scalar() == doctest::Approx(0.5));
}

TEST_CASE("length_regulate examples") {
  Eigen::MatrixXd x(2, 2);
  x << 1, 2, 3, 4;
  const std::vector<int> d{2, 3};
  const Eigen::MatrixXd y = length_regulate(x, std::span<const int>(d));
  REQUIRE(y.rows() == 5);
  for (int i = 0; i < 2; ++i) CHECK(y.row(i) == x.row(0));
  for (int i = 2; i < 5; ++i) CHECK(y.row(i) == x.row(1));

  const std::vector<int> ones{1, 1};
  CHECK(length_regulate(x, std::span<const int>(ones)) == x);

  const std::vector<int> zero{0, 2};
  const Eigen::MatrixXd z = length_regulate(x, std::span<const int>(zero));
  CHECK(z.rows() == 2);
  CHECK(z.row(0) == x.row(1));

  const std::vector<int> neg{1, -1};
  CHECK_THROWS_AS((void)length_regulate(x, std::span<const int>(neg)), ValidationError);
  const std::vector<int> short_d{1};
  CHECK_THROWS_AS((void)length_regulate(x, std::span<const int>(short_d)), ValidationError);
}

TEST_CASE("length_regulate preserves row multiplicity") {
  Rng rng = make_rng(16, "multiset");
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + static_cast<int>(uniform_index(rng, 6));
    Eigen::MatrixXd x(n, 1);
    std::vector<int> d;
    for (int i = 0; i < n; ++i) {
      x(i, 0) = i;
      d.push_back(static_cast<int>(uniform_index(rng, 4)));
    }
    const Eigen::MatrixXd y = length_regulate(x, std::span<const int>(d));
    int total = 0;
    for (int v : d) total += v;
    CHECK(y.rows() == total);
    for (int i = 0; i < n; ++i) CHECK((y.array() == i).count() == d[i]);
  }
}

TEST_CASE("pooling matrix averages each phoneme span") {
  const std::vector<int> d{2, 0, 1};
  const Eigen::MatrixXd p = phoneme_pooling_matrix(d);
  Eigen::MatrixXd expected(3, 3);
  expected << 0.5, 0.5, 0, 0, 0, 0, 0, 0, 1;
  CHECK(p == expected);
}

TEST_CASE("disentangler shape contracts") {
  DisentanglerConfig cfg = toy_disentangler_config();
  const Disentangler model(cfg, 1);
  const PhonemeUtterance u = toy_utterance(7, 4, cfg.mel_bins, 3);

  const auto pros = model.prosody_encode(slice_low_band(u.mel, cfg.low_bins), u.durations);
  CHECK(pros.codes.size() == 7);
  CHECK(pros.quantized.rows() == 7);
  CHECK(pros.quantized.cols() == cfg.prosody.code_dim);
  CHECK_THROWS_AS((void)model.prosody_encode(u.mel, u.durations), ValidationError);
  std::vector<int> wrong = u.durations;
  wrong[0] += 1;
  CHECK_THROWS_AS((void)model.prosody_encode(slice_low_band(u.mel, cfg.low_bins), wrong), ValidationError);

  const std::vector<int> five{1, 2, 3, 4, 5};
  const ad::Var content = model.content_encode(five);
  CHECK(content.rows() == 5);
  CHECK(content.cols() == cfg.content.hidden);
  CHECK(model.content_encode(five).value() == content.value());
  const std::vector<int> oov{1, cfg.content.vocab_size};
  CHECK_THROWS_AS((void)model.content_encode(oov), ValidationError);

  const ad::Var timbre = model.timbre_encode(u.mel);
  CHECK(timbre.rows() == 1);
  CHECK(timbre.cols() == cfg.timbre.hidden);
  MelSpectrogram empty;
  empty.values.resize(0, cfg.mel_bins);
  CHECK_THROWS_AS((void)model.timbre_encode(empty), ValidationError);

  const ad::Var content4 = model.content_encode(std::span<const int>(five).first(4));
  const ad::Var prosody4 = model.code_embeddings(std::vector<int>{0, 1, 2, 3});
  const auto durations = model.predict_durations(content4, prosody4);
  CHECK(durations.size() == 4);
  for (int d : durations) CHECK(d >= 0);
  CHECK_THROWS_AS((void)model.predict_durations(content, prosody4), ValidationError);

  const std::vector<int> per_phoneme{30, 30, 30, 30};
  const ad::Var mel = model.decode_mel(length_regulate(prosody4, per_phoneme), timbre,
                                       length_regulate(content4, per_phoneme));
  CHECK(mel.rows() == 120);
  CHECK(mel.cols() == cfg.mel_bins);
  CHECK_THROWS_AS((void)model.decode_mel(prosody4, timbre, content), ValidationError);
}

TEST_CASE("timbre vector of a frame-constant input is length invariant") {
  DisentanglerConfig cfg = toy_disentangler_config();
  const Disentangler model(cfg, 2);
  Rng rng = make_rng(17, "constant-frame");
  const Eigen::RowVectorXd frame = nn::init_normal(1, cfg.mel_bins, 1.0, rng);
  // Frame-level outputs in the valid region (away from padding) are all equal.
  const int pad = cfg.timbre.layers * (cfg.timbre.kernel / 2);
  auto valid_mean = [&](int frames) {
    MelSpectrogram mel;
    mel.values = frame.replicate(frames, 1);
    const ad::Matrix f = model.timbre_frame_features(mel).value();
    return Eigen::RowVectorXd(f.middleRows(pad, frames - 2 * pad).colwise().mean());
  };
  CHECK((valid_mean(40) - valid_mean(90)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("discriminator window feasibility") {
  DisentanglerConfig cfg;
  cfg.prosody.hidden = 8;
  cfg.prosody.code_dim = 4;
  cfg.prosody.codebook_size = 4;
  cfg.content = {.vocab_size = 8, .layers = 1, .heads = 1, .hidden = 8, .kernel = 3, .filter = 8};
  cfg.timbre = {.layers = 1, .hidden = 8, .kernel = 3};
  cfg.decoder = {.layers = 1, .hidden = 8, .kernel = 3};
  cfg.duration = {.layers = 1, .hidden = 8, .kernel = 3};
  cfg.discriminator.hidden = 4;
  CHECK(cfg.discriminator.windows == std::vector<int>{32, 64, 128});
  const Disentangler model(cfg, 3);
  CHECK(model.feasible_windows(100) == std::vector<int>{32, 64});
  Rng rng = make_rng(18, "disc");
  MelSpectrogram mel;
  mel.values = nn::init_normal(100, cfg.mel_bins, 1.0, rng);
  CHECK(model.discriminate(mel, rng).size() == 2);
  mel.values = nn::init_normal(140, cfg.mel_bins, 1.0, rng);
  CHECK(model.discriminate(mel, rng).size() == 3);
  mel.values = nn::init_normal(31, cfg.mel_bins, 1.0, rng);
  CHECK_THROWS_AS((void)model.discriminate(mel, rng), ValidationError);
  for (int i = 0; i < 50; ++i) {
    const auto starts = model.sample_window_starts(100, rng);
    CHECK(starts[0] + 32 <= 100);
    CHECK(starts[1] + 64 <= 100);
  }
}

TEST_CASE("default config carries the full-scale hyperparameters") {
  const DisentanglerConfig cfg;
  CHECK(cfg.prosody.codebook_size == 2048);
  CHECK(cfg.prosody.code_dim == 256);
  CHECK(cfg.content.hidden == 320);
  CHECK(cfg.timbre.hidden == 320);
  CHECK(cfg.decoder.layers == 5);
  CHECK(cfg.duration.layers == 3);
  CHECK(cfg.duration.hidden == 320);
  CHECK(cfg.discriminator.windows.size() == 3);
  CHECK(cfg.commit_weight == 0.25);
  CHECK(cfg.adversarial_weight == 0.05);
}

TEST_CASE("config INI round trip and validation") {
  DisentanglerConfig cfg = toy_disentangler_config();
  cfg.commit_weight = 0.125;
  const std::string ini = to_ini(cfg);
  const DisentanglerConfig back = disentangler_config_from_ini(ini);
  CHECK(to_ini(back) == ini);
  CHECK(config_hash(ini) == config_hash(to_ini(back)));
  CHECK(config_hash(ini) != config_hash(to_ini(toy_disentangler_config())));

  DisentanglerConfig bad = cfg;
  bad.discriminator.windows = {64, 32};
  CHECK_THROWS_AS(validate(bad), ValidationError);
  bad = cfg;
  bad.decoder.hidden = 0;
  CHECK_THROWS_AS(validate(bad), ValidationError);
  CHECK_THROWS_AS((void)disentangler_config_from_ini("[mel]\nbins = many\n"), ValidationError);

  const PLLMConfig p = toy_pllm_config(8);
  CHECK(to_ini(pllm_config_from_ini(to_ini(p))) == to_ini(p));
}

TEST_CASE("training step reduces the loss on a small synthetic set") {
  SyntheticFactorSpec spec;
  spec.n_speakers = 2;
  spec.utterances_per_speaker = 4;
  const Manifest data = generate_synthetic_dataset(spec);
  DisentanglerConfig cfg = toy_disentangler_config();
  cfg.optimizer.batch_size = 4;
  Disentangler model(cfg, 4);
  DisentanglerTrainer trainer(model);
  std::vector<double> totals;
  train_stage_one(trainer, data, 60, 9, [&](long long, const StageOneLosses& l) {
    CHECK(std::isfinite(l.generator_total));
    totals.push_back(l.generator_total);
  });
  REQUIRE(totals.size() == 60);
  CHECK(trainer.global_step() == 60);
  double head = 0;
  double tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += totals[i];
    tail += totals[50 + i];
  }
  CHECK(tail < 0.7 * head);
  for (const auto& [name, p] : model.generator_parameters().entries()) CHECK(p.value().allFinite());
}

#include "doctest.h"

#include <cmath>
#include <functional>
#include <numbers>
#include <set>

#include "megalab/error.hpp"
#include "megalab/evaluation.hpp"
#include "megalab/synthetic.hpp"
#include "test_util.hpp"

using namespace megalab;

namespace {

// Minimum over every monotone warping path, enumerated recursively.
double brute_force_dtw(const std::vector<double>& a, const std::vector<double>& b, std::size_t i = 0,
                       std::size_t j = 0) {
  const double cost = std::abs(a[i] - b[j]);
  if (i + 1 == a.size() && j + 1 == b.size()) return cost;
  double best = std::numeric_limits<double>::infinity();
  if (i + 1 < a.size()) best = std::min(best, brute_force_dtw(a, b, i + 1, j));
  if (j + 1 < b.size()) best = std::min(best, brute_force_dtw(a, b, i, j + 1));
  if (i + 1 < a.size() && j + 1 < b.size()) best = std::min(best, brute_force_dtw(a, b, i + 1, j + 1));
  return cost + best;
}

std::vector<double> random_sequence(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = std::round(uniform01(rng) * 10.0);
  return v;
}

double dtw(std::vector<double> a, std::vector<double> b) {
  return dtw_distance(std::span<const double>(a), std::span<const double>(b));
}

Waveform tone(double hz, double seconds, double amplitude = 0.5) {
  Waveform w;
  const auto n = static_cast<std::size_t>(seconds * w.sample_rate);
  for (std::size_t i = 0; i < n; ++i) {
    w.samples.push_back(static_cast<float>(amplitude * std::sin(2.0 * std::numbers::pi * hz * i / w.sample_rate)));
  }
  return w;
}

Manifest small_corpus(int speakers, int per_speaker) {
  SyntheticFactorSpec spec;
  spec.n_speakers = speakers;
  spec.utterances_per_speaker = per_speaker;
  return generate_synthetic_dataset(spec);
}

}  // namespace

TEST_CASE("pitch tracker recovers a 220 Hz tone") {
  const auto contour = pitch_contour(tone(220.0, 1.0));
  contour.validate();
  CHECK(contour.frames() == 1 + 16000 / 256);
  int voiced = 0;
  for (std::size_t f = 0; f < contour.frames(); ++f) {
    if (!contour.voiced[f]) continue;
    ++voiced;
    CHECK(std::abs(contour.values[f] - 220.0) <= 2.0);
  }
  CHECK(voiced >= static_cast<int>(contour.frames()) - 4);
}

TEST_CASE("pitch tracker across the search range") {
  for (double hz : {80.0, 150.0, 310.0, 450.0}) {
    const auto contour = pitch_contour(tone(hz, 0.5));
    const auto v = contour.voiced_values();
    REQUIRE(v.size() > 20);
    for (double x : v) CHECK(std::abs(x - hz) <= 0.01 * hz);
  }
}

TEST_CASE("silence and noise-free zero input are unvoiced") {
  Waveform w;
  w.samples.assign(8000, 0.0f);
  const auto contour = pitch_contour(w);
  contour.validate();
  for (std::size_t f = 0; f < contour.frames(); ++f) {
    CHECK_FALSE(contour.voiced[f]);
    CHECK(contour.values[f] == 0.0);
  }
  CHECK_THROWS_AS((void)dtw_distance(contour, contour), EmptyVoicedError);
  CHECK_THROWS_AS((void)pitch_contour(Waveform{}), ValidationError);
}

TEST_CASE("synthetic factors pass through exactly") {
  const Manifest m = small_corpus(1, 2);
  for (const auto& utt : m.records) {
    const auto contour = pitch_contour(*utt.factors);
    CHECK(contour.values == utt.factors->pitch_hz);
    CHECK(contour.frames() == static_cast<std::size_t>(utt.mel.frames()));
    for (bool v : contour.voiced) CHECK(v);
  }
}

TEST_CASE("mel bump tracker follows the rendered pitch") {
  SyntheticFactorSpec spec;
  spec.n_speakers = 1;
  spec.utterances_per_speaker = 2;
  spec.noise = 0.0;
  spec.timbre_leak = 0.0;
  const Manifest m = generate_synthetic_dataset(spec);
  for (const auto& utt : m.records) {
    const auto est = pitch_contour(utt.mel, spec.low_bins);
    const auto truth = pitch_contour(*utt.factors);
    for (std::size_t f = 0; f < est.frames(); ++f) CHECK(std::abs(est.values[f] - truth.values[f]) < 0.1 * truth.values[f]);
  }
}

TEST_CASE("DTW hand tables") {
  CHECK(dtw({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(dtw({1, 2, 3}, {1, 2, 2, 3}) == 0.0);
  CHECK(dtw({0, 0}, {1, 1}) == 2.0);
  CHECK(dtw({0, 1, 2}, {0, 2}) == 1.0);
  CHECK(dtw({5}, {1, 2}) == 7.0);
  CHECK_THROWS_AS((void)dtw({}, {1.0}), EmptyVoicedError);
}

TEST_CASE("DTW equals the minimum over all warping paths") {
  Rng rng = make_rng(3, "dtw");
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_sequence(rng, 1 + uniform_index(rng, 6));
    const auto b = random_sequence(rng, 1 + uniform_index(rng, 6));
    const double d = dtw(a, b);
    CHECK(d == doctest::Approx(brute_force_dtw(a, b)).epsilon(1e-12));
    CHECK(d == dtw(b, a));
    CHECK(d >= 0.0);
    CHECK(dtw(a, a) == 0.0);
  }
}

TEST_CASE("contour DTW uses voiced frames only") {
  PitchContour a{{100, 0, 120, 130}, {true, false, true, true}};
  PitchContour b{{0, 100, 125, 0, 130}, {false, true, true, false, true}};
  CHECK(dtw_distance(a, b) == dtw({100, 120, 130}, {100, 125, 130}));
  PitchContour bad{{100, 5}, {true, false}};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  PitchContour negative{{-1}, {true}};
  CHECK_THROWS_AS(negative.validate(), ValidationError);
}

TEST_CASE("cosine similarity kernel") {
  Eigen::RowVectorXd a(2), b(2);
  a << 1, 0;
  b << 0, 1;
  CHECK(cosine_similarity(a, b) == doctest::Approx(0.0));
  CHECK(cosine_similarity(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine_similarity(a, -a) == doctest::Approx(-1.0));
  CHECK_THROWS_AS((void)cosine_similarity(a, Eigen::RowVectorXd::Zero(2)), ValidationError);
  CHECK_THROWS_AS((void)cosine_similarity(a, Eigen::RowVectorXd::Ones(3)), ValidationError);
  Rng rng = make_rng(4, "cos");
  for (int t = 0; t < 50; ++t) {
    Eigen::RowVectorXd x(5), y(5);
    for (int i = 0; i < 5; ++i) {
      x(i) = normal01(rng);
      y(i) = normal01(rng);
    }
    const double c = cosine_similarity(x, y);
    CHECK(c == cosine_similarity(y, x));
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
    CHECK(cosine_similarity(x, 3.0 * x) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("speaker similarity: self pair, symmetry, waveform path") {
  const Manifest m = small_corpus(3, 2);
  const LtasEmbedder raw;
  const LtasEmbedder lda = LtasEmbedder::fit(m);
  Disentangler model(toy_disentangler_config(), 5);
  const TimbreEmbedder timbre(model);
  for (const SpeakerEmbedder* e : {static_cast<const SpeakerEmbedder*>(&raw), static_cast<const SpeakerEmbedder*>(&lda),
                                   static_cast<const SpeakerEmbedder*>(&timbre)}) {
    const auto& x = m.records[0].mel;
    const auto& y = m.records[3].mel;
    CHECK(std::abs(speaker_similarity(x, x, *e) - 1.0) < 1e-6);
    CHECK(speaker_similarity(x, y, *e) == doctest::Approx(speaker_similarity(y, x, *e)).epsilon(1e-12));
  }
  const Waveform w = tone(200.0, 0.3);
  CHECK(std::abs(speaker_similarity(w, w, raw) - 1.0) < 1e-6);
  MelSpectrogram flat;
  flat.values = Eigen::MatrixXd::Constant(10, kDefaultMelBins, 2.0);
  CHECK_THROWS_AS((void)speaker_similarity(flat, m.records[0].mel, raw), ValidationError);
}

TEST_CASE("LDA spectral embedder separates synthetic speakers") {
  const Manifest m = small_corpus(4, 8);
  const LtasEmbedder lda = LtasEmbedder::fit(m);
  int wins = 0;
  int trials = 0;
  for (std::size_t a = 0; a < m.records.size(); ++a) {
    for (std::size_t s = 0; s < m.records.size(); ++s) {
      if (s == a || m.records[s].speaker_id != m.records[a].speaker_id) continue;
      for (std::size_t d = 0; d < m.records.size(); d += 3) {
        if (m.records[d].speaker_id == m.records[a].speaker_id) continue;
        ++trials;
        wins += speaker_similarity(m.records[a].mel, m.records[s].mel, lda) >
                speaker_similarity(m.records[a].mel, m.records[d].mel, lda);
      }
    }
  }
  CHECK(static_cast<double>(wins) / trials >= 0.95);
}

TEST_CASE("trained timbre encoder ranks same-speaker pairs above cross-speaker pairs") {
  const Manifest m = small_corpus(4, 8);
  DisentanglerConfig cfg = toy_disentangler_config();
  Disentangler model(cfg, 9);
  DisentanglerTrainer trainer(model);
  train_stage_one(trainer, m, 300, 9);
  const TimbreEmbedder embedder(model);
  Rng rng = make_rng(9, "pairs");
  int wins = 0;
  const int trials = 400;
  const auto groups = m.speaker_groups();
  std::vector<std::vector<std::size_t>> by_speaker;
  for (const auto& [id, idx] : groups) by_speaker.push_back(idx);
  for (int t = 0; t < trials; ++t) {
    const std::size_t s = uniform_index(rng, by_speaker.size());
    const std::size_t o = (s + 1 + uniform_index(rng, by_speaker.size() - 1)) % by_speaker.size();
    const auto& same = by_speaker[s];
    const std::size_t a = same[uniform_index(rng, same.size())];
    std::size_t b = same[uniform_index(rng, same.size())];
    while (b == a) b = same[uniform_index(rng, same.size())];
    const std::size_t c = by_speaker[o][uniform_index(rng, by_speaker[o].size())];
    wins += speaker_similarity(m.records[a].mel, m.records[b].mel, embedder) >
            speaker_similarity(m.records[a].mel, m.records[c].mel, embedder);
  }
  CHECK(static_cast<double>(wins) / trials >= 0.95);
}

TEST_CASE("robustness audit") {
  const std::vector<int> durations{3, 2, 4, 1};
  CHECK(alignment_emissions(durations) == std::vector<int>{0, 1, 2, 3});
  CHECK(robustness_check(4, alignment_emissions(durations)).clean());

  const std::vector<int> dropped{3, 0, 4, 1};
  const auto skip = robustness_check(4, alignment_emissions(dropped));
  CHECK(skip.repeats == 0);
  CHECK(skip.skips == 1);

  const std::vector<int> duplicated{0, 1, 1, 2, 3};
  const auto rep = robustness_check(4, duplicated);
  CHECK(rep.repeats == 1);
  CHECK(rep.skips == 0);

  const std::vector<int> codes{0, 1, 2, 0};
  CHECK(robustness_check(4, codes, durations, 10).clean());
  CHECK_THROWS_AS((void)robustness_check(4, codes, durations, 11), ValidationError);
  CHECK_THROWS_AS((void)robustness_check(5, codes, durations, 10), ValidationError);
  CHECK_THROWS_AS((void)robustness_check(3, std::vector<int>{3}), ValidationError);
}

TEST_CASE("linear probe on separable and on label-free features") {
  Rng rng = make_rng(11, "probe");
  const int n = 120;
  Eigen::MatrixXd x(n, 3);
  Eigen::MatrixXd noise(n, 3);
  std::vector<int> y;
  for (int i = 0; i < n; ++i) {
    const int c = i % 4;
    y.push_back(c);
    for (int j = 0; j < 3; ++j) {
      x(i, j) = 0.3 * normal01(rng) + (j == c % 3 ? 3.0 : 0.0) + (c == 3 ? 2.0 : 0.0);
      noise(i, j) = normal01(rng);
    }
  }
  const auto sep = linear_probe(x, y);
  CHECK(sep.accuracy >= 0.95);
  CHECK(sep.classes == 4);
  CHECK(sep.chance == doctest::Approx(0.25));
  const auto blind = linear_probe(noise, y);
  CHECK(std::abs(blind.accuracy - 0.25) < 0.15);
  const auto again = linear_probe(noise, y);
  CHECK(again.accuracy == blind.accuracy);
  CHECK_THROWS_AS((void)linear_probe(x, std::vector<int>{0, 1}), ValidationError);
}

TEST_CASE("probe features have one row per utterance") {
  const Manifest m = small_corpus(2, 3);
  Disentangler model(toy_disentangler_config(), 2);
  const auto f = probe_features(model, m);
  CHECK(f.timbre.rows() == 6);
  CHECK(f.prosody.rows() == 6);
  CHECK(f.prosody.cols() == model.config().prosody.code_dim);
  CHECK(f.speakers == std::vector<int>{0, 0, 0, 1, 1, 1});
}

TEST_CASE("metric report JSON round trip and ranges") {
  MetricReport r{12.5, 0.93, 0, 0, 0, 50};
  const auto back = metric_report_from_json(to_json(r));
  CHECK(back.pitch_dtw == r.pitch_dtw);
  CHECK(back.speaker_cos == r.speaker_cos);
  CHECK(back.sentences == 50);
  MetricReport bad = r;
  bad.speaker_cos = 1.5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = r;
  bad.pitch_dtw = -1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = r;
  bad.error_sentences = 51;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  CHECK_THROWS_AS((void)metric_report_from_json(nlohmann::json{{"pitch_dtw", 1.0}}), ValidationError);
}

TEST_CASE("shuffled timbre sources form a derangement") {
  for (std::size_t n : {2u, 3u, 10u, 32u}) {
    const auto p = shuffled_timbre_sources(n, 7);
    std::set<std::size_t> seen(p.begin(), p.end());
    CHECK(seen.size() == n);
    for (std::size_t i = 0; i < n; ++i) CHECK(p[i] != i);
    CHECK(p == shuffled_timbre_sources(n, 7));
  }
}

TEST_CASE("sweep rows are deterministic and flag a one-entry codebook") {
  SweepSettings s;
  s.base = toy_disentangler_config();
  s.base.optimizer.batch_size = 2;
  s.data.n_speakers = 3;
  s.data.utterances_per_speaker = 2;
  s.steps = 6;
  s.seed = 3;
  const std::vector<SweepConfig> configs{{"one", 1, 1}, {"mid", 4, 8}};
  const auto a = disentanglement_sweep(configs, s);
  const auto b = disentanglement_sweep(configs, s);
  REQUIRE(a.size() == 2);
  CHECK(sweep_table_csv(a) == sweep_table_csv(b));
  CHECK(a[0].collapsed);
  CHECK(a[0].codes_used == 1);
  CHECK_FALSE(a[0].diverged);
  for (const auto& r : a) {
    CHECK(r.pitch_dtw >= 0.0);
    CHECK(std::abs(r.speaker_cos) <= 1.0);
  }
  const auto csv = sweep_table_csv(a);
  CHECK(csv.rfind("label,code_dim,codebook_size,seed,pitch_dtw,speaker_cos", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("LDA embedder needs three speakers") {
  CHECK_THROWS_AS((void)LtasEmbedder::fit(small_corpus(2, 3)), ValidationError);
}

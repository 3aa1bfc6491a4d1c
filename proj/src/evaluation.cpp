#include "megalab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "megalab/error.hpp"
#include "megalab/rng.hpp"

namespace megalab {

std::vector<double> PitchContour::voiced_values() const {
  std::vector<double> out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (voiced[i]) out.push_back(values[i]);
  }
  return out;
}

void PitchContour::validate() const {
  if (values.size() != voiced.size()) {
    throw ValidationError("pitch contour: " + std::to_string(values.size()) + " values but " +
                          std::to_string(voiced.size()) + " voicing flags");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i]) || values[i] < 0.0 || (!voiced[i] && values[i] != 0.0)) {
      throw ValidationError("pitch contour: invalid value at frame " + std::to_string(i));
    }
  }
}

PitchContour pitch_contour(const Waveform& wave, const PitchTrackerConfig& config) {
  if (wave.samples.empty()) throw ValidationError("pitch_contour: empty waveform");
  const int n = static_cast<int>(wave.samples.size());
  const int frames = 1 + n / config.hop;
  const int half = config.frame_length / 2;
  const int min_lag = std::max(2, static_cast<int>(std::floor(config.sample_rate / config.max_hz)));
  const int max_lag = std::min(config.frame_length - 2, static_cast<int>(std::ceil(config.sample_rate / config.min_hz)));

  PitchContour out;
  out.values.assign(static_cast<std::size_t>(frames), 0.0);
  out.voiced.assign(static_cast<std::size_t>(frames), false);
  Eigen::VectorXd x(config.frame_length);
  Eigen::VectorXd r(max_lag + 2);
  for (int f = 0; f < frames; ++f) {
    for (int i = 0; i < config.frame_length; ++i) {
      const int s = f * config.hop - half + i;
      x(i) = (s >= 0 && s < n) ? wave.samples[static_cast<std::size_t>(s)] : 0.0;
    }
    x.array() -= x.mean();
    const double energy = x.squaredNorm();
    if (std::sqrt(energy / config.frame_length) < config.silence_rms) continue;
    for (int lag = 0; lag <= max_lag + 1; ++lag) {
      r(lag) = x.head(config.frame_length - lag).dot(x.tail(config.frame_length - lag)) / energy;
    }
    int best = -1;
    for (int lag = min_lag; lag <= max_lag; ++lag) {
      if (r(lag) >= r(lag - 1) && r(lag) >= r(lag + 1) && (best < 0 || r(lag) > r(best))) best = lag;
    }
    if (best < 0 || r(best) < config.voicing_threshold) continue;
    const double a = r(best - 1);
    const double b = r(best);
    const double c = r(best + 1);
    const double denom = a - 2.0 * b + c;
    const double shift = denom < 0.0 ? 0.5 * (a - c) / denom : 0.0;
    out.values[static_cast<std::size_t>(f)] = config.sample_rate / (best + shift);
    out.voiced[static_cast<std::size_t>(f)] = true;
  }
  return out;
}

PitchContour pitch_contour(const SyntheticFactors& factors) {
  if (factors.pitch_hz.empty()) throw ValidationError("pitch_contour: empty factor trajectory");
  PitchContour out;
  out.values = factors.pitch_hz;
  for (double v : out.values) out.voiced.push_back(v > 0.0);
  return out;
}

PitchContour pitch_contour(const MelSpectrogram& mel, int low_bins) {
  validate(mel);
  PitchContour out;
  out.values = estimate_synthetic_pitch(mel, low_bins);
  out.voiced.assign(out.values.size(), true);
  return out;
}

double dtw_distance(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw EmptyVoicedError("dtw_distance: empty sequence");
  const auto n = static_cast<Eigen::Index>(a.size());
  const auto m = static_cast<Eigen::Index>(b.size());
  Eigen::MatrixXd d = Eigen::MatrixXd::Constant(n + 1, m + 1, std::numeric_limits<double>::infinity());
  d(0, 0) = 0.0;
  for (Eigen::Index i = 1; i <= n; ++i) {
    for (Eigen::Index j = 1; j <= m; ++j) {
      const double cost = std::abs(a[static_cast<std::size_t>(i - 1)] - b[static_cast<std::size_t>(j - 1)]);
      d(i, j) = cost + std::min({d(i - 1, j), d(i, j - 1), d(i - 1, j - 1)});
    }
  }
  return d(n, m);
}

double dtw_distance(const PitchContour& a, const PitchContour& b) {
  a.validate();
  b.validate();
  const auto va = a.voiced_values();
  const auto vb = b.voiced_values();
  if (va.empty() || vb.empty()) {
    throw EmptyVoicedError(std::string("dtw_distance: no voiced frames in the ") + (va.empty() ? "first" : "second") +
                           " contour");
  }
  return dtw_distance(std::span<const double>(va), std::span<const double>(vb));
}

double cosine_similarity(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  if (a.size() != b.size() || a.size() == 0) {
    throw ValidationError("cosine_similarity: dimensions " + std::to_string(a.size()) + " and " +
                          std::to_string(b.size()));
  }
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0) || !std::isfinite(na) || !std::isfinite(nb)) {
    throw ValidationError("cosine_similarity: zero-norm or non-finite embedding");
  }
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

Eigen::RowVectorXd TimbreEmbedder::embed(const MelSpectrogram& mel) const {
  ad::NoGradGuard guard;
  return model_.timbre_encode(mel).value();
}

namespace {

Eigen::RowVectorXd ltas(const MelSpectrogram& mel) {
  validate(mel);
  Eigen::RowVectorXd v = mel.values.colwise().mean();
  v.array() -= v.mean();
  return v;
}

}  // namespace

LtasEmbedder LtasEmbedder::fit(const Manifest& corpus, double ridge) {
  std::map<std::string, std::vector<Eigen::RowVectorXd>> groups;
  std::vector<Eigen::RowVectorXd> all;
  for (const auto& utt : corpus.records) {
    all.push_back(ltas(utt.mel));
    groups[utt.speaker_id].push_back(all.back());
  }
  // One discriminant direction would reduce cosine to a sign test.
  if (groups.size() < 3) throw ValidationError("LtasEmbedder::fit: needs at least three speakers");
  const auto dim = all.front().size();
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(dim);
  for (const auto& v : all) {
    if (v.size() != dim) throw ValidationError("LtasEmbedder::fit: mixed mel widths");
    mean += v;
  }
  mean /= static_cast<double>(all.size());
  Eigen::MatrixXd within = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::MatrixXd between = Eigen::MatrixXd::Zero(dim, dim);
  for (const auto& [speaker, vs] : groups) {
    Eigen::RowVectorXd centre = Eigen::RowVectorXd::Zero(dim);
    for (const auto& v : vs) centre += v;
    centre /= static_cast<double>(vs.size());
    between += static_cast<double>(vs.size()) * (centre - mean).transpose() * (centre - mean);
    for (const auto& v : vs) within += (v - centre).transpose() * (v - centre);
  }
  within += ridge * std::max(within.trace() / static_cast<double>(dim), 1e-12) * Eigen::MatrixXd::Identity(dim, dim);
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> solver(between, within);
  const auto keep = static_cast<Eigen::Index>(groups.size() - 1);
  LtasEmbedder out;
  out.mean_ = mean;
  out.projection_ = solver.eigenvectors().rightCols(std::min(keep, dim));
  return out;
}

Eigen::RowVectorXd LtasEmbedder::embed(const MelSpectrogram& mel) const {
  Eigen::RowVectorXd v = ltas(mel);
  if (!fitted()) return v;
  if (v.size() != mean_.size()) {
    throw CompatibilityError("LtasEmbedder: fitted on " + std::to_string(mean_.size()) + " bins, got " +
                             std::to_string(v.size()));
  }
  return (v - mean_) * projection_;
}

double speaker_similarity(const MelSpectrogram& a, const MelSpectrogram& b, const SpeakerEmbedder& embedder) {
  return cosine_similarity(embedder.embed(a), embedder.embed(b));
}

double speaker_similarity(const Waveform& a, const Waveform& b, const SpeakerEmbedder& embedder,
                          const AudioConfig& audio) {
  return speaker_similarity(log_mel(a.samples, audio), log_mel(b.samples, audio), embedder);
}

std::vector<int> alignment_emissions(std::span<const int> durations) {
  std::vector<int> out;
  for (std::size_t i = 0; i < durations.size(); ++i) {
    if (durations[i] < 0) throw ValidationError("alignment_emissions: negative duration at " + std::to_string(i));
    if (durations[i] > 0) out.push_back(static_cast<int>(i));
  }
  return out;
}

RobustnessCounts robustness_check(int phoneme_count, std::span<const int> emissions) {
  std::vector<int> seen(static_cast<std::size_t>(std::max(phoneme_count, 0)), 0);
  for (int e : emissions) {
    if (e < 0 || e >= phoneme_count) {
      throw ValidationError("robustness_check: emission " + std::to_string(e) + " outside " +
                            std::to_string(phoneme_count) + " phonemes");
    }
    ++seen[static_cast<std::size_t>(e)];
  }
  RobustnessCounts counts;
  for (int s : seen) {
    counts.repeats += s > 1 ? 1 : 0;
    counts.skips += s == 0 ? 1 : 0;
  }
  return counts;
}

RobustnessCounts robustness_check(int phoneme_count, std::span<const int> codes, std::span<const int> durations,
                                  int frames) {
  const auto n = static_cast<std::size_t>(phoneme_count);
  if (codes.size() != n || durations.size() != n) {
    throw ValidationError("robustness_check: " + std::to_string(codes.size()) + " codes and " +
                          std::to_string(durations.size()) + " durations for " + std::to_string(phoneme_count) +
                          " phonemes");
  }
  long long total = 0;
  for (int d : durations) total += d;
  if (total != frames) {
    throw ValidationError("robustness_check: durations sum to " + std::to_string(total) + " but the mel has " +
                          std::to_string(frames) + " frames");
  }
  const auto emissions = alignment_emissions(durations);
  return robustness_check(phoneme_count, emissions);
}

std::vector<std::vector<int>> stress_sentences(int count, int vocab_size, std::uint64_t seed, int min_length,
                                              int max_length) {
  if (count < 0 || vocab_size < 1 || min_length < 1 || max_length < min_length) {
    throw ValidationError("stress_sentences: invalid arguments");
  }
  std::vector<std::vector<int>> out;
  for (int s = 0; s < count; ++s) {
    Rng rng = make_rng(seed, "stress", static_cast<std::uint64_t>(s));
    const auto length = static_cast<std::size_t>(
        min_length + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(max_length - min_length + 1))));
    const auto pick = [&] { return static_cast<int>(uniform_index(rng, static_cast<std::size_t>(vocab_size))); };
    std::vector<int> sentence;
    while (sentence.size() < length) {
      switch (uniform_index(rng, 3)) {
        case 0: {  // motif repeated several times
          std::vector<int> motif(2 + uniform_index(rng, 3));
          for (auto& p : motif) p = pick();
          for (std::size_t r = 0, reps = 2 + uniform_index(rng, 4); r < reps; ++r) {
            sentence.insert(sentence.end(), motif.begin(), motif.end());
          }
          break;
        }
        case 1: {  // run of one phoneme
          sentence.insert(sentence.end(), 3 + uniform_index(rng, 6), pick());
          break;
        }
        default: {  // alternation of two phonemes
          const int a = pick();
          const int b = pick();
          for (std::size_t r = 0, reps = 3 + uniform_index(rng, 5); r < reps; ++r) {
            sentence.push_back(a);
            sentence.push_back(b);
          }
        }
      }
    }
    sentence.resize(length);
    out.push_back(std::move(sentence));
  }
  return out;
}

namespace {

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& z) {
  Eigen::MatrixXd p = (z.colwise() - z.rowwise().maxCoeff()).array().exp().matrix();
  return p.array().colwise() / p.rowwise().sum().array();
}

}  // namespace

ProbeResult linear_probe(const Eigen::MatrixXd& features, const std::vector<int>& labels, const ProbeConfig& config) {
  const auto n = features.rows();
  if (n == 0 || static_cast<std::size_t>(n) != labels.size()) {
    throw ValidationError("linear_probe: " + std::to_string(n) + " feature rows for " +
                          std::to_string(labels.size()) + " labels");
  }
  if (config.folds < 2) throw ValidationError("linear_probe: need at least two folds");
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  if (*std::min_element(labels.begin(), labels.end()) < 0) throw ValidationError("linear_probe: negative label");

  std::vector<int> fold(static_cast<std::size_t>(n));
  std::vector<int> counts(static_cast<std::size_t>(classes), 0);
  Rng rng = make_rng(config.seed, "probe-folds");
  for (int c = 0; c < classes; ++c) {
    std::vector<int> members;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (labels[static_cast<std::size_t>(i)] == c) members.push_back(static_cast<int>(i));
    }
    counts[static_cast<std::size_t>(c)] = static_cast<int>(members.size());
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[uniform_index(rng, i)]);
    for (std::size_t i = 0; i < members.size(); ++i) {
      fold[static_cast<std::size_t>(members[i])] = static_cast<int>(i % static_cast<std::size_t>(config.folds));
    }
  }

  int correct = 0;
  for (int k = 0; k < config.folds; ++k) {
    std::vector<Eigen::Index> train;
    std::vector<Eigen::Index> test;
    for (Eigen::Index i = 0; i < n; ++i) (fold[static_cast<std::size_t>(i)] == k ? test : train).push_back(i);
    if (test.empty() || train.empty()) continue;
    const Eigen::MatrixXd xtr = features(train, Eigen::all);
    const Eigen::RowVectorXd mu = xtr.colwise().mean();
    Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().mean()).sqrt().matrix();
    sd = sd.unaryExpr([](double v) { return v > 1e-12 ? v : 1.0; });
    const Eigen::MatrixXd x = (xtr.rowwise() - mu).array().rowwise() / sd.array();
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(x.rows(), classes);
    for (std::size_t i = 0; i < train.size(); ++i) y(static_cast<Eigen::Index>(i), labels[static_cast<std::size_t>(train[i])]) = 1.0;

    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(x.cols(), classes);
    Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(classes);
    const double m = static_cast<double>(x.rows());
    for (int it = 0; it < config.iterations; ++it) {
      const Eigen::MatrixXd g = (softmax_rows((x * w).rowwise() + b) - y) / m;
      w -= config.learning_rate * (x.transpose() * g + config.l2 * w);
      b -= config.learning_rate * g.colwise().sum();
    }
    const Eigen::MatrixXd xte =
        (features(test, Eigen::all).rowwise() - mu).array().rowwise() / sd.array();
    const Eigen::MatrixXd scores = (xte * w).rowwise() + b;
    for (std::size_t i = 0; i < test.size(); ++i) {
      Eigen::Index arg = 0;
      scores.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
      correct += static_cast<int>(arg) == labels[static_cast<std::size_t>(test[i])] ? 1 : 0;
    }
  }
  ProbeResult out;
  out.samples = static_cast<int>(n);
  out.classes = classes;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  out.chance = static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(n);
  return out;
}

ProbeFeatures probe_features(const Disentangler& model, const Manifest& corpus) {
  if (corpus.records.empty()) throw ValidationError("probe_features: empty corpus");
  ad::NoGradGuard guard;
  ProbeFeatures out;
  out.timbre.resize(static_cast<Eigen::Index>(corpus.records.size()), model.config().timbre.hidden);
  out.prosody.resize(static_cast<Eigen::Index>(corpus.records.size()), model.config().prosody.code_dim);
  std::map<std::string, int> speakers;
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const auto& utt = corpus.records[i];
    validate(utt);
    const auto r = static_cast<Eigen::Index>(i);
    out.timbre.row(r) = model.timbre_encode(utt.mel).value();
    const auto enc = model.prosody_encode(slice_low_band(utt.mel, model.config().low_bins), utt.durations);
    out.prosody.row(r) = enc.quantized.value().colwise().mean();
    out.speakers.push_back(speakers.emplace(utt.speaker_id, static_cast<int>(speakers.size())).first->second);
  }
  return out;
}

void MetricReport::validate() const {
  if (!std::isfinite(pitch_dtw) || pitch_dtw < 0.0) throw ValidationError("metric report: pitch_dtw must be >= 0");
  if (!std::isfinite(speaker_cos) || speaker_cos < -1.0 || speaker_cos > 1.0) {
    throw ValidationError("metric report: speaker_cos must lie in [-1, 1]");
  }
  if (repeats < 0 || skips < 0 || error_sentences < 0 || sentences < 0 || error_sentences > sentences) {
    throw ValidationError("metric report: invalid counts");
  }
}

nlohmann::json to_json(const MetricReport& report) {
  report.validate();
  return {{"pitch_dtw", report.pitch_dtw},     {"speaker_cos", report.speaker_cos},
          {"repeats", report.repeats},         {"skips", report.skips},
          {"error_sentences", report.error_sentences}, {"sentences", report.sentences}};
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
  MetricReport r;
  try {
    r.pitch_dtw = j.at("pitch_dtw").get<double>();
    r.speaker_cos = j.at("speaker_cos").get<double>();
    r.repeats = j.at("repeats").get<int>();
    r.skips = j.at("skips").get<int>();
    r.error_sentences = j.at("error_sentences").get<int>();
    r.sentences = j.value("sentences", 0);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("metric report: ") + e.what());
  }
  r.validate();
  return r;
}

std::vector<std::size_t> shuffled_timbre_sources(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng = make_rng(seed, "shuffle-timbre");
  // Sattolo's algorithm: a single n-cycle, so no utterance keeps its own timbre.
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i - 1)]);
  return perm;
}

ShuffledTimbreScores score_shuffled_timbre(const Disentangler& model, const Manifest& corpus,
                                           const SpeakerEmbedder& embedder, std::uint64_t seed) {
  if (corpus.records.size() < 2) throw ValidationError("score_shuffled_timbre: needs at least two utterances");
  ad::NoGradGuard guard;
  const auto sources = shuffled_timbre_sources(corpus.records.size(), seed);
  const auto n = static_cast<double>(corpus.records.size());
  ShuffledTimbreScores out;
  std::set<int> used;
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const auto& utt = corpus.records[i];
    const auto& source = corpus.records[sources[i]];
    const Reconstruction r = model.reconstruct(utt, source.mel);
    MelSpectrogram mel;
    mel.values = r.mel.value();
    const PitchContour truth =
        utt.factors ? pitch_contour(*utt.factors) : pitch_contour(utt.mel, model.config().low_bins);
    out.pitch_dtw += dtw_distance(pitch_contour(mel, model.config().low_bins), truth) / n;
    out.speaker_cos += speaker_similarity(mel, source.mel, embedder) / n;
    used.insert(r.prosody.codes.begin(), r.prosody.codes.end());
  }
  out.codes_used = static_cast<int>(used.size());
  return out;
}

SyntheticFactorSpec held_out_spec(const SyntheticFactorSpec& training) {
  SyntheticFactorSpec spec = training;
  spec.content_seed = training.content_seed + 0x9e3779b9ULL;
  spec.prosody_seed = training.prosody_seed + 0x9e3779b9ULL;
  return spec;
}

std::vector<SweepRow> disentanglement_sweep(const std::vector<SweepConfig>& configs, const SweepSettings& settings) {
  const Manifest corpus = generate_synthetic_dataset(settings.data);
  const Manifest held_out = generate_synthetic_dataset(held_out_spec(settings.data));
  const LtasEmbedder embedder = LtasEmbedder::fit(corpus);
  std::vector<SweepRow> rows;
  for (const auto& sc : configs) {
    SweepRow row;
    row.label = sc.label;
    row.code_dim = sc.code_dim;
    row.codebook_size = sc.codebook_size;
    row.seed = settings.seed;
    DisentanglerConfig cfg = settings.base;
    cfg.prosody.code_dim = sc.code_dim;
    cfg.prosody.codebook_size = sc.codebook_size;
    cfg.mel_bins = settings.data.mel_bins;
    cfg.low_bins = settings.data.low_bins;
    validate(cfg);
    Disentangler model(cfg, settings.seed);
    DisentanglerTrainer trainer(model);
    const long long tail = std::max<long long>(1, settings.steps / 10);
    double tail_sum = 0.0;
    long long tail_count = 0;
    try {
      train_stage_one(trainer, corpus, settings.steps, settings.seed, [&](long long step, const StageOneLosses& l) {
        if (step > settings.steps - tail) {
          tail_sum += l.reconstruction;
          ++tail_count;
        }
      });
      row.final_loss = tail_count > 0 ? tail_sum / static_cast<double>(tail_count) : 0.0;
      if (!std::isfinite(row.final_loss)) throw NumericError("non-finite reconstruction loss");
      const auto scores = score_shuffled_timbre(model, held_out, embedder, settings.seed);
      row.pitch_dtw = scores.pitch_dtw;
      row.speaker_cos = scores.speaker_cos;
      row.codes_used = scores.codes_used;
      row.collapsed = scores.codes_used <= 1;
    } catch (const NumericError& e) {
      spdlog::warn("sweep config {} diverged: {}", sc.label, e.what());
      row.diverged = true;
      row.final_loss = row.pitch_dtw = row.speaker_cos = std::numeric_limits<double>::quiet_NaN();
    }
    spdlog::info("sweep {} ({}x{}, seed {}): pitch_dtw {:.3f} speaker_cos {:.4f} codes {}", sc.label, sc.code_dim,
                 sc.codebook_size, settings.seed, row.pitch_dtw, row.speaker_cos, row.codes_used);
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_table_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "label,code_dim,codebook_size,seed,pitch_dtw,speaker_cos,final_loss,codes_used,diverged,collapsed\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.label << ',' << r.code_dim << ',' << r.codebook_size << ',' << r.seed << ',' << r.pitch_dtw << ','
        << r.speaker_cos << ',' << r.final_loss << ',' << r.codes_used << ',' << (r.diverged ? 1 : 0) << ','
        << (r.collapsed ? 1 : 0) << '\n';
  }
  return out.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

}  // namespace megalab

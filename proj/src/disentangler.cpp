#include "megalab/disentangler.hpp"

#include <cmath>
#include <sstream>

#include "megalab/error.hpp"

namespace megalab {

namespace {

ad::Var mean_of(std::span<const ad::Var> terms) {
  ad::Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = ad::add(acc, terms[i]);
  return ad::scale(acc, 1.0 / static_cast<double>(terms.size()));
}

void require_finite(const StageOneLosses& l) {
  for (double v : {l.reconstruction, l.codebook, l.commit, l.duration, l.adversarial, l.generator_total,
                   l.discriminator}) {
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg << "stage-1 loss is not finite: rec=" << l.reconstruction << " codebook=" << l.codebook
          << " commit=" << l.commit << " duration=" << l.duration << " adv=" << l.adversarial
          << " disc=" << l.discriminator;
      throw NumericError(msg.str());
    }
  }
}

}  // namespace

Disentangler::Disentangler(DisentanglerConfig config, std::uint64_t seed) : config_(std::move(config)) {
  validate(config_);
  Rng rng = make_rng(seed, "disentangler-init");
  const auto& p = config_.prosody;
  const auto& c = config_.content;
  prosody_frame_stack_ = nn::ConvStack(generator_, "prosody.frame", config_.low_bins, p.hidden, p.frame_layers, p.kernel, rng);
  prosody_phoneme_stack_ = nn::ConvStack(generator_, "prosody.phoneme", p.hidden, p.hidden, p.phoneme_layers, p.kernel, rng);
  prosody_down_ = nn::Linear(generator_, "prosody.down", p.hidden, p.code_dim, rng);
  codebook_ = generator_.add("prosody.codebook", nn::init_normal(p.codebook_size, p.code_dim, 1.0, rng));

  phoneme_embedding_ = nn::Embedding(generator_, "content.embedding", c.vocab_size, c.hidden, rng);
  for (int i = 0; i < c.layers; ++i) {
    content_layers_.emplace_back(generator_, "content.layer" + std::to_string(i), c.hidden, c.heads, c.filter, c.kernel,
                                 false, rng);
  }
  content_norm_ = nn::LayerNorm(generator_, "content.norm", c.hidden);

  timbre_stack_ = nn::ConvStack(generator_, "timbre.stack", config_.mel_bins, config_.timbre.hidden,
                                config_.timbre.layers, config_.timbre.kernel, rng);

  const auto& d = config_.duration;
  duration_prosody_in_ = nn::Linear(generator_, "duration.prosody_in", p.code_dim, c.hidden, rng);
  duration_stack_ = nn::ConvStack(generator_, "duration.stack", c.hidden, d.hidden, d.layers, d.kernel, rng);
  duration_out_ = nn::Linear(generator_, "duration.out", d.layers > 0 ? d.hidden : c.hidden, 1, rng);

  const auto& m = config_.decoder;
  decoder_content_in_ = nn::Linear(generator_, "decoder.content_in", c.hidden, m.hidden, rng);
  decoder_prosody_in_ = nn::Linear(generator_, "decoder.prosody_in", p.code_dim, m.hidden, rng);
  decoder_timbre_in_ = nn::Linear(generator_, "decoder.timbre_in", config_.timbre.hidden, m.hidden, rng);
  decoder_stack_ = nn::ConvStack(generator_, "decoder.stack", m.hidden, m.hidden, m.layers, m.kernel, rng);
  decoder_out_ = nn::Linear(generator_, "decoder.out", m.hidden, config_.mel_bins, rng);

  const auto& disc = config_.discriminator;
  for (std::size_t w = 0; w < disc.windows.size(); ++w) {
    SubDiscriminator sub;
    const std::string name = "disc" + std::to_string(w);
    for (int l = 0; l < disc.conv_layers; ++l) {
      sub.convs.emplace_back(discriminator_, name + ".conv" + std::to_string(l), l == 0 ? 1 : disc.hidden, disc.hidden,
                             3, 2, rng);
    }
    sub.head = nn::Linear(discriminator_, name + ".head", disc.hidden, 1, rng);
    sub_discriminators_.push_back(std::move(sub));
  }
}

ProsodyEncoding Disentangler::prosody_encode(const MelSpectrogram& mel_low, std::span<const int> durations) const {
  if (mel_low.bins() != config_.low_bins) {
    throw ValidationError("prosody encoder takes the " + std::to_string(config_.low_bins) +
                          "-bin low band, got " + std::to_string(mel_low.bins()) + " bins");
  }
  long long total = 0;
  for (int d : durations) total += d;
  if (total != mel_low.frames()) {
    throw ValidationError("prosody encoder: durations sum to " + std::to_string(total) + " but mel has " +
                          std::to_string(mel_low.frames()) + " frames");
  }
  ad::Var frames = prosody_frame_stack_(ad::constant(mel_low.values));
  ad::Var pooled = ad::left_multiply(phoneme_pooling_matrix(durations), frames);
  ad::Var h = prosody_down_(prosody_phoneme_stack_(pooled));
  VectorQuantized vq = vector_quantize(h, codebook_);
  return {std::move(vq.codes), h, vq.quantized, vq.codebook_loss, vq.commit_loss};
}

ad::Var Disentangler::content_encode(std::span<const int> phonemes) const {
  if (phonemes.empty()) {
    throw ValidationError("content encoder: empty phoneme sequence");
  }
  for (int id : phonemes) {
    if (id < 0 || id >= config_.content.vocab_size) {
      throw ValidationError("content encoder: phoneme id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(config_.content.vocab_size));
    }
  }
  const int n = static_cast<int>(phonemes.size());
  ad::Var x = ad::add(phoneme_embedding_(phonemes), ad::constant(nn::sinusoid_positions(n, config_.content.hidden)));
  for (const auto& layer : content_layers_) x = layer(x);
  return content_norm_(x);
}

ad::Var Disentangler::timbre_frame_features(const MelSpectrogram& mel) const {
  if (mel.frames() < 1) {
    throw ValidationError("timbre encoder: reference mel has no frames");
  }
  if (mel.bins() != config_.mel_bins) {
    throw ValidationError("timbre encoder: expected " + std::to_string(config_.mel_bins) + " bins");
  }
  return timbre_stack_(ad::constant(mel.values));
}

ad::Var Disentangler::timbre_encode(const MelSpectrogram& mel_ref) const {
  return ad::mean_rows(timbre_frame_features(mel_ref));
}

ad::Var Disentangler::duration_log_predict(const ad::Var& content, const ad::Var& prosody) const {
  if (content.rows() != prosody.rows()) {
    throw ValidationError("duration predictor: " + std::to_string(content.rows()) + " content rows vs " +
                          std::to_string(prosody.rows()) + " prosody rows");
  }
  return duration_out_(duration_stack_(ad::add(content, duration_prosody_in_(prosody))));
}

std::vector<int> Disentangler::predict_durations(const ad::Var& content, const ad::Var& prosody, int min_frames) const {
  const ad::Var log_d = duration_log_predict(content, prosody);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(log_d.rows()));
  for (Eigen::Index i = 0; i < log_d.rows(); ++i) {
    const double frames = std::round(std::exp(std::min(log_d.value()(i, 0), 20.0)) - 1.0);
    out.push_back(std::max(min_frames, static_cast<int>(std::max(0.0, frames))));
  }
  return out;
}

ad::Var Disentangler::decode_mel(const ad::Var& prosody_frames, const ad::Var& timbre,
                                 const ad::Var& content_frames) const {
  if (prosody_frames.rows() != content_frames.rows()) {
    throw ValidationError("mel decoder: prosody has " + std::to_string(prosody_frames.rows()) +
                          " frames but content has " + std::to_string(content_frames.rows()));
  }
  if (prosody_frames.rows() == 0) {
    throw ValidationError("mel decoder: zero frames");
  }
  ad::Var x = ad::add(decoder_content_in_(content_frames), decoder_prosody_in_(prosody_frames));
  x = ad::add_row(x, decoder_timbre_in_(timbre));
  return decoder_out_(decoder_stack_(x));
}

ad::Var Disentangler::code_embeddings(std::span<const int> codes) const {
  for (int c : codes) {
    if (c < 0 || c >= config_.prosody.codebook_size) {
      throw ValidationError("prosody code " + std::to_string(c) + " outside codebook");
    }
  }
  return ad::gather_rows(codebook_, codes);
}

std::vector<int> Disentangler::feasible_windows(int frames) const {
  std::vector<int> out;
  for (int w : config_.discriminator.windows) {
    if (w <= frames) out.push_back(w);
  }
  return out;
}

std::vector<int> Disentangler::sample_window_starts(int frames, Rng& rng) const {
  const auto windows = feasible_windows(frames);
  if (windows.empty()) {
    throw ValidationError("discriminator: mel with " + std::to_string(frames) + " frames is shorter than every window");
  }
  std::vector<int> starts;
  for (int w : windows) starts.push_back(static_cast<int>(uniform_index(rng, static_cast<std::size_t>(frames - w + 1))));
  return starts;
}

std::vector<ad::Var> Disentangler::discriminate(const ad::Var& mel, std::span<const int> starts) const {
  const auto windows = feasible_windows(static_cast<int>(mel.rows()));
  if (windows.empty()) {
    throw ValidationError("discriminator: mel shorter than every window");
  }
  if (starts.size() != windows.size()) {
    throw ValidationError("discriminator: one start index per feasible window required");
  }
  std::vector<ad::Var> scores;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const int w = windows[i];
    const auto& sub = sub_discriminators_[i];
    ad::Var window = ad::slice_rows(mel, starts[i], w);
    nn::FeatureMap fm{ad::reshape(window, static_cast<Eigen::Index>(w) * mel.cols(), 1), w,
                      static_cast<int>(mel.cols())};
    for (const auto& conv : sub.convs) {
      fm = conv(fm);
      fm.cells = ad::leaky_relu(fm.cells);
    }
    scores.push_back(ad::mean(sub.head(fm.cells)));
  }
  return scores;
}

std::vector<double> Disentangler::discriminate(const MelSpectrogram& mel, Rng& rng) const {
  ad::NoGradGuard guard;
  const auto starts = sample_window_starts(mel.frames(), rng);
  std::vector<double> out;
  for (const auto& s : discriminate(ad::constant(mel.values), starts)) out.push_back(s.scalar());
  return out;
}

Reconstruction Disentangler::reconstruct(const PhonemeUtterance& target, const MelSpectrogram& reference) const {
  validate(target);
  Reconstruction r;
  r.prosody = prosody_encode(slice_low_band(target.mel, config_.low_bins), target.durations);
  r.content = content_encode(target.phonemes);
  r.timbre = timbre_encode(reference);
  r.log_durations = duration_log_predict(r.content, r.prosody.quantized);
  r.mel = decode_mel(length_regulate(r.prosody.quantized, target.durations), r.timbre,
                     length_regulate(r.content, target.durations));
  return r;
}

ad::Var vq_loss(const ad::Var& y, const ad::Var& y_hat, const ad::Var& h, const ad::Var& z_q, double commit_weight) {
  const double inv_rows = h.rows() > 0 ? 1.0 / static_cast<double>(h.rows()) : 0.0;
  ad::Var rec = ad::mse(y, y_hat);
  ad::Var codebook = ad::scale(ad::sum(ad::square(ad::sub(ad::detach(h), z_q))), inv_rows);
  ad::Var commit = ad::scale(ad::sum(ad::square(ad::sub(h, ad::detach(z_q)))), inv_rows);
  return ad::add(ad::add(rec, codebook), ad::scale(commit, commit_weight));
}

ad::Var lsgan_discriminator_loss(std::span<const ad::Var> real, std::span<const ad::Var> fake) {
  if (real.empty() || real.size() != fake.size()) {
    throw ValidationError("lsgan: real and fake score lists must be non-empty and equally long");
  }
  std::vector<ad::Var> terms;
  for (std::size_t i = 0; i < real.size(); ++i) {
    terms.push_back(ad::add(ad::square(ad::add_scalar(real[i], -1.0)), ad::square(fake[i])));
  }
  return mean_of(terms);
}

ad::Var lsgan_generator_loss(std::span<const ad::Var> fake) {
  if (fake.empty()) {
    throw ValidationError("lsgan: empty score list");
  }
  std::vector<ad::Var> terms;
  for (const auto& f : fake) terms.push_back(ad::square(ad::add_scalar(f, -1.0)));
  return mean_of(terms);
}

ad::Var duration_loss(const ad::Var& log_durations, std::span<const int> durations) {
  ad::Matrix target(static_cast<Eigen::Index>(durations.size()), 1);
  for (std::size_t i = 0; i < durations.size(); ++i) {
    target(static_cast<Eigen::Index>(i), 0) = std::log1p(static_cast<double>(durations[i]));
  }
  return ad::mse(log_durations, ad::constant(target));
}

std::vector<TrainingPair> sample_batch(const Manifest& manifest, int batch_size, Rng& rng) {
  if (manifest.records.empty()) {
    throw ValidationError("cannot sample a batch from an empty manifest");
  }
  std::vector<TrainingPair> batch;
  for (int i = 0; i < batch_size; ++i) {
    const auto& target = manifest.records[uniform_index(rng, manifest.records.size())];
    batch.push_back({&target, &sample_reference_or_self(manifest, target, rng)});
  }
  return batch;
}

DisentanglerTrainer::DisentanglerTrainer(Disentangler& model)
    : model_(model),
      generator_opt_(model.generator_parameters(), adam_config(model.config().optimizer)),
      discriminator_opt_(model.discriminator_parameters(), adam_config(model.config().optimizer)),
      last_used_(static_cast<std::size_t>(model.config().prosody.codebook_size), 0) {}

StageOneLosses DisentanglerTrainer::step(std::span<const TrainingPair> batch, Rng& rng) {
  if (batch.empty()) {
    throw ValidationError("training step on an empty batch");
  }
  const auto& cfg = model_.config();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  StageOneLosses losses;

  std::vector<ad::Var> totals;
  std::vector<ad::Matrix> fakes;
  std::vector<std::vector<int>> window_starts;
  std::vector<ad::Matrix> encoder_outputs;
  std::vector<int> used_codes;
  for (const auto& pair : batch) {
    const Reconstruction r = model_.reconstruct(*pair.target, pair.reference->mel);
    const ad::Var y = ad::constant(pair.target->mel.values);
    const ad::Var rec = ad::mse(r.mel, y);
    const ad::Var dur = duration_loss(r.log_durations, pair.target->durations);
    ad::Var total = ad::add(ad::add(rec, r.prosody.codebook_loss),
                            ad::add(ad::scale(r.prosody.commit_loss, cfg.commit_weight),
                                    ad::scale(dur, cfg.duration_weight)));
    std::vector<int> starts;
    const int frames = static_cast<int>(r.mel.rows());
    if (cfg.adversarial_weight > 0.0 && !model_.feasible_windows(frames).empty()) {
      starts = model_.sample_window_starts(frames, rng);
      const ad::Var adv = lsgan_generator_loss(model_.discriminate(r.mel, starts));
      total = ad::add(total, ad::scale(adv, cfg.adversarial_weight));
      losses.adversarial += adv.scalar() * inv_b;
    }
    losses.reconstruction += rec.scalar() * inv_b;
    losses.codebook += r.prosody.codebook_loss.scalar() * inv_b;
    losses.commit += r.prosody.commit_loss.scalar() * inv_b;
    losses.duration += dur.scalar() * inv_b;
    totals.push_back(total);
    fakes.push_back(r.mel.value());
    window_starts.push_back(std::move(starts));
    encoder_outputs.push_back(r.prosody.pre_quant.value());
    used_codes.insert(used_codes.end(), r.prosody.codes.begin(), r.prosody.codes.end());
  }
  const ad::Var generator_loss = mean_of(totals);
  losses.generator_total = generator_loss.scalar();
  require_finite(losses);
  ad::backward(generator_loss);
  model_.discriminator_parameters().zero_grad();
  generator_opt_.step();

  std::vector<ad::Var> disc_terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (window_starts[i].empty()) continue;
    const auto real = model_.discriminate(ad::constant(batch[i].target->mel.values), window_starts[i]);
    const auto fake = model_.discriminate(ad::constant(fakes[i]), window_starts[i]);
    disc_terms.push_back(lsgan_discriminator_loss(real, fake));
  }
  if (!disc_terms.empty()) {
    const ad::Var disc_loss = mean_of(disc_terms);
    losses.discriminator = disc_loss.scalar();
    require_finite(losses);
    ad::backward(disc_loss);
    discriminator_opt_.step();
  }

  const long long now = global_step();
  for (int c : used_codes) last_used_[static_cast<std::size_t>(c)] = now;
  revive_dead_codes(encoder_outputs, rng);
  return losses;
}

void DisentanglerTrainer::revive_dead_codes(const std::vector<ad::Matrix>& encoder_outputs, Rng& rng) {
  const int limit = model_.config().dead_code_steps;
  if (limit <= 0) return;
  std::vector<const ad::Matrix*> pool;
  std::size_t rows = 0;
  for (const auto& m : encoder_outputs) {
    if (m.rows() > 0) pool.push_back(&m);
    rows += static_cast<std::size_t>(m.rows());
  }
  if (rows == 0) return;
  const long long now = global_step();
  auto& codebook = model_.codebook().mutable_value();
  for (std::size_t k = 0; k < last_used_.size(); ++k) {
    if (now - last_used_[k] <= limit) continue;
    const ad::Matrix& src = *pool[uniform_index(rng, pool.size())];
    const auto row = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(src.rows())));
    for (Eigen::Index j = 0; j < codebook.cols(); ++j) codebook(static_cast<Eigen::Index>(k), j) = src(row, j) + 0.01 * normal01(rng);
    last_used_[k] = now;
  }
}

void train_stage_one(DisentanglerTrainer& trainer, const Manifest& manifest, long long steps, std::uint64_t seed,
                     const StageOneCallback& callback) {
  const int batch_size = trainer.model().config().optimizer.batch_size;
  for (long long i = 0; i < steps; ++i) {
    const long long s = trainer.global_step();
    Rng rng = make_rng(seed, "stage1", static_cast<std::uint64_t>(s));
    const auto batch = sample_batch(manifest, batch_size, rng);
    const StageOneLosses losses = trainer.step(batch, rng);
    if (callback) callback(s + 1, losses);
  }
}

}  // namespace megalab

#include "megalab/inference.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "megalab/error.hpp"

namespace megalab {

namespace {

std::vector<int> top_indices(const Eigen::RowVectorXd& scores, int k) {
  std::vector<int> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    return scores(a) > scores(b) || (scores(a) == scores(b) && a < b);
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

// k^m, saturating at limit + 1.
long long bounded_power(int k, int m, long long limit) {
  long long v = 1;
  for (int i = 0; i < m; ++i) {
    v *= k;
    if (v > limit) return limit + 1;
  }
  return v;
}

void enumerate_tree(const PLLM& lm, const PLLMContext& ctx, int k, int length, std::vector<int>& history,
                    std::size_t prefix_len, std::vector<std::vector<int>>& out) {
  if (static_cast<int>(history.size() - prefix_len) == length) {
    out.emplace_back(history.begin() + static_cast<std::ptrdiff_t>(prefix_len), history.end());
    return;
  }
  for (int c : top_indices(lm.next_log_probs(ctx, history), k)) {
    history.push_back(c);
    enumerate_tree(lm, ctx, k, length, history, prefix_len, out);
    history.pop_back();
  }
}

template <typename T>
std::vector<T> concat(std::span<const T> a, std::span<const T> b, std::span<const T> c = {}) {
  std::vector<T> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  out.insert(out.end(), c.begin(), c.end());
  return out;
}

}  // namespace

PhonemeTable PhonemeTable::parse(const std::string& text) {
  PhonemeTable table;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  int next = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string symbol;
    if (!(fields >> symbol)) continue;
    int id = next;
    std::string explicit_id;
    if (fields >> explicit_id) {
      try {
        id = std::stoi(explicit_id);
      } catch (const std::exception&) {
        throw ValidationError("phoneme table line " + std::to_string(line_no) + ": bad id '" + explicit_id + "'");
      }
    }
    try {
      table.add(symbol, id);
    } catch (const ValidationError& e) {
      throw ValidationError("phoneme table line " + std::to_string(line_no) + ": " + e.what());
    }
    next = std::max(next, id + 1);
  }
  return table;
}

PhonemeTable PhonemeTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw MissingArtifactError("phoneme table not found: " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void PhonemeTable::add(const std::string& symbol, int id) {
  if (id < 0) {
    throw ValidationError("phoneme '" + symbol + "' has a negative id");
  }
  if (ids_.contains(symbol)) {
    throw ValidationError("phoneme '" + symbol + "' listed twice");
  }
  for (const auto& [s, i] : ids_) {
    if (i == id) throw ValidationError("phonemes '" + s + "' and '" + symbol + "' share id " + std::to_string(id));
  }
  ids_[symbol] = id;
}

int PhonemeTable::id(const std::string& symbol) const {
  auto it = ids_.find(symbol);
  if (it == ids_.end()) {
    throw ValidationError("phoneme '" + symbol + "' is not in the phoneme table");
  }
  return it->second;
}

std::vector<int> PhonemeTable::encode(const std::vector<std::string>& symbols) const {
  std::vector<int> out;
  out.reserve(symbols.size());
  for (const auto& s : symbols) out.push_back(id(s));
  return out;
}

int PhonemeTable::max_id() const {
  int m = -1;
  for (const auto& [s, i] : ids_) m = std::max(m, i);
  return m;
}

PhonemeTable union_tables(const PhonemeTable& a, const PhonemeTable& b) {
  PhonemeTable out = a;
  std::set<int> taken;
  for (const auto& [s, i] : a.entries()) taken.insert(i);
  int next = std::max(a.max_id(), b.max_id()) + 1;
  for (const auto& [s, i] : b.entries()) {
    if (a.contains(s)) {
      if (a.id(s) != i) {
        throw ValidationError("phoneme '" + s + "' has id " + std::to_string(a.id(s)) + " in one table and " +
                              std::to_string(i) + " in the other");
      }
      continue;
    }
    const int id = taken.contains(i) ? next++ : i;
    out.add(s, id);
    taken.insert(id);
  }
  return out;
}

nlohmann::json to_json(const EditRequest& req) {
  nlohmann::json j{{"utterance_id", req.utterance_id}, {"L", req.left},        {"R", req.right},
                   {"N", req.candidates},              {"k", req.top_k},       {"seed", req.seed}};
  if (req.replacement) j["phonemes"] = *req.replacement;
  return j;
}

EditRequest edit_request_from_json(const nlohmann::json& j) {
  EditRequest req;
  try {
    req.utterance_id = j.at("utterance_id").get<std::string>();
    req.left = j.at("L").get<int>();
    req.right = j.at("R").get<int>();
    req.candidates = j.value("N", req.candidates);
    req.top_k = j.value("k", req.top_k);
    req.seed = j.value("seed", req.seed);
    if (j.contains("phonemes")) req.replacement = j.at("phonemes").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("edit request: ") + e.what());
  }
  return req;
}

Synthesizer::Synthesizer(const Disentangler& disentangler, const PLLM& pllm) : dis_(disentangler), lm_(pllm) {
  const auto& d = dis_.config();
  const auto& p = lm_.config();
  if (p.codebook_size != d.prosody.codebook_size || p.content_dim != d.content.hidden ||
      p.timbre_dim != d.timbre.hidden) {
    throw CompatibilityError("P-LLM (codebook " + std::to_string(p.codebook_size) + ", content " +
                             std::to_string(p.content_dim) + ", timbre " + std::to_string(p.timbre_dim) +
                             ") does not fit the stage-1 model (codebook " + std::to_string(d.prosody.codebook_size) +
                             ", content " + std::to_string(d.content.hidden) + ", timbre " +
                             std::to_string(d.timbre.hidden) + ")");
  }
}

PLLMContext Synthesizer::prompt_context(const PhonemeUtterance& prompt, std::span<const int> target_phonemes) const {
  if (prompt.phonemes.empty() || prompt.mel.frames() == 0) {
    throw ValidationError("synthesis: empty prompt");
  }
  if (target_phonemes.empty()) {
    throw ValidationError("synthesis: empty target phoneme sequence");
  }
  validate(prompt);
  ad::NoGradGuard guard;
  PLLMContext ctx;
  ctx.prompt_content = dis_.content_encode(prompt.phonemes).value();
  ctx.prompt_codes =
      dis_.prosody_encode(slice_low_band(prompt.mel, dis_.config().low_bins), prompt.durations).codes;
  ctx.timbre = dis_.timbre_encode(prompt.mel).value();
  ctx.target_content = dis_.content_encode(target_phonemes).value();
  return ctx;
}

SynthesisResult Synthesizer::synthesize_zero_shot(const SynthesisRequest& req) const {
  const PLLMContext ctx = prompt_context(req.prompt, req.target_phonemes);
  Rng rng = make_rng(req.seed, "synthesize");
  const std::vector<int> codes = lm_.sample_topk(ctx, req.top_k, rng);
  return decode(req.target_phonemes, codes, req.prompt.mel);
}

SynthesisResult Synthesizer::decode(std::span<const int> phonemes, std::span<const int> codes,
                                    const MelSpectrogram& timbre_source, const std::vector<int>* durations) const {
  if (phonemes.size() != codes.size()) {
    throw ValidationError("decode: " + std::to_string(codes.size()) + " codes for " +
                          std::to_string(phonemes.size()) + " phonemes");
  }
  ad::NoGradGuard guard;
  const ad::Var content = dis_.content_encode(phonemes);
  const ad::Var prosody = dis_.code_embeddings(codes);
  SynthesisResult out;
  out.codes.assign(codes.begin(), codes.end());
  out.durations = durations != nullptr ? *durations : dis_.predict_durations(content, prosody, 1);
  if (out.durations.size() != phonemes.size()) {
    throw ValidationError("decode: duration count does not match the phonemes");
  }
  out.mel.values = dis_.decode_mel(length_regulate(prosody, out.durations), dis_.timbre_encode(timbre_source),
                                   length_regulate(content, out.durations))
                       .value();
  return out;
}

EditResult Synthesizer::edit_speech(const PhonemeUtterance& utterance, const EditRequest& req) const {
  validate(utterance);
  const int t0 = utterance.phoneme_count();
  if (req.left < 0 || req.left > req.right || req.right > t0) {
    throw ValidationError("edit: region [" + std::to_string(req.left) + ", " + std::to_string(req.right) +
                          ") is not inside an utterance of " + std::to_string(t0) + " phonemes");
  }
  if (req.candidates < 1 || req.candidates > lm_.config().max_candidates) {
    throw ValidationError("edit: N must lie in [1, " + std::to_string(lm_.config().max_candidates) + "]");
  }
  const std::span<const int> phon(utterance.phonemes);
  const std::span<const int> dur(utterance.durations);
  const auto L = static_cast<std::size_t>(req.left);
  const auto R = static_cast<std::size_t>(req.right);
  const std::vector<int> replacement =
      req.replacement ? *req.replacement : std::vector<int>(phon.begin() + req.left, phon.begin() + req.right);
  const int m = static_cast<int>(replacement.size());

  EditResult out;
  out.phonemes = concat<int>(phon.first(L), replacement, phon.subspan(R));
  if (out.phonemes.empty()) {
    throw ValidationError("edit: the edited transcript is empty");
  }
  out.mask_begin = req.left;
  out.mask_end = req.left + m;

  std::vector<int> gt;
  PLLMContext ctx;
  {
    ad::NoGradGuard guard;
    gt = dis_.prosody_encode(slice_low_band(utterance.mel, dis_.config().low_bins), utterance.durations).codes;
    ctx.prompt_content.resize(0, lm_.config().content_dim);
    ctx.timbre = dis_.timbre_encode(utterance.mel).value();
    ctx.target_content = dis_.content_encode(out.phonemes).value();
  }
  const std::span<const int> gts(gt);
  const std::vector<int> prefix(gts.begin(), gts.begin() + req.left);
  const std::vector<int> right(gts.begin() + req.right, gts.end());

  std::vector<int> best;
  if (m > 0) {
    const int k = std::min(req.top_k, lm_.config().codebook_size);
    if (k < 1) {
      throw ValidationError("edit: top-k must be positive");
    }
    std::vector<std::vector<int>> paths;
    if (bounded_power(k, m, req.candidates) <= req.candidates) {
      std::vector<int> history = prefix;
      enumerate_tree(lm_, ctx, k, m, history, prefix.size(), paths);
      out.enumerated = true;
    } else {
      Rng rng = make_rng(req.seed, "edit-candidates");
      std::set<std::vector<int>> seen;
      for (int attempt = 0; attempt < 20 * req.candidates && static_cast<int>(paths.size()) < req.candidates;
           ++attempt) {
        const std::vector<int> full = lm_.sample_topk(ctx, k, rng, prefix, out.mask_end);
        std::vector<int> path(full.begin() + req.left, full.end());
        if (seen.insert(path).second) paths.push_back(std::move(path));
      }
    }
    for (auto& path : paths) {
      const std::vector<int> scored = concat<int>(path, right);
      out.candidates.push_back({std::move(path), lm_.score_path(ctx, prefix, scored)});
    }
    out.selected = 0;
    for (int i = 1; i < static_cast<int>(out.candidates.size()); ++i) {
      if (out.candidates[static_cast<std::size_t>(i)].score > out.candidates[static_cast<std::size_t>(out.selected)].score) {
        out.selected = i;
      }
    }
    best = out.candidates[static_cast<std::size_t>(out.selected)].path;
  }
  out.codes = concat<int>(prefix, best, right);

  std::vector<int> durations = concat<int>(dur.first(L), std::vector<int>(static_cast<std::size_t>(m), 0), dur.subspan(R));
  if (m > 0) {
    ad::NoGradGuard guard;
    const std::vector<int> predicted =
        dis_.predict_durations(ad::constant(ctx.target_content), dis_.code_embeddings(out.codes), 1);
    for (int i = out.mask_begin; i < out.mask_end; ++i) durations[static_cast<std::size_t>(i)] = predicted[static_cast<std::size_t>(i)];
  }
  SynthesisResult decoded = decode(out.phonemes, out.codes, utterance.mel, &durations);
  out.mel = std::move(decoded.mel);
  out.durations = std::move(decoded.durations);
  return out;
}

Waveform GriffinLimVocoder::vocode(const MelSpectrogram& mel) const {
  if (mel.bins() != config_.n_mels) {
    throw ValidationError("vocoder expects " + std::to_string(config_.n_mels) + " mel bins, got " +
                          std::to_string(mel.bins()));
  }
  return {griffin_lim(mel, config_, iterations_), config_.sample_rate};
}

ExternalVocoder::ExternalVocoder(std::string command_template, std::filesystem::path work_dir)
    : template_(std::move(command_template)), work_dir_(std::move(work_dir)) {
  if (template_.find("{mel}") == std::string::npos || template_.find("{wav}") == std::string::npos) {
    throw ValidationError("external vocoder command needs {mel} and {wav} placeholders");
  }
}

Waveform ExternalVocoder::vocode(const MelSpectrogram& mel) const {
  std::filesystem::create_directories(work_dir_);
  const auto mel_path = work_dir_ / "vocoder_input.mel";
  const auto wav_path = work_dir_ / "vocoder_output.wav";
  write_mel(mel_path, mel);
  std::filesystem::remove(wav_path);
  std::string cmd = template_;
  for (const auto& [key, value] : {std::pair{std::string("{mel}"), mel_path.string()},
                                   std::pair{std::string("{wav}"), wav_path.string()}}) {
    for (auto pos = cmd.find(key); pos != std::string::npos; pos = cmd.find(key, pos + value.size())) {
      cmd.replace(pos, key.size(), value);
    }
  }
  const int status = std::system(cmd.c_str());
  if (status != 0) {
    throw Error("external vocoder failed with status " + std::to_string(status) + ": " + cmd);
  }
  if (!std::filesystem::exists(wav_path)) {
    throw MissingArtifactError("external vocoder produced no WAV at " + wav_path.string());
  }
  return read_wav(wav_path);
}

std::unique_ptr<Vocoder> make_vocoder(const std::string& spec, const AudioConfig& audio,
                                      const std::filesystem::path& work_dir) {
  if (spec == "griffin-lim") return std::make_unique<GriffinLimVocoder>(audio);
  if (spec.starts_with("griffin-lim:")) {
    try {
      return std::make_unique<GriffinLimVocoder>(audio, std::stoi(spec.substr(12)));
    } catch (const std::logic_error&) {
      throw ValidationError("vocoder: bad iteration count in '" + spec + "'");
    }
  }
  if (spec.starts_with("external:")) return std::make_unique<ExternalVocoder>(spec.substr(9), work_dir);
  throw ValidationError("unknown vocoder '" + spec + "' (griffin-lim[:iters] or external:<command>)");
}

}  // namespace megalab

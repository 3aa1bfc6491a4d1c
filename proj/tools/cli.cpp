#include "cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "megalab/checkpoint.hpp"
#include "megalab/error.hpp"
#include "megalab/evaluation.hpp"
#include "megalab/inference.hpp"
#include "megalab/manifest.hpp"
#include "megalab/stage_two.hpp"
#include "megalab/synthetic.hpp"

namespace megalab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kRunRecordVersion = 1;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Exclusive lock file guarding a checkpoint directory against concurrent
// writers.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
      throw ValidationError("checkpoint directory " + dir.string() + " is locked by another writer (" +
                            path_.string() + ")");
    }
    std::fprintf(f, "locked\n");
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

void write_run_record(const fs::path& path, const std::string& command, const std::vector<std::string>& args,
                      std::uint64_t seed, json extra = json::object()) {
  json record{{"version", kRunRecordVersion}, {"command", command}, {"args", args}, {"seed", seed}};
  for (auto& [k, v] : extra.items()) record[k] = v;
  write_text(path, record.dump(2) + "\n");
}

// Drops rows past `step` from a loss log so a resumed run does not duplicate
// them.
void trim_loss_log(const fs::path& path, long long step) {
  if (!fs::exists(path)) return;
  std::istringstream in(read_file(path));
  std::string out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (!header) {
      const long long s = std::stoll(line.substr(0, line.find(',')));
      if (s > step) continue;
    }
    header = false;
    out += line + '\n';
  }
  write_text(path, out);
}

std::ofstream open_loss_log(const fs::path& path, const std::string& header) {
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write " + path.string());
  if (fresh) out << header << '\n';
  return out;
}

fs::path resolve_checkpoint(const fs::path& p) { return fs::is_directory(p) ? p / "stage2.ckpt" : p; }

std::vector<int> read_phonemes(const fs::path& path, const std::optional<PhonemeTable>& table) {
  std::istringstream in(read_file(path));
  std::vector<std::string> tokens;
  std::string tok;
  while (in >> tok) tokens.push_back(tok);
  if (tokens.empty()) throw ValidationError(path.string() + ": no phonemes");
  if (table) return table->encode(tokens);
  std::string joined;
  for (const auto& t : tokens) joined += t + ' ';
  try {
    return parse_int_list(joined);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what() + " (pass --phoneme-table for symbolic phonemes)");
  }
}

const PhonemeUtterance& find_utterance(const Manifest& m, const std::string& id) {
  const PhonemeUtterance* u = m.find(id);
  if (u == nullptr) throw ValidationError("utterance '" + id + "' is not in the manifest");
  return *u;
}

struct LoadedModels {
  Disentangler dis;
  PLLM lm;
};

LoadedModels load_models(const fs::path& ckpt_path) {
  const Checkpoint ckpt = read_checkpoint(resolve_checkpoint(ckpt_path));
  if (!ckpt.has_section("stage2")) {
    throw MissingArtifactError(ckpt_path.string() + " has no stage-2 section; run `train --stage 2` first");
  }
  check_stage_compatibility(ckpt);
  return {load_disentangler(ckpt), load_pllm(ckpt)};
}

void write_audio(const fs::path& out_dir, const std::string& stem, const MelSpectrogram& mel,
                 const std::string& vocoder_spec) {
  fs::create_directories(out_dir);
  write_mel(out_dir / (stem + ".mel"), mel);
  const auto vocoder = make_vocoder(vocoder_spec, AudioConfig{}, out_dir);
  write_wav(out_dir / (stem + ".wav"), vocoder->vocode(mel));
}

// ---- prepare ---------------------------------------------------------------

struct PrepareOptions {
  bool synthetic = false;
  std::string raw;
  fs::path out;
  int speakers = 4;
  int per_speaker = 8;
  std::uint64_t seed = 0;
  int vocab = 16;
  int min_phonemes = 8;
  int max_phonemes = 14;
  double leak = 0.3;
  double noise = 0.05;
};

int cmd_prepare(const PrepareOptions& o, const std::vector<std::string>& args) {
  if (o.synthetic == !o.raw.empty()) throw ValidationError("prepare: pass exactly one of --synthetic or --raw");
  Manifest m;
  if (o.synthetic) {
    SyntheticFactorSpec spec;
    spec.n_speakers = o.speakers;
    spec.utterances_per_speaker = o.per_speaker;
    spec.timbre_seed = o.seed + 1;
    spec.prosody_seed = o.seed + 2;
    spec.content_seed = o.seed + 3;
    spec.phoneme_vocab_size = o.vocab;
    spec.min_phonemes = o.min_phonemes;
    spec.max_phonemes = o.max_phonemes;
    spec.timbre_leak = o.leak;
    spec.noise = o.noise;
    m = generate_synthetic_dataset(spec);
    std::string table;
    for (int p = 0; p < o.vocab; ++p) table += "p" + std::to_string(p) + " " + std::to_string(p) + "\n";
    write_text(o.out / "phonemes.txt", table);
  } else {
    m = load_raw_corpus(o.raw);
  }
  save_manifest(m, o.out);
  long long frames = 0;
  long long phonemes = 0;
  for (const auto& u : m.records) {
    frames += u.mel.frames();
    phonemes += u.phoneme_count();
  }
  const auto speakers = m.speaker_groups().size();
  std::cout << "records " << m.records.size() << "\nspeakers " << speakers << "\nphonemes " << phonemes
            << "\nframes " << frames << "\nmean_phonemes_per_record "
            << static_cast<double>(phonemes) / static_cast<double>(m.records.size()) << '\n';
  write_run_record(o.out / "run.json", "prepare", args, o.seed,
                   {{"records", m.records.size()}, {"speakers", speakers}, {"frames", frames}});
  return kExitOk;
}

// ---- train -----------------------------------------------------------------

struct TrainOptions {
  int stage = 1;
  fs::path manifest;
  fs::path ckpt_dir;
  std::optional<long long> steps;
  std::optional<std::uint64_t> seed;
  long long save_every = 500;
  std::string config;
  std::string preset = "toy";
  std::optional<int> batch_size;
  std::optional<double> learning_rate;
};

template <typename Config>
void apply_optimizer_flags(Config& cfg, const TrainOptions& o) {
  if (o.batch_size) cfg.optimizer.batch_size = *o.batch_size;
  if (o.learning_rate) cfg.optimizer.learning_rate = *o.learning_rate;
}

std::uint64_t resolve_seed(const json& section, const TrainOptions& o) {
  if (section.contains("seed")) {
    const auto stored = section.at("seed").get<std::uint64_t>();
    if (o.seed && *o.seed != stored) {
      throw CompatibilityError("--seed " + std::to_string(*o.seed) + " differs from the checkpoint's seed " +
                               std::to_string(stored));
    }
    return stored;
  }
  return o.seed.value_or(0);
}

int train_stage_one_cmd(const TrainOptions& o, const std::vector<std::string>& args) {
  DirectoryLock lock(o.ckpt_dir);
  const Manifest m = load_manifest(o.manifest);
  const fs::path ckpt_path = o.ckpt_dir / "stage1.ckpt";
  const fs::path log_path = o.ckpt_dir / "stage1_loss.csv";

  DisentanglerConfig cfg = o.preset == "full" ? DisentanglerConfig{} : toy_disentangler_config();
  apply_optimizer_flags(cfg, o);
  if (!o.config.empty()) cfg = disentangler_config_from_ini(read_file(o.config));
  validate(cfg);

  std::optional<Checkpoint> resume;
  if (fs::exists(ckpt_path)) {
    resume = read_checkpoint(ckpt_path);
    const DisentanglerConfig stored = stage_one_config(*resume);
    if (!o.config.empty() && to_ini(stored) != to_ini(cfg)) {
      throw CompatibilityError(ckpt_path.string() + " was trained with a different stage-1 config");
    }
    cfg = stored;
  }
  const std::uint64_t seed = resolve_seed(resume ? resume->meta.at("stage1") : json::object(), o);
  const long long target = o.steps.value_or(cfg.optimizer.total_steps);

  Disentangler model(cfg, seed);
  DisentanglerTrainer trainer(model);
  Checkpoint ckpt;
  if (resume) {
    ckpt = std::move(*resume);
    restore_stage_one_trainer(ckpt, trainer);
    trim_loss_log(log_path, trainer.global_step());
    spdlog::info("resuming stage 1 at step {}", trainer.global_step() + 1);
  } else if (fs::exists(log_path)) {
    fs::remove(log_path);
  }
  auto log = open_loss_log(log_path,
                           "step,reconstruction,codebook,commit,duration,adversarial,generator_total,discriminator");
  log.precision(10);
  while (trainer.global_step() < target) {
    const long long chunk = std::min(o.save_every, target - trainer.global_step());
    train_stage_one(trainer, m, chunk, seed, [&](long long step, const StageOneLosses& l) {
      log << step << ',' << l.reconstruction << ',' << l.codebook << ',' << l.commit << ',' << l.duration << ','
          << l.adversarial << ',' << l.generator_total << ',' << l.discriminator << '\n';
    });
    log.flush();
    store_stage_one(ckpt, model, &trainer);
    ckpt.meta["stage1"]["seed"] = seed;
    write_checkpoint(ckpt_path, ckpt);
    spdlog::info("stage 1 step {} checkpointed", trainer.global_step());
  }
  if (!fs::exists(ckpt_path)) {
    store_stage_one(ckpt, model, &trainer);
    ckpt.meta["stage1"]["seed"] = seed;
    write_checkpoint(ckpt_path, ckpt);
  }
  write_run_record(o.ckpt_dir / "run_stage1.json", "train", args, seed, {{"step", trainer.global_step()}});
  std::cout << "stage 1 step " << trainer.global_step() << " -> " << ckpt_path.string() << '\n';
  return kExitOk;
}

int train_stage_two_cmd(const TrainOptions& o, const std::vector<std::string>& args) {
  DirectoryLock lock(o.ckpt_dir);
  const fs::path stage1_path = o.ckpt_dir / "stage1.ckpt";
  if (!fs::exists(stage1_path)) {
    throw MissingArtifactError("stage 2 needs a stage-1 checkpoint at " + stage1_path.string() +
                               "; run `train --stage 1` first");
  }
  const Checkpoint stage1 = read_checkpoint(stage1_path);
  const Disentangler dis = load_disentangler(stage1);
  const DisentanglerConfig& dcfg = dis.config();
  const Manifest m = load_manifest(o.manifest);
  const fs::path ckpt_path = o.ckpt_dir / "stage2.ckpt";
  const fs::path log_path = o.ckpt_dir / "stage2_loss.csv";

  PLLMConfig cfg = o.preset == "full" ? PLLMConfig{} : toy_pllm_config(dcfg.prosody.codebook_size);
  cfg.codebook_size = dcfg.prosody.codebook_size;
  cfg.content_dim = dcfg.content.hidden;
  cfg.timbre_dim = dcfg.timbre.hidden;
  apply_optimizer_flags(cfg, o);
  if (!o.config.empty()) cfg = pllm_config_from_ini(read_file(o.config));
  validate(cfg);

  std::optional<Checkpoint> resume;
  if (fs::exists(ckpt_path)) {
    resume = read_checkpoint(ckpt_path);
    if (resume->meta.at("stage2").at("stage1_config_hash").get<std::string>() != stage_one_hash(stage1)) {
      throw CompatibilityError(ckpt_path.string() + " was trained against a different stage-1 checkpoint");
    }
    const PLLMConfig stored = stage_two_config(*resume);
    if (!o.config.empty() && to_ini(stored) != to_ini(cfg)) {
      throw CompatibilityError(ckpt_path.string() + " was trained with a different stage-2 config");
    }
    cfg = stored;
  }
  const std::uint64_t seed = resolve_seed(resume ? resume->meta.at("stage2") : json::object(), o);
  const long long target = o.steps.value_or(cfg.optimizer.total_steps);

  const StageTwoCorpus corpus(encode_corpus(dis, m), cfg.context_sentences, cfg.max_positions);
  PLLM lm(cfg, seed);
  PLLMTrainer trainer(lm);
  Checkpoint ckpt;
  if (resume) {
    ckpt = std::move(*resume);
    restore_stage_two_trainer(ckpt, trainer);
    trim_loss_log(log_path, trainer.global_step());
    spdlog::info("resuming stage 2 at step {}", trainer.global_step() + 1);
  } else {
    store_stage_one(ckpt, dis, nullptr);
    ckpt.meta["stage1"]["step"] = stage1.meta.at("stage1").value("step", 0LL);
    if (fs::exists(log_path)) fs::remove(log_path);
  }
  check_stage_compatibility([&] {
    Checkpoint probe = ckpt;
    store_stage_two(probe, lm, nullptr);
    return probe;
  }());
  auto log = open_loss_log(log_path, "step,loss");
  log.precision(10);
  const auto save = [&] {
    store_stage_two(ckpt, lm, &trainer);
    ckpt.meta["stage2"]["seed"] = seed;
    write_checkpoint(ckpt_path, ckpt);
  };
  while (trainer.global_step() < target) {
    const long long chunk = std::min(o.save_every, target - trainer.global_step());
    train_stage_two(trainer, corpus, chunk, seed, [&](long long step, double loss) { log << step << ',' << loss << '\n'; });
    log.flush();
    save();
    spdlog::info("stage 2 step {} checkpointed", trainer.global_step());
  }
  if (!fs::exists(ckpt_path)) save();
  write_run_record(o.ckpt_dir / "run_stage2.json", "train", args, seed, {{"step", trainer.global_step()}});
  std::cout << "stage 2 step " << trainer.global_step() << " -> " << ckpt_path.string() << '\n';
  return kExitOk;
}

// ---- synth / edit ------------------------------------------------------------

struct SynthOptions {
  fs::path ckpt;
  fs::path manifest;
  std::string prompt;
  fs::path text_phonemes;
  fs::path phoneme_table;
  int k = 5;
  std::uint64_t seed = 0;
  fs::path out;
  std::string vocoder = "griffin-lim";
};

int cmd_synth(const SynthOptions& o, const std::vector<std::string>& args) {
  const LoadedModels models = load_models(o.ckpt);
  std::optional<PhonemeTable> table;
  if (!o.phoneme_table.empty()) table = PhonemeTable::load(o.phoneme_table);

  // --prompt is an utterance id of --manifest, or a one-record manifest file.
  PhonemeUtterance prompt;
  std::optional<Manifest> corpus;
  if (!o.manifest.empty()) corpus = load_manifest(o.manifest);
  if (corpus && corpus->find(o.prompt) != nullptr) {
    prompt = *corpus->find(o.prompt);
  } else if (fs::is_regular_file(o.prompt)) {
    Manifest single = load_manifest(o.prompt);
    if (single.records.size() != 1) throw ValidationError(o.prompt + ": expected exactly one prompt record");
    prompt = single.records.front();
  } else {
    throw ValidationError("prompt '" + o.prompt + "' is neither a manifest utterance nor a record file");
  }

  const Synthesizer synth(models.dis, models.lm);
  SynthesisRequest req;
  req.prompt = prompt;
  req.target_phonemes = read_phonemes(o.text_phonemes, table);
  req.top_k = o.k;
  req.seed = o.seed;
  const SynthesisResult result = synth.synthesize_zero_shot(req);
  write_audio(o.out, "synth", result.mel, o.vocoder);
  write_run_record(o.out / "run.json", "synth", args, o.seed,
                   {{"prompt", prompt.utterance_id},
                    {"target_phonemes", req.target_phonemes},
                    {"codes", result.codes},
                    {"durations", result.durations},
                    {"frames", result.mel.frames()}});
  std::cout << "synthesized " << result.mel.frames() << " frames -> " << (o.out / "synth.wav").string() << '\n';
  return kExitOk;
}

struct EditOptions {
  fs::path ckpt;
  fs::path manifest;
  std::string utt;
  int left = 0;
  int right = 0;
  int candidates = 16;
  int k = 5;
  std::uint64_t seed = 0;
  fs::path replacement;
  fs::path phoneme_table;
  fs::path out;
  std::string vocoder = "griffin-lim";
};

int cmd_edit(const EditOptions& o, const std::vector<std::string>& args) {
  const LoadedModels models = load_models(o.ckpt);
  const Manifest corpus = load_manifest(o.manifest);
  const PhonemeUtterance& utt = find_utterance(corpus, o.utt);
  std::optional<PhonemeTable> table;
  if (!o.phoneme_table.empty()) table = PhonemeTable::load(o.phoneme_table);

  EditRequest req;
  req.utterance_id = o.utt;
  req.left = o.left;
  req.right = o.right;
  req.candidates = o.candidates;
  req.top_k = o.k;
  req.seed = o.seed;
  if (!o.replacement.empty()) req.replacement = read_phonemes(o.replacement, table);

  const Synthesizer synth(models.dis, models.lm);
  const EditResult result = synth.edit_speech(utt, req);
  write_audio(o.out, "edit", result.mel, o.vocoder);
  json candidates = json::array();
  for (const auto& c : result.candidates) candidates.push_back({{"path", c.path}, {"score", c.score}});
  json extra{{"request", to_json(req)},
             {"selected", result.selected},
             {"selected_score", result.selected >= 0 ? json(result.candidates[static_cast<std::size_t>(result.selected)].score)
                                                     : json(nullptr)},
             {"enumerated", result.enumerated},
             {"mask", {result.mask_begin, result.mask_end}},
             {"phonemes", result.phonemes},
             {"codes", result.codes},
             {"durations", result.durations},
             {"candidates", candidates}};
  write_run_record(o.out / "run.json", "edit", args, o.seed, extra);
  std::cout << "edited [" << result.mask_begin << ", " << result.mask_end << "), selected candidate "
            << result.selected << " of " << result.candidates.size() << " -> " << (o.out / "edit.wav").string()
            << '\n';
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalOptions {
  fs::path ckpt;
  fs::path manifest;
  fs::path sweep;
  fs::path out;
  fs::path table;
  int k = 5;
  std::uint64_t seed = 0;
  int stress = 0;
  std::string label = "run";
};

int cmd_eval_sweep(const EvalOptions& o, const std::vector<std::string>& args) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(o.sweep.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ValidationError(std::string("sweep file: ") + e.what());
  }
  SweepSettings settings;
  std::vector<SweepConfig> configs;
  std::vector<std::uint64_t> seeds;
  try {
    const auto& s = tree.get_child("sweep");
    settings.base = s.get<std::string>("preset", "toy") == "full" ? DisentanglerConfig{} : toy_disentangler_config();
    settings.steps = s.get<long long>("steps", 1000);
    settings.data.n_speakers = s.get<int>("speakers", settings.data.n_speakers);
    settings.data.utterances_per_speaker = s.get<int>("per_speaker", settings.data.utterances_per_speaker);
    std::istringstream seed_list(s.get<std::string>("seeds", "0"));
    for (std::uint64_t v = 0; seed_list >> v;) seeds.push_back(v);
    for (const auto& [name, section] : tree) {
      if (name.rfind("config.", 0) != 0) continue;
      configs.push_back({name.substr(7), section.get<int>("code_dim"), section.get<int>("codebook_size")});
    }
  } catch (const boost::property_tree::ptree_error& e) {
    throw ValidationError(std::string("sweep file: ") + e.what());
  }
  if (configs.empty()) throw ValidationError("sweep file: no [config.NAME] sections");
  if (seeds.empty()) throw ValidationError("sweep file: empty seed list");
  std::vector<SweepRow> rows;
  for (std::uint64_t seed : seeds) {
    settings.seed = seed;
    auto part = disentanglement_sweep(configs, settings);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  const std::string table = sweep_table_csv(rows);
  write_text(o.out / "sweep.csv", table);
  write_run_record(o.out / "run.json", "eval", args, seeds.front(), {{"sweep_rows", rows.size()}});
  std::cout << table;
  return kExitOk;
}

int cmd_eval(const EvalOptions& o, const std::vector<std::string>& args) {
  if (!o.sweep.empty()) return cmd_eval_sweep(o, args);
  if (o.ckpt.empty() || o.manifest.empty()) throw ValidationError("eval: --ckpt and --manifest are required");
  const LoadedModels models = load_models(o.ckpt);
  const Manifest corpus = load_manifest(o.manifest);
  const Synthesizer synth(models.dis, models.lm);
  const TimbreEmbedder embedder(models.dis);
  const int low_bins = models.dis.config().low_bins;

  MetricReport report;
  const auto groups = corpus.speaker_groups();
  std::map<std::string, std::size_t> prompt_of;
  for (const auto& [speaker, idx] : groups) {
    for (std::size_t j = 0; j < idx.size(); ++j) {
      prompt_of[corpus.records[idx[j]].utterance_id] = idx[(j + idx.size() - 1) % idx.size()];
    }
  }
  const auto audit = [&](const SynthesisResult& r, int phonemes) {
    const RobustnessCounts c = robustness_check(phonemes, r.codes, r.durations, r.mel.frames());
    report.repeats += c.repeats;
    report.skips += c.skips;
    report.error_sentences += c.clean() ? 0 : 1;
    ++report.sentences;
  };
  double dtw_sum = 0.0;
  double cos_sum = 0.0;
  for (std::size_t i = 0; i < corpus.records.size(); ++i) {
    const auto& utt = corpus.records[i];
    SynthesisRequest req;
    req.prompt = corpus.records[prompt_of.at(utt.utterance_id)];
    req.target_phonemes = utt.phonemes;
    req.top_k = o.k;
    req.seed = o.seed + i;
    const SynthesisResult r = synth.synthesize_zero_shot(req);
    audit(r, utt.phoneme_count());
    const PitchContour truth = utt.factors ? pitch_contour(*utt.factors) : pitch_contour(utt.mel, low_bins);
    dtw_sum += dtw_distance(pitch_contour(r.mel, low_bins), truth);
    cos_sum += speaker_similarity(r.mel, utt.mel, embedder);
  }
  const auto n = static_cast<double>(corpus.records.size());
  report.pitch_dtw = dtw_sum / n;
  report.speaker_cos = cos_sum / n;

  int vocab = 1;
  for (const auto& u : corpus.records) {
    for (int p : u.phonemes) vocab = std::max(vocab, p + 1);
  }
  const auto stress = stress_sentences(o.stress, vocab, o.seed);
  for (std::size_t i = 0; i < stress.size(); ++i) {
    SynthesisRequest req;
    req.prompt = corpus.records[i % corpus.records.size()];
    req.target_phonemes = stress[i];
    req.top_k = o.k;
    req.seed = o.seed + i;
    audit(synth.synthesize_zero_shot(req), static_cast<int>(stress[i].size()));
  }

  json doc = to_json(report);
  doc["label"] = o.label;
  doc["seed"] = o.seed;
  doc["stress_sentences"] = o.stress;
  write_text(o.out / "report.json", doc.dump(2) + "\n");
  const fs::path table = o.table.empty() ? artifact_root() / "metrics.csv" : o.table;
  const bool fresh = !fs::exists(table);
  std::ostringstream row;
  if (fresh) row << "label,seed,pitch_dtw,speaker_cos,repeats,skips,error_sentences,sentences\n";
  row.precision(10);
  row << o.label << ',' << o.seed << ',' << report.pitch_dtw << ',' << report.speaker_cos << ',' << report.repeats
      << ',' << report.skips << ',' << report.error_sentences << ',' << report.sentences << '\n';
  if (table.has_parent_path()) fs::create_directories(table.parent_path());
  std::ofstream(table, std::ios::app) << row.str();
  write_run_record(o.out / "run.json", "eval", args, o.seed, {{"report", doc}});
  std::cout << doc.dump(2) << '\n';
  return kExitOk;
}

int dispatch(const std::vector<std::string>& args, bool allow_replay);

int replay(const fs::path& record_path) {
  json record;
  try {
    record = json::parse(read_file(record_path));
  } catch (const json::exception& e) {
    throw ValidationError(record_path.string() + ": " + e.what());
  }
  if (!record.contains("args") || record.value("version", 0) != kRunRecordVersion) {
    throw ValidationError(record_path.string() + ": not a run record");
  }
  return dispatch(record.at("args").get<std::vector<std::string>>(), false);
}

int dispatch(const std::vector<std::string>& args, bool allow_replay) {
  CLI::App app{"desk-scale zero-shot TTS toolkit", "megalab"};
  app.require_subcommand(0, 1);
  std::string replay_path;
  if (allow_replay) app.add_option("--replay", replay_path, "re-run the command stored in a run-record file");

  const fs::path home = artifact_root();

  PrepareOptions prep;
  prep.out = home / "data";
  auto* prepare = app.add_subcommand("prepare", "build a manifest from the synthetic generator or a raw corpus");
  prepare->add_flag("--synthetic", prep.synthetic, "generate the factor-controlled synthetic corpus");
  prepare->add_option("--raw", prep.raw, "tab-separated aligned corpus");
  prepare->add_option("--out", prep.out, "output directory");
  prepare->add_option("--speakers", prep.speakers)->check(CLI::PositiveNumber);
  prepare->add_option("--per-speaker", prep.per_speaker)->check(CLI::PositiveNumber);
  prepare->add_option("--seed", prep.seed);
  prepare->add_option("--vocab", prep.vocab)->check(CLI::PositiveNumber);
  prepare->add_option("--min-phonemes", prep.min_phonemes)->check(CLI::PositiveNumber);
  prepare->add_option("--max-phonemes", prep.max_phonemes)->check(CLI::PositiveNumber);
  prepare->add_option("--leak", prep.leak);
  prepare->add_option("--noise", prep.noise);

  TrainOptions tr;
  tr.ckpt_dir = home / "checkpoints";
  auto* train = app.add_subcommand("train", "train stage 1 (disentangler) or stage 2 (P-LLM); resumable");
  train->add_option("--stage", tr.stage)->required()->check(CLI::IsMember({1, 2}));
  train->add_option("--manifest", tr.manifest)->required();
  train->add_option("--ckpt-dir", tr.ckpt_dir);
  train->add_option("--steps", tr.steps, "total steps to reach (default: config total_steps)");
  train->add_option("--seed", tr.seed);
  train->add_option("--save-every", tr.save_every)->check(CLI::PositiveNumber);
  train->add_option("--config", tr.config, "INI config; overrides preset and flags");
  train->add_option("--preset", tr.preset)->check(CLI::IsMember({"toy", "full"}));
  train->add_option("--batch-size", tr.batch_size)->check(CLI::PositiveNumber);
  train->add_option("--lr", tr.learning_rate)->check(CLI::PositiveNumber);

  SynthOptions so;
  so.out = home / "runs" / "synth";
  auto* synth = app.add_subcommand("synth", "zero-shot synthesis from a prompt utterance");
  synth->add_option("--ckpt", so.ckpt, "stage-2 checkpoint or checkpoint directory")->required();
  synth->add_option("--manifest", so.manifest);
  synth->add_option("--prompt", so.prompt, "utterance id or one-record manifest file")->required();
  synth->add_option("--text-phonemes", so.text_phonemes)->required();
  synth->add_option("--phoneme-table", so.phoneme_table);
  synth->add_option("--k", so.k)->check(CLI::PositiveNumber);
  synth->add_option("--seed", so.seed);
  synth->add_option("--out", so.out);
  synth->add_option("--vocoder", so.vocoder, "griffin-lim[:iters] or external:<command with {mel} {wav}>");

  EditOptions eo;
  eo.out = home / "runs" / "edit";
  auto* edit = app.add_subcommand("edit", "regenerate the prosody of phonemes [L, R) of an utterance");
  edit->add_option("--ckpt", eo.ckpt)->required();
  edit->add_option("--manifest", eo.manifest)->required();
  edit->add_option("--utt", eo.utt)->required();
  edit->add_option("--L", eo.left)->required();
  edit->add_option("--R", eo.right)->required();
  edit->add_option("--N", eo.candidates)->check(CLI::PositiveNumber);
  edit->add_option("--k", eo.k)->check(CLI::PositiveNumber);
  edit->add_option("--seed", eo.seed);
  edit->add_option("--replacement", eo.replacement, "phoneme file replacing [L, R)");
  edit->add_option("--phoneme-table", eo.phoneme_table);
  edit->add_option("--out", eo.out);
  edit->add_option("--vocoder", eo.vocoder);

  EvalOptions ev;
  ev.out = home / "runs" / "eval";
  auto* eval = app.add_subcommand("eval", "objective metrics, or the bottleneck sweep with --sweep");
  eval->add_option("--ckpt", ev.ckpt);
  eval->add_option("--manifest", ev.manifest);
  eval->add_option("--sweep", ev.sweep, "INI sweep description");
  eval->add_option("--out", ev.out);
  eval->add_option("--table", ev.table, "aggregate CSV (default: $MEGA_LAB_HOME/metrics.csv)");
  eval->add_option("--k", ev.k)->check(CLI::PositiveNumber);
  eval->add_option("--seed", ev.seed);
  eval->add_option("--stress", ev.stress, "extra synthetic stress sentences for the robustness audit")
      ->check(CLI::NonNegativeNumber);
  eval->add_option("--label", ev.label);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    (void)app.exit(e);
    return kExitValidation;
  }

  if (!replay_path.empty()) {
    if (app.get_subcommands().size() > 0) throw ValidationError("--replay takes no subcommand");
    return replay(replay_path);
  }
  if (prepare->parsed()) return cmd_prepare(prep, args);
  if (train->parsed()) return tr.stage == 1 ? train_stage_one_cmd(tr, args) : train_stage_two_cmd(tr, args);
  if (synth->parsed()) return cmd_synth(so, args);
  if (edit->parsed()) return cmd_edit(eo, args);
  if (eval->parsed()) return cmd_eval(ev, args);
  std::cout << app.help();
  return kExitValidation;
}

}  // namespace

fs::path artifact_root() {
  const char* env = std::getenv("MEGA_LAB_HOME");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("megalab_home");
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const CompatibilityError*>(&e) != nullptr) return kExitCompatibility;
  if (dynamic_cast<const MissingArtifactError*>(&e) != nullptr) return kExitMissing;
  if (dynamic_cast<const ValidationError*>(&e) != nullptr) return kExitValidation;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return kExitValidation;
  return kExitInternal;
}

int run(const std::vector<std::string>& args) {
  try {
    return dispatch(args, true);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  }
}

}  // namespace megalab::cli

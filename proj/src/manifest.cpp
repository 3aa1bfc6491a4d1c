#include "megalab/manifest.hpp"

#include <spdlog/spdlog.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "megalab/error.hpp"

namespace megalab {

using nlohmann::json;

void validate(const PhonemeUtterance& utt) {
  if (utt.durations.size() != utt.phonemes.size()) {
    throw ValidationError(utt.utterance_id + ": " + std::to_string(utt.phonemes.size()) + " phonemes but " +
                          std::to_string(utt.durations.size()) + " durations");
  }
  long long total = 0;
  for (int d : utt.durations) {
    if (d < 0) throw ValidationError(utt.utterance_id + ": negative duration");
    total += d;
  }
  if (total != utt.mel.frames()) {
    throw ValidationError(utt.utterance_id + ": durations sum to " + std::to_string(total) + " but mel has " +
                          std::to_string(utt.mel.frames()) + " frames");
  }
}

std::map<std::string, std::vector<std::size_t>> Manifest::speaker_groups() const {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) groups[records[i].speaker_id].push_back(i);
  return groups;
}

const PhonemeUtterance* Manifest::find(const std::string& utterance_id) const {
  for (const auto& r : records) {
    if (r.utterance_id == utterance_id) return &r;
  }
  return nullptr;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::istringstream ss(text);
  std::string tok;
  while (ss >> tok) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      throw ValidationError("not an integer: '" + tok + "'");
    }
    if (used != tok.size()) throw ValidationError("not an integer: '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

std::string format_int_list(const std::vector<int>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(values[i]);
  }
  return out;
}

namespace {

json factors_to_json(const SyntheticFactors& f) {
  return json{{"speaker_index", f.speaker_index},
              {"prosody_states", f.prosody_states},
              {"pitch_hz", f.pitch_hz},
              {"energy", f.energy},
              {"envelope", f.envelope}};
}

SyntheticFactors factors_from_json(const json& j) {
  SyntheticFactors f;
  f.speaker_index = j.at("speaker_index").get<int>();
  f.prosody_states = j.at("prosody_states").get<std::vector<int>>();
  f.pitch_hz = j.at("pitch_hz").get<std::vector<double>>();
  f.energy = j.at("energy").get<std::vector<double>>();
  f.envelope = j.at("envelope").get<std::vector<double>>();
  return f;
}

}  // namespace

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest manifest;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    PhonemeUtterance utt;
    try {
      utt.utterance_id = j.at("utterance_id").get<std::string>();
      utt.speaker_id = j.at("speaker_id").get<std::string>();
      utt.phonemes = parse_int_list(j.at("phonemes").get<std::string>());
      utt.durations = parse_int_list(j.at("durations").get<std::string>());
      utt.mel_path = j.at("mel_path").get<std::string>();
      if (j.contains("factors")) utt.factors = factors_from_json(j.at("factors"));
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    std::filesystem::path mel_path = utt.mel_path;
    if (mel_path.is_relative()) mel_path = path.parent_path() / mel_path;
    utt.mel = read_mel(mel_path);
    validate(utt);
    manifest.records.push_back(std::move(utt));
  }
  if (manifest.records.empty()) {
    manifest.warnings.push_back(path.string() + ": manifest has no records");
    spdlog::warn("{}: manifest has no records", path.string());
  }
  return manifest;
}

Manifest load_raw_corpus(const std::filesystem::path& path, const AudioConfig& audio) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  Manifest manifest;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line.front() == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (std::size_t tab = line.find('\t'); tab != std::string::npos; tab = line.find('\t', start)) {
      cols.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    cols.push_back(line.substr(start));
    if (cols.size() != 5) {
      throw ValidationError(where + ": expected 5 tab-separated columns (utterance_id, speaker_id, phonemes, "
                            "durations, audio_path), found " + std::to_string(cols.size()));
    }
    PhonemeUtterance utt;
    utt.utterance_id = cols[0];
    utt.speaker_id = cols[1];
    try {
      utt.phonemes = parse_int_list(cols[2]);
      utt.durations = parse_int_list(cols[3]);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    if (utt.utterance_id.empty() || utt.speaker_id.empty() || cols[4].empty()) {
      throw ValidationError(where + ": empty identifier or audio path");
    }
    if (utt.durations.empty()) throw ValidationError(where + ": missing alignment (durations column is empty)");
    std::filesystem::path audio_path = cols[4];
    if (audio_path.is_relative()) audio_path = path.parent_path() / audio_path;
    if (audio_path.extension() == ".wav") {
      const Waveform wave = read_wav(audio_path);
      utt.mel = log_mel(wave.samples, audio);
    } else {
      utt.mel = read_mel(audio_path);
    }
    try {
      validate(utt);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
    manifest.records.push_back(std::move(utt));
  }
  if (manifest.records.empty()) throw ValidationError(path.string() + ": corpus has no records");
  return manifest;
}

void save_manifest(Manifest& manifest, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "mels");
  std::ofstream out(dir / "manifest.jsonl");
  if (!out) throw IoError("cannot write " + (dir / "manifest.jsonl").string());
  for (auto& utt : manifest.records) {
    validate(utt);
    utt.mel_path = "mels/" + utt.utterance_id + ".mel";
    write_mel(dir / utt.mel_path, utt.mel);
    json j{{"utterance_id", utt.utterance_id},
           {"speaker_id", utt.speaker_id},
           {"phonemes", format_int_list(utt.phonemes)},
           {"durations", format_int_list(utt.durations)},
           {"mel_path", utt.mel_path}};
    if (utt.factors) j["factors"] = factors_to_json(*utt.factors);
    out << j.dump() << '\n';
  }
}

const PhonemeUtterance& sample_reference(const Manifest& manifest, const PhonemeUtterance& utt, Rng& rng) {
  std::vector<const PhonemeUtterance*> candidates;
  for (const auto& r : manifest.records) {
    if (r.speaker_id == utt.speaker_id && r.utterance_id != utt.utterance_id) candidates.push_back(&r);
  }
  if (candidates.empty()) {
    throw ValidationError("speaker " + utt.speaker_id + " has no other utterance than " + utt.utterance_id +
                          "; fall back to self-reference");
  }
  return *candidates[uniform_index(rng, candidates.size())];
}

const PhonemeUtterance& sample_reference_or_self(const Manifest& manifest, const PhonemeUtterance& utt, Rng& rng) {
  try {
    return sample_reference(manifest, utt, rng);
  } catch (const ValidationError&) {
    spdlog::warn("speaker {} has a single utterance; {} is used as its own reference", utt.speaker_id,
                 utt.utterance_id);
    return utt;
  }
}

}  // namespace megalab

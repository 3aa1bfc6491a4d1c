#include "megalab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "megalab/error.hpp"

namespace megalab {

namespace {

constexpr char kMagic[8] = {'M', 'E', 'G', 'A', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get_raw(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) {
    throw CompatibilityError("checkpoint: truncated file");
  }
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

void store_parameters(Checkpoint& ckpt, const std::string& prefix, const nn::ParameterSet& params) {
  for (const auto& [name, v] : params.entries()) ckpt.put(prefix + name, v.value());
}

void load_parameters(const Checkpoint& ckpt, const std::string& prefix, nn::ParameterSet& params) {
  for (const auto& [name, v] : params.entries()) {
    const Eigen::MatrixXd& stored = ckpt.require(prefix + name);
    if (stored.rows() != v.rows() || stored.cols() != v.cols()) {
      throw CompatibilityError("checkpoint: array " + prefix + name + " has shape " + std::to_string(stored.rows()) +
                               "x" + std::to_string(stored.cols()) + ", model expects " + std::to_string(v.rows()) +
                               "x" + std::to_string(v.cols()));
    }
    ad::Var handle = v;
    handle.mutable_value() = stored;
  }
}

void store_adam(Checkpoint& ckpt, const std::string& prefix, const nn::ParameterSet& params, const nn::Adam& opt) {
  const auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ckpt.put(prefix + "m/" + entries[i].first, opt.first_moments()[i]);
    ckpt.put(prefix + "v/" + entries[i].first, opt.second_moments()[i]);
  }
}

void load_adam(const Checkpoint& ckpt, const std::string& prefix, const nn::ParameterSet& params, nn::Adam& opt,
               long long step) {
  const auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    opt.first_moments()[i] = ckpt.require(prefix + "m/" + entries[i].first);
    opt.second_moments()[i] = ckpt.require(prefix + "v/" + entries[i].first);
  }
  opt.set_step_count(step);
}

const nlohmann::json& section(const Checkpoint& ckpt, const std::string& name) {
  if (!ckpt.meta.contains(name)) {
    throw MissingArtifactError("checkpoint has no " + name + " section");
  }
  return ckpt.meta.at(name);
}

}  // namespace

const Eigen::MatrixXd* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, m] : arrays) {
    if (n == name) return &m;
  }
  return nullptr;
}

const Eigen::MatrixXd& Checkpoint::require(const std::string& name) const {
  const auto* m = find(name);
  if (m == nullptr) {
    throw CompatibilityError("checkpoint: missing array " + name);
  }
  return *m;
}

void Checkpoint::put(const std::string& name, Eigen::MatrixXd value) {
  for (auto& [n, m] : arrays) {
    if (n == name) {
      m = std::move(value);
      return;
    }
  }
  arrays.emplace_back(name, std::move(value));
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : ckpt.arrays) {
    header["arrays"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  }
  const std::string text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_raw<std::uint32_t>(out, kCheckpointVersion);
  put_raw<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, m] : ckpt.arrays) {
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CompatibilityError("checkpoint: bad magic, not a checkpoint file");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get_raw<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw CompatibilityError("checkpoint: format version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = get_raw<std::uint64_t>(bytes, pos);
  if (pos + header_len > bytes.size()) {
    throw CompatibilityError("checkpoint: truncated header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CompatibilityError(std::string("checkpoint: corrupt header: ") + e.what());
  }
  pos += header_len;
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& entry : header.at("arrays")) {
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t count = static_cast<std::size_t>(rows * cols);
    if (pos + offset + count * sizeof(double) > bytes.size()) {
      throw CompatibilityError("checkpoint: truncated array " + entry.at("name").get<std::string>());
    }
    Eigen::MatrixXd m(rows, cols);
    std::memcpy(m.data(), bytes.data() + pos + offset, count * sizeof(double));
    ckpt.arrays.emplace_back(entry.at("name").get<std::string>(), std::move(m));
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    const std::string bytes = encode_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw MissingArtifactError("checkpoint not found: " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

void store_stage_one(Checkpoint& ckpt, const Disentangler& model, const DisentanglerTrainer* trainer) {
  const std::string ini = to_ini(model.config());
  nlohmann::json s = ckpt.meta.value("stage1", nlohmann::json::object());
  s["config"] = ini;
  s["config_hash"] = config_hash(ini);
  store_parameters(ckpt, "stage1.generator/", model.generator_parameters());
  store_parameters(ckpt, "stage1.discriminator/", model.discriminator_parameters());
  if (trainer != nullptr) {
    const auto& t = *trainer;
    s["step"] = t.global_step();
    s["discriminator_step"] = t.discriminator_optimizer().step_count();
    store_adam(ckpt, "stage1.adam_generator.", model.generator_parameters(), t.generator_optimizer());
    store_adam(ckpt, "stage1.adam_discriminator.", model.discriminator_parameters(), t.discriminator_optimizer());
    const auto& used = t.code_last_used();
    Eigen::MatrixXd last(static_cast<Eigen::Index>(used.size()), 1);
    for (std::size_t i = 0; i < used.size(); ++i) last(static_cast<Eigen::Index>(i), 0) = static_cast<double>(used[i]);
    ckpt.put("stage1.code_last_used", std::move(last));
  } else if (!s.contains("step")) {
    s["step"] = 0;
  }
  ckpt.meta["stage1"] = s;
}

DisentanglerConfig stage_one_config(const Checkpoint& ckpt) {
  return disentangler_config_from_ini(section(ckpt, "stage1").at("config").get<std::string>());
}

std::string stage_one_hash(const Checkpoint& ckpt) {
  return section(ckpt, "stage1").at("config_hash").get<std::string>();
}

Disentangler load_disentangler(const Checkpoint& ckpt) {
  const auto& s = section(ckpt, "stage1");
  const std::string ini = s.at("config").get<std::string>();
  if (config_hash(ini) != s.at("config_hash").get<std::string>()) {
    throw CompatibilityError("checkpoint: stage-1 config does not match its recorded hash");
  }
  Disentangler model(disentangler_config_from_ini(ini), 0);
  load_parameters(ckpt, "stage1.generator/", model.generator_parameters());
  load_parameters(ckpt, "stage1.discriminator/", model.discriminator_parameters());
  return model;
}

void restore_stage_one_trainer(const Checkpoint& ckpt, DisentanglerTrainer& trainer) {
  const auto& s = section(ckpt, "stage1");
  if (to_ini(trainer.model().config()) != s.at("config").get<std::string>()) {
    throw CompatibilityError("checkpoint: stage-1 config differs from the model being trained");
  }
  auto& model = trainer.model();
  load_parameters(ckpt, "stage1.generator/", model.generator_parameters());
  load_parameters(ckpt, "stage1.discriminator/", model.discriminator_parameters());
  load_adam(ckpt, "stage1.adam_generator.", model.generator_parameters(), trainer.generator_optimizer(),
            s.at("step").get<long long>());
  load_adam(ckpt, "stage1.adam_discriminator.", model.discriminator_parameters(), trainer.discriminator_optimizer(),
            s.at("discriminator_step").get<long long>());
  const Eigen::MatrixXd& last = ckpt.require("stage1.code_last_used");
  auto& used = trainer.code_last_used();
  if (static_cast<std::size_t>(last.rows()) != used.size()) {
    throw CompatibilityError("checkpoint: codebook size differs");
  }
  for (std::size_t i = 0; i < used.size(); ++i) used[i] = static_cast<long long>(last(static_cast<Eigen::Index>(i), 0));
}

void store_stage_two(Checkpoint& ckpt, const PLLM& model, const PLLMTrainer* trainer) {
  const std::string ini = to_ini(model.config());
  nlohmann::json s = ckpt.meta.value("stage2", nlohmann::json::object());
  s["config"] = ini;
  s["config_hash"] = config_hash(ini);
  s["stage1_config_hash"] = stage_one_hash(ckpt);
  store_parameters(ckpt, "stage2.pllm/", model.parameters());
  if (trainer != nullptr) {
    const auto& t = *trainer;
    s["step"] = t.global_step();
    store_adam(ckpt, "stage2.adam.", model.parameters(), t.optimizer());
  } else if (!s.contains("step")) {
    s["step"] = 0;
  }
  ckpt.meta["stage2"] = s;
}

PLLMConfig stage_two_config(const Checkpoint& ckpt) {
  return pllm_config_from_ini(section(ckpt, "stage2").at("config").get<std::string>());
}

PLLM load_pllm(const Checkpoint& ckpt) {
  const auto& s = section(ckpt, "stage2");
  const std::string ini = s.at("config").get<std::string>();
  if (config_hash(ini) != s.at("config_hash").get<std::string>()) {
    throw CompatibilityError("checkpoint: stage-2 config does not match its recorded hash");
  }
  PLLM model(pllm_config_from_ini(ini), 0);
  load_parameters(ckpt, "stage2.pllm/", model.parameters());
  return model;
}

void restore_stage_two_trainer(const Checkpoint& ckpt, PLLMTrainer& trainer) {
  const auto& s = section(ckpt, "stage2");
  if (to_ini(trainer.model().config()) != s.at("config").get<std::string>()) {
    throw CompatibilityError("checkpoint: stage-2 config differs from the model being trained");
  }
  auto& model = trainer.model();
  load_parameters(ckpt, "stage2.pllm/", model.parameters());
  load_adam(ckpt, "stage2.adam.", model.parameters(), trainer.optimizer(), s.at("step").get<long long>());
}

void check_stage_compatibility(const Checkpoint& ckpt) {
  const auto& s2 = section(ckpt, "stage2");
  if (s2.at("stage1_config_hash").get<std::string>() != stage_one_hash(ckpt)) {
    throw CompatibilityError("checkpoint: P-LLM was trained against stage-1 config " +
                             s2.at("stage1_config_hash").get<std::string>() + ", found " + stage_one_hash(ckpt));
  }
  const DisentanglerConfig d = stage_one_config(ckpt);
  const PLLMConfig p = stage_two_config(ckpt);
  if (p.codebook_size != d.prosody.codebook_size || p.content_dim != d.content.hidden ||
      p.timbre_dim != d.timbre.hidden) {
    throw CompatibilityError("checkpoint: P-LLM widths (codebook " + std::to_string(p.codebook_size) + ", content " +
                             std::to_string(p.content_dim) + ", timbre " + std::to_string(p.timbre_dim) +
                             ") do not match the stage-1 model");
  }
}

}  // namespace megalab

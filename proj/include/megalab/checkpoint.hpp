#pragma once

// Versioned binary checkpoint container:
//
//   "MEGACKPT" | u32 version | u64 header bytes | JSON header | float64 data
//
// The JSON header carries free-form metadata plus an index of named arrays
// (rows, cols, byte offset into the data block). Arrays are stored
// column-major, little endian, so values round-trip bit-exactly.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "megalab/disentangler.hpp"
#include "megalab/pllm.hpp"

namespace megalab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Eigen::MatrixXd>> arrays;

  [[nodiscard]] const Eigen::MatrixXd* find(const std::string& name) const;
  // Throws CompatibilityError when absent.
  [[nodiscard]] const Eigen::MatrixXd& require(const std::string& name) const;
  void put(const std::string& name, Eigen::MatrixXd value);
  [[nodiscard]] bool has_section(const std::string& section) const { return meta.contains(section); }
};

[[nodiscard]] std::string encode_checkpoint(const Checkpoint& ckpt);
[[nodiscard]] Checkpoint decode_checkpoint(const std::string& bytes);
// Written to a temporary file and renamed into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// MissingArtifactError if absent, CompatibilityError on a foreign or newer file.
[[nodiscard]] Checkpoint read_checkpoint(const std::filesystem::path& path);

// Stage-1 section: generator and discriminator parameters, Adam moments and
// step counts, code usage bookkeeping and the config snapshot.
void store_stage_one(Checkpoint& ckpt, const Disentangler& model, const DisentanglerTrainer* trainer);
[[nodiscard]] DisentanglerConfig stage_one_config(const Checkpoint& ckpt);
[[nodiscard]] std::string stage_one_hash(const Checkpoint& ckpt);
[[nodiscard]] Disentangler load_disentangler(const Checkpoint& ckpt);
void restore_stage_one_trainer(const Checkpoint& ckpt, DisentanglerTrainer& trainer);

// Stage-2 section; records the hash of the stage-1 config it was trained on.
void store_stage_two(Checkpoint& ckpt, const PLLM& model, const PLLMTrainer* trainer);
[[nodiscard]] PLLMConfig stage_two_config(const Checkpoint& ckpt);
[[nodiscard]] PLLM load_pllm(const Checkpoint& ckpt);
void restore_stage_two_trainer(const Checkpoint& ckpt, PLLMTrainer& trainer);

// Throws CompatibilityError unless the checkpoint holds both stages and the
// P-LLM was trained against this stage-1 config with matching widths.
void check_stage_compatibility(const Checkpoint& ckpt);

}  // namespace megalab

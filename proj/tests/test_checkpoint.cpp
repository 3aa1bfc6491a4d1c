#include "doctest.h"

#include "megalab/checkpoint.hpp"
#include "megalab/error.hpp"
#include "megalab/synthetic.hpp"
#include "test_util.hpp"

using namespace megalab;

namespace {

Manifest small_set() {
  SyntheticFactorSpec spec;
  spec.n_speakers = 2;
  spec.utterances_per_speaker = 3;
  return generate_synthetic_dataset(spec);
}

bool same_parameters(const nn::ParameterSet& a, const nn::ParameterSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.entries()[i].first != b.entries()[i].first) return false;
    if (a.entries()[i].second.value() != b.entries()[i].second.value()) return false;
  }
  return true;
}

DisentanglerConfig tiny_config() {
  DisentanglerConfig cfg = toy_disentangler_config();
  cfg.optimizer.batch_size = 2;
  cfg.dead_code_steps = 3;
  return cfg;
}

}  // namespace

TEST_CASE("container round trip is bit exact") {
  Checkpoint ckpt;
  ckpt.meta["note"] = "x";
  Rng rng = make_rng(1, "ckpt");
  ckpt.put("a", nn::init_normal(3, 4, 1.0, rng));
  ckpt.put("b", Eigen::MatrixXd(0, 2));
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ckpt));
  CHECK(back.meta == ckpt.meta);
  REQUIRE(back.arrays.size() == 2);
  CHECK(back.require("a") == ckpt.require("a"));
  CHECK(back.require("b").cols() == 2);
  CHECK_THROWS_AS((void)back.require("c"), CompatibilityError);
}

TEST_CASE("foreign, truncated and missing files are rejected distinctly") {
  testing::TempDir dir;
  CHECK_THROWS_AS((void)read_checkpoint(dir / "absent.ckpt"), MissingArtifactError);
  CHECK_THROWS_AS((void)decode_checkpoint("not a checkpoint"), CompatibilityError);
  Checkpoint ckpt;
  ckpt.put("a", Eigen::MatrixXd::Ones(4, 4));
  std::string bytes = encode_checkpoint(ckpt);
  CHECK_THROWS_AS((void)decode_checkpoint(bytes.substr(0, bytes.size() - 8)), CompatibilityError);
  bytes[8] = 9;  // version field
  CHECK_THROWS_AS((void)decode_checkpoint(bytes), CompatibilityError);
}

TEST_CASE("stage-1 resume continues bit-identically") {
  const Manifest data = small_set();
  testing::TempDir dir;

  Disentangler straight(tiny_config(), 3);
  DisentanglerTrainer straight_trainer(straight);
  train_stage_one(straight_trainer, data, 8, 21);

  {
    Disentangler first(tiny_config(), 3);
    DisentanglerTrainer trainer(first);
    train_stage_one(trainer, data, 4, 21);
    Checkpoint ckpt;
    store_stage_one(ckpt, first, &trainer);
    write_checkpoint(dir / "s1.ckpt", ckpt);
  }
  const Checkpoint ckpt = read_checkpoint(dir / "s1.ckpt");
  CHECK(ckpt.meta["stage1"]["step"] == 4);
  Disentangler resumed = load_disentangler(ckpt);
  DisentanglerTrainer trainer(resumed);
  restore_stage_one_trainer(ckpt, trainer);
  CHECK(trainer.global_step() == 4);
  train_stage_one(trainer, data, 4, 21);
  CHECK(trainer.global_step() == 8);
  CHECK(same_parameters(resumed.generator_parameters(), straight.generator_parameters()));
  CHECK(same_parameters(resumed.discriminator_parameters(), straight.discriminator_parameters()));
  CHECK(trainer.code_last_used() == straight_trainer.code_last_used());
  for (std::size_t i = 0; i < trainer.generator_optimizer().first_moments().size(); ++i) {
    CHECK(trainer.generator_optimizer().first_moments()[i] == straight_trainer.generator_optimizer().first_moments()[i]);
    CHECK(trainer.generator_optimizer().second_moments()[i] ==
          straight_trainer.generator_optimizer().second_moments()[i]);
  }
}

TEST_CASE("restoring into a differently configured trainer is a compatibility error") {
  Disentangler model(tiny_config(), 1);
  Checkpoint ckpt;
  store_stage_one(ckpt, model, nullptr);
  DisentanglerConfig other = tiny_config();
  other.commit_weight = 0.5;
  Disentangler different(other, 1);
  DisentanglerTrainer trainer(different);
  CHECK_THROWS_AS(restore_stage_one_trainer(ckpt, trainer), CompatibilityError);

  Checkpoint tampered = ckpt;
  tampered.meta["stage1"]["config_hash"] = "0000000000000000";
  CHECK_THROWS_AS((void)load_disentangler(tampered), CompatibilityError);
}

TEST_CASE("stage-2 section records and checks the stage-1 hash") {
  const DisentanglerConfig dcfg = tiny_config();
  Disentangler model(dcfg, 1);
  Checkpoint ckpt;
  CHECK_THROWS_AS(check_stage_compatibility(ckpt), MissingArtifactError);
  store_stage_one(ckpt, model, nullptr);
  CHECK_THROWS_AS((void)load_pllm(ckpt), MissingArtifactError);

  PLLM lm(toy_pllm_config(dcfg.prosody.codebook_size), 2);
  PLLMTrainer trainer(lm);
  store_stage_two(ckpt, lm, &trainer);
  CHECK(ckpt.meta["stage2"]["stage1_config_hash"] == stage_one_hash(ckpt));
  CHECK_NOTHROW(check_stage_compatibility(ckpt));
  const PLLM back = load_pllm(decode_checkpoint(encode_checkpoint(ckpt)));
  CHECK(same_parameters(back.parameters(), lm.parameters()));

  DisentanglerConfig retrained = dcfg;
  retrained.commit_weight = 0.3;
  Disentangler other(retrained, 1);
  Checkpoint mixed = ckpt;
  store_stage_one(mixed, other, nullptr);
  CHECK_THROWS_AS(check_stage_compatibility(mixed), CompatibilityError);

  Checkpoint wrong_width;
  store_stage_one(wrong_width, model, nullptr);
  PLLM wide(toy_pllm_config(dcfg.prosody.codebook_size + 1), 2);
  store_stage_two(wrong_width, wide, nullptr);
  CHECK_THROWS_AS(check_stage_compatibility(wrong_width), CompatibilityError);
}

TEST_CASE("stage-2 resume continues bit-identically") {
  PLLMConfig cfg = toy_pllm_config(4);
  cfg.content_dim = 4;
  cfg.timbre_dim = 4;
  auto batch = [&](int step) {
    Rng rng = make_rng(5, "lm", static_cast<std::uint64_t>(step));
    PLLMExample ex;
    ex.context.timbre = nn::init_normal(1, 4, 1.0, rng);
    ex.context.target_content = nn::init_normal(5, 4, 1.0, rng);
    ex.context.prompt_content.resize(0, 4);
    for (int i = 0; i < 5; ++i) ex.targets.push_back(static_cast<int>(uniform_index(rng, 4)));
    return std::vector<PLLMExample>{ex};
  };
  PLLM straight(cfg, 1);
  PLLMTrainer st(straight);
  for (int i = 0; i < 6; ++i) (void)st.step(batch(i));

  Disentangler dis(tiny_config(), 1);
  Checkpoint ckpt;
  store_stage_one(ckpt, dis, nullptr);
  {
    PLLM first(cfg, 1);
    PLLMTrainer t(first);
    for (int i = 0; i < 3; ++i) (void)t.step(batch(i));
    store_stage_two(ckpt, first, &t);
  }
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ckpt));
  PLLM resumed = load_pllm(back);
  PLLMTrainer rt(resumed);
  restore_stage_two_trainer(back, rt);
  for (int i = 3; i < 6; ++i) (void)rt.step(batch(i));
  CHECK(same_parameters(resumed.parameters(), straight.parameters()));
}

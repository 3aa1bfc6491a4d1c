#include "megalab/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdio>
#include <sstream>

#include "megalab/error.hpp"
#include "megalab/manifest.hpp"
#include "megalab/nn.hpp"
#include "megalab/rng.hpp"

namespace megalab {

namespace pt = boost::property_tree;

namespace {

template <typename F>
void visit_optimizer(const std::string& s, OptimizerConfig& o, F&& f) {
  f(s + ".learning_rate", o.learning_rate);
  f(s + ".beta1", o.beta1);
  f(s + ".beta2", o.beta2);
  f(s + ".epsilon", o.epsilon);
  f(s + ".warmup_steps", o.warmup_steps);
  f(s + ".noam_decay", o.noam_decay);
  f(s + ".clip_norm", o.clip_norm);
  f(s + ".batch_size", o.batch_size);
  f(s + ".total_steps", o.total_steps);
}

template <typename F>
void visit(DisentanglerConfig& c, F&& f) {
  f("mel.bins", c.mel_bins);
  f("mel.low_bins", c.low_bins);
  f("prosody_encoder.frame_layers", c.prosody.frame_layers);
  f("prosody_encoder.phoneme_layers", c.prosody.phoneme_layers);
  f("prosody_encoder.hidden", c.prosody.hidden);
  f("prosody_encoder.kernel", c.prosody.kernel);
  f("prosody_encoder.codebook_size", c.prosody.codebook_size);
  f("prosody_encoder.code_dim", c.prosody.code_dim);
  f("content_encoder.vocab_size", c.content.vocab_size);
  f("content_encoder.layers", c.content.layers);
  f("content_encoder.heads", c.content.heads);
  f("content_encoder.hidden", c.content.hidden);
  f("content_encoder.kernel", c.content.kernel);
  f("content_encoder.filter", c.content.filter);
  f("timbre_encoder.layers", c.timbre.layers);
  f("timbre_encoder.hidden", c.timbre.hidden);
  f("timbre_encoder.kernel", c.timbre.kernel);
  f("mel_decoder.layers", c.decoder.layers);
  f("mel_decoder.hidden", c.decoder.hidden);
  f("mel_decoder.kernel", c.decoder.kernel);
  f("duration_predictor.layers", c.duration.layers);
  f("duration_predictor.hidden", c.duration.hidden);
  f("duration_predictor.kernel", c.duration.kernel);
  f("discriminator.windows", c.discriminator.windows);
  f("discriminator.conv_layers", c.discriminator.conv_layers);
  f("discriminator.hidden", c.discriminator.hidden);
  f("loss.commit_weight", c.commit_weight);
  f("loss.adversarial_weight", c.adversarial_weight);
  f("loss.duration_weight", c.duration_weight);
  f("loss.dead_code_steps", c.dead_code_steps);
  visit_optimizer("optimizer", c.optimizer, f);
}

template <typename F>
void visit(PLLMConfig& c, F&& f) {
  f("pllm.layers", c.layers);
  f("pllm.heads", c.heads);
  f("pllm.hidden", c.hidden);
  f("pllm.filter", c.filter);
  f("pllm.kernel", c.kernel);
  f("pllm.codebook_size", c.codebook_size);
  f("pllm.content_dim", c.content_dim);
  f("pllm.timbre_dim", c.timbre_dim);
  f("pllm.context_sentences", c.context_sentences);
  f("pllm.max_positions", c.max_positions);
  f("pllm.top_k", c.top_k);
  f("pllm.eos_weight", c.eos_weight);
  f("pllm.max_candidates", c.max_candidates);
  visit_optimizer("pllm_optimizer", c.optimizer, f);
}

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
std::string format_value(int v) { return std::to_string(v); }
std::string format_value(long long v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <typename T>
void parse_value(const std::string& key, const std::string& text, T& out) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") {
        out = true;
      } else if (text == "false" || text == "0") {
        out = false;
      } else {
        throw std::invalid_argument(text);
      }
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      std::string spaced = text;
      for (char& ch : spaced) {
        if (ch == ',') ch = ' ';
      }
      out = parse_int_list(spaced);
    } else if constexpr (std::is_same_v<T, double>) {
      out = std::stod(text);
    } else if constexpr (std::is_same_v<T, long long>) {
      out = std::stoll(text);
    } else {
      out = std::stoi(text);
    }
  } catch (const std::exception&) {
    throw ValidationError("config key " + key + ": cannot parse '" + text + "'");
  }
}

template <typename Config>
std::string write_ini(Config config) {
  pt::ptree tree;
  visit(config, [&](const std::string& key, auto& value) { tree.put(key, format_value(value)); });
  std::ostringstream out;
  pt::write_ini(out, tree);
  return out.str();
}

template <typename Config>
Config read_ini(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  Config config;
  visit(config, [&](const std::string& key, auto& value) {
    if (auto v = tree.get_optional<std::string>(key)) parse_value(key, *v, value);
  });
  validate(config);
  return config;
}

void require_positive(int v, const char* what) {
  if (v <= 0) throw ValidationError(std::string("config: ") + what + " must be positive");
}

}  // namespace

nn::AdamConfig adam_config(const OptimizerConfig& o) {
  return {.learning_rate = o.learning_rate,
          .beta1 = o.beta1,
          .beta2 = o.beta2,
          .epsilon = o.epsilon,
          .warmup_steps = o.warmup_steps,
          .noam_decay = o.noam_decay,
          .clip_norm = o.clip_norm};
}

void validate(const DisentanglerConfig& c) {
  for (auto [v, name] : {std::pair{c.mel_bins, "mel.bins"},
                         {c.low_bins, "mel.low_bins"},
                         {c.prosody.hidden, "prosody_encoder.hidden"},
                         {c.prosody.kernel, "prosody_encoder.kernel"},
                         {c.prosody.code_dim, "prosody_encoder.code_dim"},
                         {c.content.vocab_size, "content_encoder.vocab_size"},
                         {c.content.hidden, "content_encoder.hidden"},
                         {c.content.heads, "content_encoder.heads"},
                         {c.content.filter, "content_encoder.filter"},
                         {c.timbre.hidden, "timbre_encoder.hidden"},
                         {c.timbre.kernel, "timbre_encoder.kernel"},
                         {c.decoder.hidden, "mel_decoder.hidden"},
                         {c.decoder.layers, "mel_decoder.layers"},
                         {c.duration.hidden, "duration_predictor.hidden"},
                         {c.discriminator.hidden, "discriminator.hidden"},
                         {c.discriminator.conv_layers, "discriminator.conv_layers"},
                         {c.optimizer.batch_size, "optimizer.batch_size"}}) {
    require_positive(v, name);
  }
  if (c.prosody.codebook_size < 1) throw ValidationError("config: codebook_size must be positive");
  if (c.low_bins > c.mel_bins) throw ValidationError("config: low_bins exceeds mel bins");
  if (c.content.hidden % c.content.heads != 0) throw ValidationError("config: content hidden not divisible by heads");
  if (c.discriminator.windows.empty()) throw ValidationError("config: discriminator needs at least one window");
  for (std::size_t i = 0; i < c.discriminator.windows.size(); ++i) {
    require_positive(c.discriminator.windows[i], "discriminator window");
    if (i > 0 && c.discriminator.windows[i] <= c.discriminator.windows[i - 1]) {
      throw ValidationError("config: discriminator windows must be sorted ascending");
    }
  }
}

void validate(const PLLMConfig& c) {
  for (auto [v, name] : {std::pair{c.layers, "pllm.layers"},
                         {c.heads, "pllm.heads"},
                         {c.hidden, "pllm.hidden"},
                         {c.filter, "pllm.filter"},
                         {c.kernel, "pllm.kernel"},
                         {c.codebook_size, "pllm.codebook_size"},
                         {c.content_dim, "pllm.content_dim"},
                         {c.timbre_dim, "pllm.timbre_dim"},
                         {c.max_positions, "pllm.max_positions"},
                         {c.top_k, "pllm.top_k"},
                         {c.max_candidates, "pllm.max_candidates"}}) {
    require_positive(v, name);
  }
  if (c.hidden % c.heads != 0) throw ValidationError("config: pllm hidden not divisible by heads");
  if (c.top_k > c.codebook_size) throw ValidationError("config: top_k exceeds the code vocabulary");
}

std::string to_ini(const DisentanglerConfig& config) { return write_ini(config); }
std::string to_ini(const PLLMConfig& config) { return write_ini(config); }
DisentanglerConfig disentangler_config_from_ini(const std::string& text) { return read_ini<DisentanglerConfig>(text); }
PLLMConfig pllm_config_from_ini(const std::string& text) { return read_ini<PLLMConfig>(text); }

std::string config_hash(const std::string& canonical_ini) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(canonical_ini)));
  return buf;
}

DisentanglerConfig toy_disentangler_config() {
  DisentanglerConfig c;
  c.prosody = {.frame_layers = 2, .phoneme_layers = 1, .hidden = 32, .kernel = 5, .codebook_size = 8, .code_dim = 4};
  c.content = {.vocab_size = 32, .layers = 1, .heads = 2, .hidden = 32, .kernel = 5, .filter = 64};
  c.timbre = {.layers = 2, .hidden = 32, .kernel = 9};
  c.decoder = {.layers = 3, .hidden = 48, .kernel = 5};
  c.duration = {.layers = 2, .hidden = 32, .kernel = 3};
  c.discriminator = {.windows = {16, 32, 64}, .conv_layers = 3, .hidden = 8};
  c.optimizer.learning_rate = 2e-3;
  c.optimizer.warmup_steps = 100;
  c.optimizer.noam_decay = false;
  c.optimizer.batch_size = 8;
  c.optimizer.total_steps = 2000;
  return c;
}

PLLMConfig toy_pllm_config(int codebook_size) {
  PLLMConfig c;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 32;
  c.filter = 64;
  c.kernel = 3;
  c.codebook_size = codebook_size;
  c.content_dim = 32;
  c.timbre_dim = 32;
  c.max_positions = 256;
  c.top_k = std::min(5, codebook_size);
  c.optimizer.learning_rate = 2e-3;
  c.optimizer.warmup_steps = 100;
  c.optimizer.noam_decay = false;
  c.optimizer.batch_size = 4;
  c.optimizer.total_steps = 2000;
  return c;
}

}  // namespace megalab

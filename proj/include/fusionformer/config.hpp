#pragma once

#include <string>

#include <json.hpp>

#include "fusionformer/errors.hpp"
#include "fusionformer/fusion.hpp"

namespace fusionformer {

// Architecture and loss-weight configuration. The desk default is a small
// model that trains in seconds; paper_scale() records the reference
// configuration (12 layers, width 768) for completeness.
struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int vocab_size = 0;  // set from the vocabulary
  int max_positions = 256;
  int n_token_types = 4;
  double dropout = 0.1;
  FusionMethod fusion_method = FusionMethod::kAvg;
  // Weights of the persona / history / prediction loss terms.
  double alpha = 0.5;
  double beta = 0.5;
  double gamma = 1.0;

  static ModelConfig paper_scale() {
    ModelConfig c;
    c.n_layers = 12;
    c.d_model = 768;
    c.n_heads = 12;
    c.max_positions = 1024;
    return c;
  }

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers <= 0) throw ConfigError("n_layers must be positive");
    if (d_model <= 0) throw ConfigError("d_model must be positive");
    if (n_heads <= 0) throw ConfigError("n_heads must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    if (max_positions <= 0) throw ConfigError("max_positions must be positive");
    if (n_token_types <= 0) throw ConfigError("n_token_types must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
    if (alpha < 0.0 || beta < 0.0 || gamma < 0.0)
      throw ConfigError("loss weights must be nonnegative");
    if (alpha == 0.0 && beta == 0.0 && gamma == 0.0)
      throw ConfigError("at least one loss weight must be positive");
  }
};

// Full run configuration: model plus training, decoding and data settings.
// Training defaults mirror the reference recipe (Adam at 5e-4 with 0.002
// warmup proportion and linear decay, fusion module at 5x, 5 epochs,
// batch 256, history truncated to the latest 7 utterances, beam size 3).
struct RunConfig {
  ModelConfig model;
  int epochs = 5;
  int batch_size = 256;
  uint64_t seed = 0;
  double lr = 5e-4;
  double warmup_proportion = 0.002;
  double fusion_lr_multiplier = 5.0;
  double grad_clip_norm = 1.0;
  int max_history = 7;
  int beam_size = 3;
  int max_decode_len = 24;
  double length_penalty_exponent = 0.6;

  std::string corpus_path;
  std::string vocab_path;
  std::string checkpoint_path;
  std::string loss_log_path;

  void validate() const {
    model.validate();
    if (epochs <= 0) throw ConfigError("epochs must be positive");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (warmup_proportion < 0.0 || warmup_proportion >= 1.0)
      throw ConfigError("warmup_proportion must lie in [0,1)");
    if (fusion_lr_multiplier <= 0.0) throw ConfigError("fusion_lr_multiplier must be positive");
    if (grad_clip_norm <= 0.0) throw ConfigError("grad_clip_norm must be positive");
    if (max_history <= 0) throw ConfigError("max_history must be positive");
    if (beam_size <= 0) throw ConfigError("beam_size must be positive");
    if (max_decode_len <= 0) throw ConfigError("max_decode_len must be positive");
    if (length_penalty_exponent < 0.0)
      throw ConfigError("length_penalty_exponent must be nonnegative");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"n_layers", c.n_layers},
                        {"d_model", c.d_model},
                        {"n_heads", c.n_heads},
                        {"vocab_size", c.vocab_size},
                        {"max_positions", c.max_positions},
                        {"n_token_types", c.n_token_types},
                        {"dropout", c.dropout},
                        {"fusion_method", to_string(c.fusion_method)},
                        {"alpha", c.alpha},
                        {"beta", c.beta},
                        {"gamma", c.gamma}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.n_token_types = j.value("n_token_types", c.n_token_types);
  c.dropout = j.value("dropout", c.dropout);
  if (j.contains("fusion_method"))
    c.fusion_method = parse_fusion_method(j.at("fusion_method").get<std::string>());
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.gamma = j.value("gamma", c.gamma);
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = to_json(c.model);
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["lr"] = c.lr;
  j["warmup_proportion"] = c.warmup_proportion;
  j["fusion_lr_multiplier"] = c.fusion_lr_multiplier;
  j["grad_clip_norm"] = c.grad_clip_norm;
  j["max_history"] = c.max_history;
  j["beam_size"] = c.beam_size;
  j["max_decode_len"] = c.max_decode_len;
  j["length_penalty_exponent"] = c.length_penalty_exponent;
  j["corpus_path"] = c.corpus_path;
  j["vocab_path"] = c.vocab_path;
  j["checkpoint_path"] = c.checkpoint_path;
  j["loss_log_path"] = c.loss_log_path;
  return j;
}

// Every field is optional; absent fields keep their defaults.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.model = model_config_from_json(j);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.lr = j.value("lr", c.lr);
  c.warmup_proportion = j.value("warmup_proportion", c.warmup_proportion);
  c.fusion_lr_multiplier = j.value("fusion_lr_multiplier", c.fusion_lr_multiplier);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  c.max_history = j.value("max_history", c.max_history);
  c.beam_size = j.value("beam_size", c.beam_size);
  c.max_decode_len = j.value("max_decode_len", c.max_decode_len);
  c.length_penalty_exponent = j.value("length_penalty_exponent", c.length_penalty_exponent);
  c.corpus_path = j.value("corpus_path", c.corpus_path);
  c.vocab_path = j.value("vocab_path", c.vocab_path);
  c.checkpoint_path = j.value("checkpoint_path", c.checkpoint_path);
  c.loss_log_path = j.value("loss_log_path", c.loss_log_path);
  return c;
}

}  // namespace fusionformer

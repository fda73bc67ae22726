#pragma once

#include <nlohmann/json.hpp>
#include <string>

#include "msat/model/transformer.hpp"
#include "msat/tok/tokenizer.hpp"
#include "msat/train/train.hpp"

namespace msat {

// Resolved run configuration. External form is JSON with flat dotted keys
// ("model.n_layers": 4); CLI flags override file values which override the
// per-environment defaults. The resolved config is persisted next to outputs.
struct RunConfig {
  std::string env_name = "rooms";

  std::string scheme = "msat";
  bool use_pe = true;
  int32_t max_timestep = 0;  // 0 = use the environment's max episode length

  int32_t n_layers = 4;
  int32_t n_heads = 4;
  int32_t d_model = 64;
  float dropout_embed = 0.1f;
  float dropout_resid = 0.1f;
  float dropout_attn = 0.1f;

  TrainConfig train;

  int64_t data_steps = 100000;
  double data_epsilon = 0.1;

  // Applies the env-dependent defaults (return scale, eval target, PE size).
  void apply_env_defaults();

  // Applies a flat dotted-key JSON object; unknown keys are errors.
  void apply_flat_json(const nlohmann::json& flat);

  nlohmann::json to_flat_json() const;
  uint32_t config_hash() const;

  TokenizerConfig tokenizer_config(const MultiDiscreteSpec& spec, const ObsShape& obs) const;
  ModelConfig model_config(const MultiDiscreteSpec& spec) const;

  void validate() const;
};

// Loads `file` (optional, may be empty path) and applies `overrides` on top of
// env defaults. Override application order: file, then overrides.
RunConfig resolve_run_config(const std::filesystem::path& file, const nlohmann::json& overrides);

}  // namespace msat

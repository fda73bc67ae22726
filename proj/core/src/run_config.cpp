#include "msat/run_config.hpp"

#include <fstream>

#include "msat/crc32.hpp"
#include "msat/envs/generate.hpp"

namespace msat {

using nlohmann::json;

void RunConfig::apply_env_defaults() {
  if (env_name == "rooms") {
    train.return_scale = 1.0;
    train.eval_target = 1.2;
  } else if (env_name == "corridor") {
    train.return_scale = 20.0;
    train.eval_target = 29.0;
  } else {
    throw ConfigError("unknown env '" + env_name + "' (valid: corridor, rooms)");
  }
}

void RunConfig::apply_flat_json(const json& flat) {
  if (!flat.is_object()) throw ConfigError("config must be a JSON object with dotted keys");
  for (const auto& [key, value] : flat.items()) {
    try {
      if (key == "env.name") env_name = value.get<std::string>();
      else if (key == "tokenizer.scheme") scheme = value.get<std::string>();
      else if (key == "tokenizer.use_pe") use_pe = value.get<bool>();
      else if (key == "tokenizer.max_timestep") max_timestep = value.get<int32_t>();
      else if (key == "model.n_layers") n_layers = value.get<int32_t>();
      else if (key == "model.n_heads") n_heads = value.get<int32_t>();
      else if (key == "model.d_model") d_model = value.get<int32_t>();
      else if (key == "model.dropout_embed") dropout_embed = value.get<float>();
      else if (key == "model.dropout_resid") dropout_resid = value.get<float>();
      else if (key == "model.dropout_attn") dropout_attn = value.get<float>();
      else if (key == "train.epochs") train.epochs = value.get<int>();
      else if (key == "train.batch_size") train.batch_size = value.get<int64_t>();
      else if (key == "train.context") train.context = value.get<int64_t>();
      else if (key == "train.learning_rate") train.learning_rate = value.get<double>();
      else if (key == "train.warmup_steps") train.warmup_steps = value.get<int64_t>();
      else if (key == "train.grad_clip_norm") train.grad_clip_norm = value.get<double>();
      else if (key == "train.seed") train.seed = value.get<uint64_t>();
      else if (key == "train.eval_episodes") train.eval_episodes = value.get<int>();
      else if (key == "train.eval_target") train.eval_target = value.get<double>();
      else if (key == "train.return_scale") train.return_scale = value.get<double>();
      else if (key == "train.greedy_eval") train.greedy_eval = value.get<bool>();
      else if (key == "data.steps") data_steps = value.get<int64_t>();
      else if (key == "data.epsilon") data_epsilon = value.get<double>();
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("bad value for config key '" + key + "': " + e.what());
    }
  }
}

json RunConfig::to_flat_json() const {
  return json{{"env.name", env_name},
              {"tokenizer.scheme", scheme},
              {"tokenizer.use_pe", use_pe},
              {"tokenizer.max_timestep", max_timestep},
              {"model.n_layers", n_layers},
              {"model.n_heads", n_heads},
              {"model.d_model", d_model},
              {"model.dropout_embed", dropout_embed},
              {"model.dropout_resid", dropout_resid},
              {"model.dropout_attn", dropout_attn},
              {"train.epochs", train.epochs},
              {"train.batch_size", train.batch_size},
              {"train.context", train.context},
              {"train.learning_rate", train.learning_rate},
              {"train.warmup_steps", train.warmup_steps},
              {"train.grad_clip_norm", train.grad_clip_norm},
              {"train.seed", train.seed},
              {"train.eval_episodes", train.eval_episodes},
              {"train.eval_target", train.eval_target},
              {"train.return_scale", train.return_scale},
              {"train.greedy_eval", train.greedy_eval},
              {"data.steps", data_steps},
              {"data.epsilon", data_epsilon}};
}

uint32_t RunConfig::config_hash() const {
  const std::string dump = to_flat_json().dump();
  return crc32(dump.data(), dump.size());
}

TokenizerConfig RunConfig::tokenizer_config(const MultiDiscreteSpec& spec,
                                            const ObsShape& obs) const {
  TokenizerConfig cfg;
  cfg.scheme = parse_scheme(scheme);
  cfg.use_pe = use_pe;
  cfg.d_model = d_model;
  cfg.spec = spec;
  cfg.obs = obs;
  cfg.max_timestep = max_timestep;
  if (cfg.max_timestep <= 0) {
    cfg.max_timestep = static_cast<int32_t>(make_env(env_name)->max_steps());
  }
  return cfg;
}

ModelConfig RunConfig::model_config(const MultiDiscreteSpec& spec) const {
  ModelConfig cfg;
  cfg.n_layers = n_layers;
  cfg.n_heads = n_heads;
  cfg.d_model = d_model;
  cfg.dropout_embed = dropout_embed;
  cfg.dropout_resid = dropout_resid;
  cfg.dropout_attn = dropout_attn;
  cfg.spec = spec;
  const int32_t per_step = parse_scheme(scheme) == Scheme::kSingle ? 3 : 2 + spec.n();
  cfg.max_seq_len = train.context * per_step;
  return cfg;
}

void RunConfig::validate() const {
  make_env(env_name);  // throws on unknown env
  parse_scheme(scheme);
  train.validate();
  if (data_steps <= 0) throw ConfigError("data.steps must be positive");
  if (data_epsilon < 0.0 || data_epsilon >= 1.0) throw ConfigError("data.epsilon must be in [0,1)");
}

RunConfig resolve_run_config(const std::filesystem::path& file, const json& overrides) {
  json file_json = json::object();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open config file " + file.string());
    try {
      in >> file_json;
    } catch (const json::exception& e) {
      throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
    }
  }

  // The env decides the numeric defaults, so pin it down first.
  RunConfig cfg;
  if (overrides.contains("env.name")) cfg.env_name = overrides.at("env.name").get<std::string>();
  else if (file_json.contains("env.name")) cfg.env_name = file_json.at("env.name").get<std::string>();
  cfg.apply_env_defaults();

  cfg.apply_flat_json(file_json);
  cfg.apply_flat_json(overrides);
  cfg.validate();
  return cfg;
}

}  // namespace msat

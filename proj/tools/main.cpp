// Command-line front end: data generation, training, evaluation, the
// ablation matrix, and attention export.
//
// Exit codes: 0 ok, 2 config error, 3 I/O error, 4 training divergence.

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <thread>

#include "msat/data/dataset_io.hpp"
#include "msat/envs/generate.hpp"
#include "msat/interpret/attention.hpp"
#include "msat/model/checkpoint.hpp"
#include "msat/run_config.hpp"
#include "msat/train/ablation.hpp"

namespace {

using msat::ConfigError;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDivergence = 4;

int thread_cap() {
  if (const char* env = std::getenv("MSAT_DT_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1) return cap;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int effective_jobs(int requested) { return std::clamp(requested, 1, thread_cap()); }

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// "1,2,3" or "1..5"
std::vector<uint64_t> parse_seed_list(const std::string& s) {
  std::vector<uint64_t> seeds;
  const auto dots = s.find("..");
  if (dots != std::string::npos) {
    const uint64_t lo = std::stoull(s.substr(0, dots));
    const uint64_t hi = std::stoull(s.substr(dots + 2));
    if (hi < lo) throw ConfigError("bad seed range '" + s + "'");
    for (uint64_t v = lo; v <= hi; ++v) seeds.push_back(v);
  } else {
    for (const auto& part : split_csv(s)) seeds.push_back(std::stoull(part));
  }
  if (seeds.empty()) throw ConfigError("empty seed list");
  return seeds;
}

struct LoadedModel {
  msat::RunConfig cfg;
  std::unique_ptr<msat::Env> env;
  std::unique_ptr<msat::Tokenizer<float>> tokenizer;
  std::unique_ptr<msat::Transformer<float>> model;
};

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  const auto ckpt = msat::load_checkpoint(checkpoint);
  LoadedModel lm;
  lm.cfg.apply_flat_json(ckpt.config);
  lm.cfg.validate();
  lm.env = msat::make_env(lm.cfg.env_name);
  msat::Rng init_rng(0);
  lm.tokenizer = std::make_unique<msat::Tokenizer<float>>(
      lm.cfg.tokenizer_config(lm.env->action_spec(), lm.env->obs_shape()), init_rng);
  lm.model = std::make_unique<msat::Transformer<float>>(
      lm.cfg.model_config(lm.env->action_spec()), init_rng);
  msat::nn::ParamList<float> params;
  lm.tokenizer->collect_params(params);
  lm.model->collect_params(params);
  msat::restore_params(params, ckpt);
  return lm;
}

int cmd_gen_data(const std::string& env_name, int64_t steps, double epsilon, uint64_t seed,
                 const std::string& out) {
  auto env = msat::make_env(env_name);
  std::map<std::string, int> term_hist;
  msat::TrajectoryDataset ds = msat::generate_dataset(*env, steps, epsilon, seed, &term_hist);
  msat::write_dataset(ds, out);

  double total_return = 0;
  for (const auto& ep : ds.episodes) total_return += ep.episode_return;
  std::cout << "env: " << env_name << "\n"
            << "episodes: " << ds.episodes.size() << "\n"
            << "steps: " << ds.total_steps() << "\n"
            << "mean return: " << total_return / static_cast<double>(ds.episodes.size()) << "\n"
            << "termination histogram:\n";
  for (const auto& [cause, count] : term_hist) {
    std::cout << "  " << cause << ": " << count << "\n";
  }
  std::cout << "wrote " << out << "\n";
  return kExitOk;
}

msat::RunConfig config_for_dataset(const std::filesystem::path& config_file,
                                   const msat::TrajectoryDataset& ds, const json& overrides) {
  json with_env = overrides;
  if (with_env.contains("env.name")) {
    if (with_env.at("env.name").get<std::string>() != ds.meta.env) {
      throw ConfigError("config env '" + with_env.at("env.name").get<std::string>() +
                        "' does not match dataset env '" + ds.meta.env + "'");
    }
  }
  with_env["env.name"] = ds.meta.env;
  return msat::resolve_run_config(config_file, with_env);
}

int cmd_train(const std::string& config_file, const json& overrides, const std::string& data_dir,
              const std::string& out_dir, int jobs) {
  msat::TrajectoryDataset ds = msat::read_dataset(data_dir);
  msat::RunConfig cfg = config_for_dataset(config_file, ds, overrides);
  msat::TrainRunArtifacts artifacts = msat::train_run(cfg, ds, out_dir, effective_jobs(jobs));
  const auto& final_eval = artifacts.per_epoch_eval.back();
  std::cout << "trained " << cfg.scheme << (cfg.use_pe ? " with PE" : " no PE") << " for "
            << cfg.train.epochs << " epochs\n"
            << "final eval mean return: " << final_eval.mean << " +/- " << final_eval.stddev
            << " over " << final_eval.returns.size() << " episodes\n"
            << "last checkpoint: " << artifacts.last_checkpoint.string() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, int episodes, const std::string& seeds_str,
             double target, bool has_target, bool greedy, const std::string& out_file, int jobs) {
  if (episodes <= 0) throw ConfigError("--episodes must be positive");
  LoadedModel lm = load_model(checkpoint);
  msat::TrainConfig tc = lm.cfg.train;
  if (has_target) tc.eval_target = target;
  tc.greedy_eval = greedy || tc.greedy_eval;

  const auto seeds = parse_seed_list(seeds_str);
  msat::EvalStats pooled;
  json per_seed = json::array();
  for (uint64_t seed : seeds) {
    msat::Rng rng = msat::Rng(seed).fork(0xEBA1u);
    std::vector<uint64_t> episode_seeds(static_cast<size_t>(episodes));
    for (auto& s : episode_seeds) s = rng.next_u64();
    msat::EvalStats stats =
        msat::evaluate(*lm.model, *lm.tokenizer, *lm.env, tc, episode_seeds, effective_jobs(jobs));
    per_seed.push_back({{"seed", seed},
                        {"mean", stats.mean},
                        {"stddev", stats.stddev},
                        {"returns", stats.returns},
                        {"termination", stats.termination}});
    pooled.returns.insert(pooled.returns.end(), stats.returns.begin(), stats.returns.end());
    for (const auto& [cause, count] : stats.termination) pooled.termination[cause] += count;
  }
  pooled.eval_target = tc.eval_target;
  pooled.greedy = tc.greedy_eval;
  pooled.finalize();

  json doc = {{"checkpoint", checkpoint},
              {"config_hash", lm.cfg.config_hash()},
              {"env", lm.cfg.env_name},
              {"eval_target", tc.eval_target},
              {"greedy", tc.greedy_eval},
              {"episodes_per_seed", episodes},
              {"seeds", seeds},
              {"mean", pooled.mean},
              {"stddev", pooled.stddev},
              {"returns", pooled.returns},
              {"termination", pooled.termination},
              {"per_seed", per_seed}};
  std::cout << "mean return: " << pooled.mean << " +/- " << pooled.stddev << " over "
            << pooled.returns.size() << " episodes\n";
  for (const auto& [cause, count] : pooled.termination) {
    std::cout << "  " << cause << ": " << count << "\n";
  }
  if (!out_file.empty()) {
    std::ofstream out(out_file, std::ios::trunc);
    if (!out) throw msat::IoError("cannot write " + out_file);
    out << doc.dump(2) << "\n";
    std::cout << "wrote " << out_file << "\n";
  }
  return kExitOk;
}

int cmd_ablate(const std::string& config_file, const json& overrides,
               const std::string& schemes_csv, const std::string& pe_csv,
               const std::string& seeds_str, const std::string& data_dir,
               const std::string& out_dir, int jobs) {
  msat::TrajectoryDataset ds = msat::read_dataset(data_dir);
  msat::RunConfig cfg = config_for_dataset(config_file, ds, overrides);

  std::vector<bool> pe_modes;
  for (const auto& mode : split_csv(pe_csv)) {
    if (mode == "on") pe_modes.push_back(true);
    else if (mode == "off") pe_modes.push_back(false);
    else throw ConfigError("bad pe mode '" + mode + "' (valid: on, off)");
  }
  msat::AblationReport report =
      msat::run_ablation(cfg, split_csv(schemes_csv), pe_modes, parse_seed_list(seeds_str), ds,
                         out_dir, effective_jobs(jobs));
  std::cout << report.table();
  int failed = 0;
  for (const auto& cell : report.cells) failed += cell.ok ? 0 : 1;
  if (failed > 0) {
    std::cout << failed << " cell(s) failed; see report.json\n";
  }
  std::cout << "wrote " << (std::filesystem::path(out_dir) / "report.json").string() << "\n";
  return kExitOk;
}

int cmd_attn(const std::string& checkpoint, uint64_t seed, const std::string& format,
             const std::string& out_path, bool every_step) {
  LoadedModel lm = load_model(checkpoint);
  const auto records =
      msat::capture_attention(*lm.model, *lm.tokenizer, *lm.env, lm.cfg.train, seed, every_step);
  msat::export_records(records, out_path, msat::parse_export_format(format));
  std::cout << "captured " << records.size() << " records ("
            << lm.model->config().n_layers << " layers x " << lm.model->config().n_heads
            << " heads)\nwrote " << out_path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-token decision transformer workbench"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate an expert dataset");
  std::string gen_env = "rooms", gen_out;
  int64_t gen_steps = 100000;
  double gen_epsilon = 0.1;
  uint64_t gen_seed = 1;
  gen->add_option("--env", gen_env, "environment: corridor | rooms");
  gen->add_option("--steps", gen_steps, "minimum total steps");
  gen->add_option("--epsilon", gen_epsilon, "per-step action randomization probability");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--out", gen_out, "output dataset directory")->required();

  // shared train-ish flags
  std::string config_file, scheme, pe_mode, data_dir, out_dir;
  uint64_t train_seed = 0;
  bool has_train_seed = false;
  int epochs = -1;
  int jobs = 1;

  auto* train = app.add_subcommand("train", "train one model");
  train->add_option("--config", config_file, "JSON config with flat dotted keys");
  train->add_option("--scheme", scheme, "tokenisation scheme: single | mat | msat");
  train->add_option("--pe", pe_mode, "positional encoding: on | off");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--seed", train_seed, "training seed")->each([&](const std::string&) {
    has_train_seed = true;
  });
  train->add_option("--epochs", epochs, "override train.epochs");
  train->add_option("--jobs", jobs, "parallel eval episodes");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_seeds = "1", eval_out;
  int eval_episodes = 20;
  double eval_target = 0.0;
  bool eval_greedy = false;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--episodes", eval_episodes, "episodes per seed");
  eval->add_option("--seeds", eval_seeds, "seed list: 1,2,3 or 1..5");
  auto* target_opt = eval->add_option("--target", eval_target, "eval target (raw return prompt)");
  eval->add_flag("--greedy", eval_greedy, "argmax instead of sampling");
  eval->add_option("--out", eval_out, "stats JSON output path");
  eval->add_option("--jobs", jobs, "parallel episodes");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train the scheme x PE matrix");
  std::string schemes_csv = "single,mat,msat", pe_csv = "on,off", ablate_seeds = "1";
  ablate->add_option("--config", config_file, "JSON config with flat dotted keys");
  ablate->add_option("--schemes", schemes_csv, "comma-separated schemes");
  ablate->add_option("--pe-modes", pe_csv, "comma-separated: on,off");
  ablate->add_option("--seeds", ablate_seeds, "seed list: 1,2,3 or 1..5");
  ablate->add_option("--data", data_dir, "dataset directory")->required();
  ablate->add_option("--out", out_dir, "output directory")->required();
  ablate->add_option("--jobs", jobs, "parallel cells");

  // attn
  auto* attn = app.add_subcommand("attn", "capture and export attention");
  std::string attn_ckpt, attn_format = "html", attn_out;
  uint64_t attn_seed = 1;
  bool attn_every_step = false;
  attn->add_option("--checkpoint", attn_ckpt, "checkpoint file")->required();
  attn->add_option("--seed", attn_seed, "episode seed");
  attn->add_option("--format", attn_format, "json | html");
  attn->add_option("--out", attn_out, "output path")->required();
  attn->add_flag("--every-step", attn_every_step, "capture every step's window");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_env, gen_steps, gen_epsilon, gen_seed, gen_out);
    json overrides = json::object();
    if (!scheme.empty()) overrides["tokenizer.scheme"] = scheme;
    if (!pe_mode.empty()) {
      if (pe_mode != "on" && pe_mode != "off") throw ConfigError("--pe must be on or off");
      overrides["tokenizer.use_pe"] = pe_mode == "on";
    }
    if (has_train_seed) overrides["train.seed"] = train_seed;
    if (epochs >= 0) overrides["train.epochs"] = epochs;
    if (train->parsed()) return cmd_train(config_file, overrides, data_dir, out_dir, jobs);
    if (eval->parsed()) {
      return cmd_eval(eval_ckpt, eval_episodes, eval_seeds, eval_target, target_opt->count() > 0,
                      eval_greedy, eval_out, jobs);
    }
    if (ablate->parsed()) {
      return cmd_ablate(config_file, overrides, schemes_csv, pe_csv, ablate_seeds, data_dir,
                        out_dir, jobs);
    }
    if (attn->parsed()) {
      return cmd_attn(attn_ckpt, attn_seed, attn_format, attn_out, attn_every_step);
    }
  } catch (const msat::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const msat::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const msat::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

#include "msat/train/ablation.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "msat/envs/generate.hpp"
#include "msat/model/checkpoint.hpp"

namespace msat {

using nlohmann::json;

namespace {

json eval_stats_json(const EvalStats& stats) {
  return {{"returns", stats.returns},   {"mean", stats.mean},
          {"stddev", stats.stddev},     {"termination", stats.termination},
          {"eval_target", stats.eval_target}, {"greedy", stats.greedy}};
}

std::vector<uint64_t> epoch_eval_seeds(uint64_t base_seed, int epoch, int count) {
  Rng rng = Rng(base_seed).fork(0xE7A1u + static_cast<uint64_t>(epoch));
  std::vector<uint64_t> seeds(static_cast<size_t>(count));
  for (auto& s : seeds) s = rng.next_u64();
  return seeds;
}

}  // namespace

TrainRunArtifacts train_run(const RunConfig& cfg, const TrajectoryDataset& dataset,
                            const std::filesystem::path& out_dir, int eval_jobs) {
  cfg.validate();
  auto env = make_env(cfg.env_name);
  if (!(dataset.spec == env->action_spec()) || !(dataset.obs_shape == env->obs_shape())) {
    throw ConfigError("dataset does not match env '" + cfg.env_name + "'");
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  {
    std::ofstream rc(out_dir / "resolved_config.json", std::ios::trunc);
    if (!rc) throw IoError("cannot write resolved_config.json");
    rc << cfg.to_flat_json().dump(2) << "\n";
  }

  Rng init_rng = Rng(cfg.train.seed).fork(1);
  Rng train_rng = Rng(cfg.train.seed).fork(2);
  Tokenizer<float> tokenizer(cfg.tokenizer_config(dataset.spec, dataset.obs_shape), init_rng);
  Transformer<float> model(cfg.model_config(dataset.spec), init_rng);
  nn::ParamList<float> params;
  tokenizer.collect_params(params);
  model.collect_params(params);
  nn::AdamW<float> opt(&params);

  const json ckpt_config = cfg.to_flat_json();
  TrainRunArtifacts artifacts;
  json epochs_json = json::array();

  auto eval_and_save = [&](int epoch) {
    const auto seeds = epoch_eval_seeds(cfg.train.seed, epoch, cfg.train.eval_episodes);
    EvalStats stats = evaluate(model, tokenizer, *env, cfg.train, seeds, eval_jobs);
    artifacts.per_epoch_eval.push_back(stats);

    std::ostringstream name;
    name << "checkpoint_epoch_" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
    const auto path = out_dir / name.str();
    save_checkpoint(path, ckpt_config, params);
    artifacts.last_checkpoint = path;
    artifacts.last_checkpoint_crc = checkpoint_payload_crc(path);

    json entry = {{"epoch", epoch}, {"eval", eval_stats_json(stats)}, {"checkpoint", name.str()}};
    if (!artifacts.loss_trace.empty() && epoch > 0) {
      const auto& losses = artifacts.loss_trace.back();
      double mean = 0;
      for (double l : losses) mean += l;
      entry["loss_mean"] = losses.empty() ? 0.0 : mean / static_cast<double>(losses.size());
    }
    epochs_json.push_back(std::move(entry));
  };

  int64_t global_step = 0;
  if (cfg.train.epochs == 0) {
    eval_and_save(0);
  }
  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    artifacts.loss_trace.push_back(
        train_epoch(model, tokenizer, dataset, cfg.train, opt, params, train_rng, global_step));
    eval_and_save(epoch);
  }

  {
    std::ofstream lt(out_dir / "loss_trace.json", std::ios::trunc);
    lt << json(artifacts.loss_trace).dump() << "\n";
  }
  {
    json stats = {{"config_hash", cfg.config_hash()},
                  {"env", cfg.env_name},
                  {"scheme", cfg.scheme},
                  {"use_pe", cfg.use_pe},
                  {"seed", cfg.train.seed},
                  {"epochs", epochs_json}};
    std::ofstream sf(out_dir / "stats.json", std::ios::trunc);
    if (!sf) throw IoError("cannot write stats.json");
    sf << stats.dump(2) << "\n";
  }
  return artifacts;
}

std::string cell_display_name(const std::string& scheme, bool use_pe) {
  std::string model;
  if (scheme == "msat") model = "M-SAT";
  else if (scheme == "mat") model = "MAT";
  else model = "Baseline";
  return model + (use_pe ? " with PE" : " No PE");
}

json AblationReport::to_json() const {
  json out = json::array();
  for (const auto& cell : cells) {
    out.push_back({{"scheme", cell.scheme},
                   {"use_pe", cell.use_pe},
                   {"seed", cell.seed},
                   {"ok", cell.ok},
                   {"error", cell.error},
                   {"per_epoch_mean", cell.per_epoch_mean},
                   {"final_returns", cell.final_returns},
                   {"dir", cell.dir}});
  }
  return json{{"cells", out}, {"table", table()}};
}

std::string AblationReport::table() const {
  // Pools final-epoch returns across seeds per (scheme, pe) cell.
  std::vector<std::pair<std::string, bool>> groups;
  for (const auto& cell : cells) {
    const auto key = std::make_pair(cell.scheme, cell.use_pe);
    if (std::find(groups.begin(), groups.end(), key) == groups.end()) groups.push_back(key);
  }
  std::ostringstream out;
  out << "Model Type & Ave Eval Rewards\n";
  for (const auto& [scheme, pe] : groups) {
    std::vector<double> pooled;
    bool any_failed = false;
    for (const auto& cell : cells) {
      if (cell.scheme != scheme || cell.use_pe != pe) continue;
      if (!cell.ok) {
        any_failed = true;
        continue;
      }
      pooled.insert(pooled.end(), cell.final_returns.begin(), cell.final_returns.end());
    }
    out << cell_display_name(scheme, pe) << " & ";
    if (pooled.empty()) {
      out << (any_failed ? "failed" : "n/a");
    } else {
      double mean = 0;
      for (double r : pooled) mean += r;
      mean /= static_cast<double>(pooled.size());
      double sq = 0;
      for (double r : pooled) sq += (r - mean) * (r - mean);
      const double stddev = std::sqrt(sq / static_cast<double>(pooled.size()));
      out << std::fixed << std::setprecision(3) << mean << " ± " << stddev;
      out.unsetf(std::ios::fixed);
      if (any_failed) out << " (some seeds failed)";
    }
    out << "\n";
  }
  return out.str();
}

AblationReport run_ablation(const RunConfig& base, const std::vector<std::string>& schemes,
                            const std::vector<bool>& pe_modes,
                            const std::vector<uint64_t>& seeds,
                            const TrajectoryDataset& dataset,
                            const std::filesystem::path& out_root, int jobs) {
  if (seeds.empty()) throw ConfigError("run_ablation: need at least one seed");
  if (schemes.empty() || pe_modes.empty()) throw ConfigError("run_ablation: empty matrix");

  struct Cell {
    std::string scheme;
    bool use_pe;
    uint64_t seed;
  };
  std::vector<Cell> todo;
  for (const auto& scheme : schemes) {
    parse_scheme(scheme);
    for (bool pe : pe_modes) {
      for (uint64_t seed : seeds) todo.push_back({scheme, pe, seed});
    }
  }

  AblationReport report;
  report.cells.resize(todo.size());
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= todo.size()) break;
      const Cell& cell = todo[i];
      AblationCellResult& result = report.cells[i];
      result.scheme = cell.scheme;
      result.use_pe = cell.use_pe;
      result.seed = cell.seed;

      RunConfig cfg = base;
      cfg.scheme = cell.scheme;
      cfg.use_pe = cell.use_pe;
      cfg.train.seed = cell.seed;
      std::ostringstream dir;
      dir << cell.scheme << (cell.use_pe ? "_pe" : "_nope") << "_seed" << cell.seed;
      const auto cell_dir = out_root / dir.str();
      result.dir = cell_dir.string();
      try {
        TrainRunArtifacts artifacts = train_run(cfg, dataset, cell_dir, /*eval_jobs=*/1);
        for (const auto& stats : artifacts.per_epoch_eval) {
          result.per_epoch_mean.push_back(stats.mean);
        }
        result.final_returns = artifacts.per_epoch_eval.back().returns;
        result.ok = true;
      } catch (const std::exception& e) {
        result.ok = false;
        result.error = e.what();
      }
    }
  };

  jobs = std::max(1, jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  std::error_code ec;
  std::filesystem::create_directories(out_root, ec);
  {
    std::ofstream rj(out_root / "report.json", std::ios::trunc);
    if (!rj) throw IoError("cannot write report.json");
    rj << report.to_json().dump(2) << "\n";
  }
  {
    std::ofstream rt(out_root / "report.txt", std::ios::trunc);
    rt << report.table();
  }
  return report;
}

}  // namespace msat

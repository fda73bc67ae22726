#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>

#include "msat/run_config.hpp"

namespace msat {

// One full training run: per-epoch train/eval, checkpoints and stats written
// under out_dir. epochs == 0 evaluates the freshly initialized model only.
struct TrainRunArtifacts {
  std::vector<std::vector<double>> loss_trace;  // [epoch][step]
  std::vector<EvalStats> per_epoch_eval;        // epochs + 1 entries (incl. initial when epochs==0)
  std::filesystem::path last_checkpoint;
  uint32_t last_checkpoint_crc = 0;
};

TrainRunArtifacts train_run(const RunConfig& cfg, const TrajectoryDataset& dataset,
                            const std::filesystem::path& out_dir, int eval_jobs = 1);

struct AblationCellResult {
  std::string scheme;
  bool use_pe = true;
  uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<double> per_epoch_mean;
  std::vector<double> final_returns;  // final-epoch per-episode returns
  std::string dir;
};

struct AblationReport {
  std::vector<AblationCellResult> cells;

  nlohmann::json to_json() const;
  // Table-2-style rows, e.g. "M-SAT with PE & 0.964 ± 0.005".
  std::string table() const;
};

// Trains every (scheme, pe) cell for every seed on the same dataset. A failed
// cell is recorded and the rest continue. jobs > 1 runs cells in parallel.
AblationReport run_ablation(const RunConfig& base, const std::vector<std::string>& schemes,
                            const std::vector<bool>& pe_modes,
                            const std::vector<uint64_t>& seeds,
                            const TrajectoryDataset& dataset,
                            const std::filesystem::path& out_root, int jobs = 1);

std::string cell_display_name(const std::string& scheme, bool use_pe);

}  // namespace msat

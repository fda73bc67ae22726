#pragma once

#include <span>

#include "msat/data/context.hpp"
#include "msat/envs/env.hpp"
#include "msat/model/transformer.hpp"
#include "msat/nn/optim.hpp"
#include "msat/tok/tokenizer.hpp"

namespace msat {

struct TrainConfig {
  int epochs = 20;
  int64_t batch_size = 64;
  int64_t context = 10;  // K
  double learning_rate = 1e-3;
  int64_t warmup_steps = 500;
  double grad_clip_norm = 1.0;
  uint64_t seed = 1;
  int eval_episodes = 20;
  double eval_target = 1.2;   // raw return prompt, divided by return_scale once
  double return_scale = 1.0;
  bool greedy_eval = false;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size <= 0 || context <= 0) throw ConfigError("batch_size and context must be positive");
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (return_scale <= 0) throw ConfigError("return_scale must be positive");
    if (grad_clip_norm <= 0) throw ConfigError("grad_clip_norm must be positive");
  }
};

struct EvalStats {
  std::vector<double> returns;  // sorted ascending before persistence
  double mean = 0.0;
  double stddev = 0.0;
  std::map<std::string, int> termination;
  double eval_target = 0.0;
  bool greedy = false;

  void finalize();
};

// Mean categorical cross-entropy over unpadded (timestep, component) pairs.
// logits[i]: (B, K, N_i); targets and the padding mask come from the batch.
template <typename T>
nn::Var<T> action_loss(const std::vector<nn::Var<T>>& logits, const ContextBatch& batch) {
  const int32_t n = batch.spec.n();
  if (static_cast<int32_t>(logits.size()) != n) throw ShapeError("action_loss: head count mismatch");
  const int64_t rows = batch.batch * batch.context;
  auto row_active = std::make_shared<std::vector<uint8_t>>(batch.pad);
  int64_t active = 0;
  for (uint8_t v : *row_active) active += v;
  if (active == 0) throw ConfigError("action_loss: batch is fully padded");

  nn::Var<T> total;
  for (int32_t i = 0; i < n; ++i) {
    auto targets = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
      (*targets)[static_cast<size_t>(r)] = batch.actions[r * n + i];
    }
    nn::Var<T> flat = nn::reshape(logits[static_cast<size_t>(i)],
                                  {rows, batch.spec.dims[static_cast<size_t>(i)]});
    nn::Var<T> part = nn::cross_entropy_sum(flat, std::move(targets), row_active);
    total = total.defined() ? nn::add(total, part) : part;
  }
  return nn::scale(total, static_cast<T>(1.0 / (static_cast<double>(active) * n)));
}

// One epoch of optimizer steps: ceil(dataset_steps / (B*K)) batches of
// sample -> tokenize -> forward -> loss -> clip -> AdamW with linear warmup.
// Returns the per-step losses; throws DivergenceError on a non-finite loss.
std::vector<double> train_epoch(Transformer<float>& model, Tokenizer<float>& tokenizer,
                                const TrajectoryDataset& dataset, const TrainConfig& cfg,
                                nn::AdamW<float>& opt, nn::ParamList<float>& params, Rng& rng,
                                int64_t& global_step);

// Autoregressive evaluation with return-to-go prompting. Each episode is
// seeded independently; `jobs` episodes run in parallel on shared read-only
// weights.
EvalStats evaluate(const Transformer<float>& model, const Tokenizer<float>& tokenizer,
                   const Env& env_proto, const TrainConfig& cfg,
                   std::span<const uint64_t> episode_seeds, int jobs = 1);

// Step-by-step record of one evaluation episode, enough to rebuild any
// tokenised window after the fact.
struct EpisodeTrace {
  std::vector<std::vector<float>> states;
  std::vector<std::vector<int32_t>> actions;
  std::vector<float> rewards;
  std::string termination;
  double episode_return = 0.0;
};

// Single evaluation episode; returns (return, termination cause).
std::pair<double, std::string> run_episode(const Transformer<float>& model,
                                           const Tokenizer<float>& tokenizer, Env& env,
                                           const TrainConfig& cfg, uint64_t seed,
                                           EpisodeTrace* trace = nullptr);

// The sliding window ending at step t: the most recent min(t+1, K) steps,
// left-padded to K. rtg entries hold (eval_target - sum of rewards before the
// step) / return_scale; the action at step t may still be a placeholder.
ContextBatch build_eval_window(const std::vector<std::vector<float>>& states,
                               const std::vector<std::vector<int32_t>>& actions,
                               const std::vector<float>& rewards, int64_t t, int64_t k,
                               double eval_target, double return_scale,
                               const MultiDiscreteSpec& spec, const ObsShape& obs);

}  // namespace msat

#pragma once

#include <functional>

#include "msat/data/episode.hpp"
#include "msat/envs/env.hpp"

namespace msat {

using Policy = std::function<std::vector<int32_t>(const Env&)>;

// Rolls full episodes until at least total_steps are collected. With
// probability epsilon per step the action is replaced by a uniformly random
// legal one. Deterministic under seed. When term_hist is given it receives
// the per-episode termination-cause counts.
TrajectoryDataset generate_dataset(Env& env, const Policy& policy, int64_t total_steps,
                                   double epsilon, uint64_t seed,
                                   const std::string& policy_id = "expert",
                                   std::map<std::string, int>* term_hist = nullptr);

// Convenience overload using the environment's scripted expert.
TrajectoryDataset generate_dataset(Env& env, int64_t total_steps, double epsilon, uint64_t seed,
                                   std::map<std::string, int>* term_hist = nullptr);

}  // namespace msat

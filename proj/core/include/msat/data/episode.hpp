#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "msat/action_spec.hpp"

namespace msat {

// One environment transition: the observation the action was taken in, the
// multi-discrete action, and the reward observed. Rewards are kept in f32 so
// the on-disk representation round-trips exactly.
struct Timestep {
  std::vector<float> state;  // C*H*W, values in [0,1]
  std::vector<int32_t> action;
  float reward = 0.0f;
};

// Suffix sums of rewards: out[t] = sum_{i>=t} rewards[i], accumulated back to
// front in double precision. Errors on empty input.
std::vector<double> compute_rtg(std::span<const float> rewards);

struct Episode {
  std::vector<Timestep> steps;
  std::vector<double> rtg;
  double episode_return = 0.0;

  int64_t length() const { return static_cast<int64_t>(steps.size()); }

  // Computes rtg and episode_return from the recorded rewards.
  void finalize();
};

struct DatasetMeta {
  std::string env;
  std::string policy_id;
  uint64_t seed = 0;
};

struct TrajectoryDataset {
  MultiDiscreteSpec spec;
  ObsShape obs_shape;
  std::vector<Episode> episodes;
  DatasetMeta meta;

  int64_t total_steps() const {
    int64_t n = 0;
    for (const auto& e : episodes) n += e.length();
    return n;
  }

  // Checks every action against spec and every state against obs_shape.
  void validate() const;
};

}  // namespace msat

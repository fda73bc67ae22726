#pragma once

#include <cstdint>
#include <vector>

#include "msat/action_spec.hpp"
#include "msat/data/episode.hpp"
#include "msat/rng.hpp"

namespace msat {

// A (B, K) window of trajectory data ready for tokenisation. Short windows
// are left-padded so the most recent step sits at the final position; padded
// slots carry zeros and pad==0. rtg entries are already divided by
// return_scale.
struct ContextBatch {
  int64_t batch = 0;    // B
  int64_t context = 0;  // K
  MultiDiscreteSpec spec;
  ObsShape obs;

  std::vector<float> rtg;         // B*K
  std::vector<float> states;      // B*K*C*H*W
  std::vector<int32_t> actions;   // B*K*n
  std::vector<int32_t> timesteps; // B*K, global episode step index
  std::vector<uint8_t> pad;       // B*K, 1 = real data

  int64_t obs_len() const { return obs.numel(); }
};

// Window [start, start+K) of one episode as a B=1 batch. Windows running past
// the episode end keep min(K, T-start) real steps, right-aligned.
ContextBatch slice_context(const Episode& episode, const MultiDiscreteSpec& spec,
                           const ObsShape& obs, int64_t start, int64_t k,
                           double return_scale);

// B windows sampled step-uniformly across the dataset (episode picked
// proportional to its length, start uniform within it).
ContextBatch sample_batch(const TrajectoryDataset& dataset, int64_t b, int64_t k,
                          double return_scale, Rng& rng);

}  // namespace msat

#include "msat/data/context.hpp"

#include <algorithm>

#include "msat/errors.hpp"

namespace msat {

namespace {

ContextBatch make_empty(const MultiDiscreteSpec& spec, const ObsShape& obs, int64_t b, int64_t k) {
  ContextBatch batch;
  batch.batch = b;
  batch.context = k;
  batch.spec = spec;
  batch.obs = obs;
  batch.rtg.assign(b * k, 0.0f);
  batch.states.assign(b * k * obs.numel(), 0.0f);
  batch.actions.assign(b * k * spec.n(), 0);
  batch.timesteps.assign(b * k, 0);
  batch.pad.assign(b * k, 0);
  return batch;
}

// Fills sample `row` of `batch` with the window [start, start+k) of episode.
void fill_window(ContextBatch& batch, int64_t row, const Episode& episode, int64_t start,
                 double return_scale) {
  const int64_t k = batch.context;
  const int64_t t_total = episode.length();
  const int64_t len = std::min(k, t_total - start);
  const int64_t pad_len = k - len;
  const int64_t obs_len = batch.obs_len();
  const int32_t n = batch.spec.n();
  for (int64_t j = 0; j < len; ++j) {
    const int64_t src = start + j;
    const int64_t dst = row * k + pad_len + j;
    const Timestep& ts = episode.steps[static_cast<size_t>(src)];
    batch.rtg[dst] = static_cast<float>(episode.rtg[static_cast<size_t>(src)] / return_scale);
    std::copy(ts.state.begin(), ts.state.end(), batch.states.begin() + dst * obs_len);
    std::copy(ts.action.begin(), ts.action.end(), batch.actions.begin() + dst * n);
    batch.timesteps[dst] = static_cast<int32_t>(src);
    batch.pad[dst] = 1;
  }
}

}  // namespace

ContextBatch slice_context(const Episode& episode, const MultiDiscreteSpec& spec,
                           const ObsShape& obs, int64_t start, int64_t k,
                           double return_scale) {
  if (start < 0 || start >= episode.length()) {
    throw ConfigError("slice_context: start " + std::to_string(start) + " outside [0, " +
                      std::to_string(episode.length()) + ")");
  }
  if (k <= 0) throw ConfigError("slice_context: context length must be positive");
  ContextBatch batch = make_empty(spec, obs, 1, k);
  fill_window(batch, 0, episode, start, return_scale);
  return batch;
}

ContextBatch sample_batch(const TrajectoryDataset& dataset, int64_t b, int64_t k,
                          double return_scale, Rng& rng) {
  if (b <= 0 || k <= 0) throw ConfigError("sample_batch: B and K must be positive");
  if (dataset.episodes.empty()) throw ConfigError("sample_batch: empty dataset");

  // Prefix sums over episode lengths for step-uniform draws.
  std::vector<int64_t> cumulative(dataset.episodes.size() + 1, 0);
  for (size_t e = 0; e < dataset.episodes.size(); ++e) {
    cumulative[e + 1] = cumulative[e] + dataset.episodes[e].length();
  }
  const int64_t total = cumulative.back();

  ContextBatch batch = make_empty(dataset.spec, dataset.obs_shape, b, k);
  for (int64_t row = 0; row < b; ++row) {
    const int64_t flat = rng.randint(0, total);
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), flat);
    const int64_t e = std::distance(cumulative.begin(), it) - 1;
    const int64_t start = flat - cumulative[static_cast<size_t>(e)];
    fill_window(batch, row, dataset.episodes[static_cast<size_t>(e)], start, return_scale);
  }
  return batch;
}

}  // namespace msat

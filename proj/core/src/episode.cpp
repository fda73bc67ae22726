#include "msat/data/episode.hpp"

#include "msat/errors.hpp"

namespace msat {

std::vector<double> compute_rtg(std::span<const float> rewards) {
  if (rewards.empty()) throw ConfigError("empty episode");
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (size_t i = rewards.size(); i-- > 0;) {
    acc += static_cast<double>(rewards[i]);
    out[i] = acc;
  }
  return out;
}

void Episode::finalize() {
  std::vector<float> rewards(steps.size());
  for (size_t i = 0; i < steps.size(); ++i) rewards[i] = steps[i].reward;
  rtg = compute_rtg(rewards);
  episode_return = rtg.front();
}

void TrajectoryDataset::validate() const {
  spec.validate();
  const int64_t obs_len = obs_shape.numel();
  for (size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    if (ep.steps.empty()) throw ConfigError("episode " + std::to_string(e) + " is empty");
    if (ep.rtg.size() != ep.steps.size()) {
      throw ConfigError("episode " + std::to_string(e) + " rtg length mismatch");
    }
    for (const auto& ts : ep.steps) {
      if (static_cast<int64_t>(ts.state.size()) != obs_len) {
        throw ConfigError("episode " + std::to_string(e) + " state shape mismatch");
      }
      spec.validate_action(ts.action);
    }
  }
}

}  // namespace msat

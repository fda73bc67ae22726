#include "msat/envs/generate.hpp"

#include <sstream>

#include "msat/envs/corridor.hpp"
#include "msat/envs/rooms.hpp"
#include "msat/errors.hpp"
#include "msat/rng.hpp"

namespace msat {

std::unique_ptr<Env> make_env(const std::string& name) {
  if (name == "corridor") return std::make_unique<ToyCorridorEnv>();
  if (name == "rooms") return std::make_unique<FourRoomsEnv>();
  throw ConfigError("unknown env '" + name + "' (valid: corridor, rooms)");
}

TrajectoryDataset generate_dataset(Env& env, const Policy& policy, int64_t total_steps,
                                   double epsilon, uint64_t seed,
                                   const std::string& policy_id,
                                   std::map<std::string, int>* term_hist) {
  if (epsilon < 0.0 || epsilon >= 1.0) throw ConfigError("epsilon must be in [0, 1)");
  if (total_steps <= 0) throw ConfigError("total_steps must be positive");

  const MultiDiscreteSpec spec = env.action_spec();
  Rng rng(seed);

  TrajectoryDataset ds;
  ds.spec = spec;
  ds.obs_shape = env.obs_shape();
  {
    std::ostringstream id;
    id << policy_id << "+eps" << epsilon;
    ds.meta = {env.name(), id.str(), seed};
  }

  int64_t collected = 0;
  while (collected < total_steps) {
    Episode ep;
    std::vector<float> obs = env.reset(rng.next_u64());
    while (!env.done()) {
      std::vector<int32_t> action = policy(env);
      if (static_cast<int32_t>(action.size()) != spec.n()) {
        throw ConfigError("policy emitted an action with " + std::to_string(action.size()) +
                          " components, env expects " + std::to_string(spec.n()));
      }
      spec.validate_action(action);
      if (epsilon > 0.0 && rng.uniform() < epsilon) {
        for (int32_t i = 0; i < spec.n(); ++i) {
          action[static_cast<size_t>(i)] = static_cast<int32_t>(rng.randint(0, spec.dims[i]));
        }
      }
      StepResult sr = env.step(action);
      ep.steps.push_back({std::move(obs), std::move(action), sr.reward});
      obs = std::move(sr.observation);
      if (sr.done && term_hist) {
        const auto it = sr.info.find("termination");
        ++(*term_hist)[it != sr.info.end() ? it->second : "done"];
      }
    }
    ep.finalize();
    collected += ep.length();
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

TrajectoryDataset generate_dataset(Env& env, int64_t total_steps, double epsilon, uint64_t seed,
                                   std::map<std::string, int>* term_hist) {
  return generate_dataset(
      env, [](const Env& e) { return e.expert_action(); }, total_steps, epsilon, seed, "expert",
      term_hist);
}

}  // namespace msat

#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "msat/action_spec.hpp"

namespace msat {

struct StepResult {
  std::vector<float> observation;
  float reward = 0.0f;
  bool done = false;
  std::map<std::string, std::string> info;  // "termination": goal | timeout | death
};

// Deterministic-dynamics multi-discrete environment. Observations are a pure
// function of internal state; stepping a finished episode throws.
class Env {
 public:
  virtual ~Env() = default;

  virtual const std::string& name() const = 0;
  virtual MultiDiscreteSpec action_spec() const = 0;
  virtual ObsShape obs_shape() const = 0;
  virtual int max_steps() const = 0;

  virtual std::vector<float> reset(uint64_t seed) = 0;
  virtual StepResult step(std::span<const int32_t> action) = 0;
  virtual bool done() const = 0;

  // Scripted near-optimal policy, deterministic in the current state.
  virtual std::vector<int32_t> expert_action() const = 0;

  // Fresh unreset instance with the same configuration (for parallel eval).
  virtual std::unique_ptr<Env> clone_fresh() const = 0;
};

// name: "corridor" | "rooms"
std::unique_ptr<Env> make_env(const std::string& name);

}  // namespace msat

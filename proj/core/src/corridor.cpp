#include "msat/envs/corridor.hpp"

#include <algorithm>

#include "msat/errors.hpp"
#include "msat/rng.hpp"

namespace msat {

ToyCorridorEnv::ToyCorridorEnv() = default;

std::vector<float> ToyCorridorEnv::reset(uint64_t seed) {
  Rng rng(seed);
  agent_row_ = 1;
  agent_col_ = 0;
  aim_row_ = 1;
  health_ = kStartHealth;
  step_count_ = 0;
  const int enemy_cols[kEnemyCount] = {5, 10, 15};
  for (int i = 0; i < kEnemyCount; ++i) {
    enemies_[static_cast<size_t>(i)] = {rng.bernoulli(0.5) ? 2 : 0, enemy_cols[i], true};
  }
  started_ = true;
  done_ = false;
  return observation();
}

StepResult ToyCorridorEnv::step(std::span<const int32_t> action) {
  if (!started_) throw StateError("corridor: step before reset");
  if (done_) throw StateError("corridor: step after episode end");
  action_spec().validate_action(action);

  const int prev_col = agent_col_;

  // Movement and aim update simultaneously.
  if (action[0] == 1) agent_row_ = std::max(0, agent_row_ - 1);
  if (action[0] == 2) agent_row_ = std::min(kRows - 1, agent_row_ + 1);
  if (action[1] == 1) agent_col_ = std::min(kCols - 1, agent_col_ + 1);
  if (action[1] == 2) agent_col_ = std::max(0, agent_col_ - 1);
  if (action[2] == 1) aim_row_ = std::max(0, aim_row_ - 1);
  if (action[2] == 2) aim_row_ = std::min(kRows - 1, aim_row_ + 1);

  // Firing resolves against the updated position and aim; one bullet hits the
  // nearest live enemy on the aimed row 1..3 columns ahead.
  if (action[3] == 1) {
    Enemy* hit = nullptr;
    for (auto& e : enemies_) {
      if (!e.alive || e.row != aim_row_) continue;
      const int ahead = e.col - agent_col_;
      if (ahead < 1 || ahead > kKillRangeMax) continue;
      if (!hit || e.col < hit->col) hit = &e;
    }
    if (hit) hit->alive = false;
  }

  StepResult result;
  result.reward = static_cast<float>(agent_col_ - prev_col);
  ++step_count_;

  if (agent_col_ == kCols - 1) {
    result.reward += 10.0f;
    result.done = true;
    result.info["termination"] = "goal";
  } else {
    for (const auto& e : enemies_) {
      if (e.alive && std::abs(e.col - agent_col_) <= kDamageRange) --health_;
    }
    if (health_ <= 0) {
      result.reward -= 10.0f;
      result.done = true;
      result.info["termination"] = "death";
    } else if (step_count_ >= kMaxSteps) {
      result.done = true;
      result.info["termination"] = "timeout";
    }
  }

  done_ = result.done;
  result.observation = observation();
  return result;
}

std::vector<float> ToyCorridorEnv::observation() const {
  // Binary planes: agent, live enemies, goal column, aimed row.
  std::vector<float> obs(4 * kRows * kCols, 0.0f);
  auto plane = [&obs](int p) { return obs.data() + p * kRows * kCols; };
  plane(0)[agent_row_ * kCols + agent_col_] = 1.0f;
  for (const auto& e : enemies_) {
    if (e.alive) plane(1)[e.row * kCols + e.col] = 1.0f;
  }
  for (int r = 0; r < kRows; ++r) plane(2)[r * kCols + (kCols - 1)] = 1.0f;
  for (int c = 0; c < kCols; ++c) plane(3)[aim_row_ * kCols + c] = 1.0f;
  return obs;
}

std::vector<int32_t> ToyCorridorEnv::expert_action() const {
  if (!started_ || done_) throw StateError("corridor: expert queried on finished state");
  // Engage the nearest live enemy within kill range ahead: adjust aim toward
  // its row and fire (both take effect this step). Otherwise walk forward.
  const Enemy* target = nullptr;
  for (const auto& e : enemies_) {
    if (!e.alive) continue;
    const int ahead = e.col - agent_col_;
    if (ahead < 1 || ahead > kKillRangeMax) continue;
    if (!target || e.col < target->col) target = &e;
  }
  if (target) {
    int32_t aim = 0;
    if (aim_row_ > target->row) aim = 1;       // aim-up
    else if (aim_row_ < target->row) aim = 2;  // aim-down
    return {0, 0, aim, 1};
  }
  return {0, 1, 0, 0};
}

std::unique_ptr<Env> ToyCorridorEnv::clone_fresh() const {
  return std::make_unique<ToyCorridorEnv>();
}

}  // namespace msat

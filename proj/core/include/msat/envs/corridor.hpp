#pragma once

#include <array>

#include "msat/envs/env.hpp"

namespace msat {

// 3x20 corridor with three static shooters. Action components:
//   [0] lateral    {noop, up, down}
//   [1] longitudinal {noop, forward, back}
//   [2] aim        {noop, aim-up, aim-down}
//   [3] attack     {noop, fire}
// Movement and aim apply first; firing then resolves against the updated
// state and kills a live enemy on the aimed row 1..3 columns ahead. A live
// enemy within 2 columns deals 1 damage per step (agent health 3). Per-step
// reward is the column delta; reaching the last column adds +10, dying adds
// -10. Timeout after 100 steps.
class ToyCorridorEnv final : public Env {
 public:
  static constexpr int kRows = 3;
  static constexpr int kCols = 20;
  static constexpr int kMaxSteps = 100;
  static constexpr int kEnemyCount = 3;
  static constexpr int kKillRangeMax = 3;   // columns ahead
  static constexpr int kDamageRange = 2;    // |column delta|
  static constexpr int kStartHealth = 3;

  ToyCorridorEnv();

  const std::string& name() const override { return name_; }
  MultiDiscreteSpec action_spec() const override { return MultiDiscreteSpec({3, 3, 3, 2}); }
  ObsShape obs_shape() const override { return {4, kRows, kCols}; }
  int max_steps() const override { return kMaxSteps; }

  std::vector<float> reset(uint64_t seed) override;
  StepResult step(std::span<const int32_t> action) override;
  bool done() const override { return done_; }
  std::vector<int32_t> expert_action() const override;
  std::unique_ptr<Env> clone_fresh() const override;

  // exposed for tests
  int agent_row() const { return agent_row_; }
  int agent_col() const { return agent_col_; }
  int aim_row() const { return aim_row_; }
  int health() const { return health_; }
  bool enemy_alive(int i) const { return enemies_[static_cast<size_t>(i)].alive; }
  int enemy_row(int i) const { return enemies_[static_cast<size_t>(i)].row; }
  int enemy_col(int i) const { return enemies_[static_cast<size_t>(i)].col; }

 private:
  struct Enemy {
    int row = 0;
    int col = 0;
    bool alive = false;
  };

  std::vector<float> observation() const;

  std::string name_ = "corridor";
  bool started_ = false;
  bool done_ = true;
  int agent_row_ = 1;
  int agent_col_ = 0;
  int aim_row_ = 1;
  int health_ = kStartHealth;
  int step_count_ = 0;
  std::array<Enemy, kEnemyCount> enemies_{};
};

}  // namespace msat

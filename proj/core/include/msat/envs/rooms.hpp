#pragma once

#include <array>

#include "msat/envs/env.hpp"

namespace msat {

// 13x13 four-rooms gridworld with an oriented agent. Action components:
//   [0] turn {noop, left, right}
//   [1] move {noop, forward, backward}
// Turn applies first, then the move translates along the new orientation;
// walls block. Reaching the goal cell gives +1 and ends the episode; every
// step costs -0.001; timeout after 200 steps. The observation is a 3x7x7
// egocentric window (walls, goal, all-ones) rotated so forward points up.
class FourRoomsEnv final : public Env {
 public:
  static constexpr int kSize = 13;
  static constexpr int kView = 7;
  static constexpr int kMaxSteps = 200;
  static constexpr int kGoalRow = 11;
  static constexpr int kGoalCol = 11;
  static constexpr float kStepPenalty = -0.001f;

  enum Orientation { kNorth = 0, kEast = 1, kSouth = 2, kWest = 3 };

  FourRoomsEnv();

  const std::string& name() const override { return name_; }
  MultiDiscreteSpec action_spec() const override { return MultiDiscreteSpec({3, 3}); }
  ObsShape obs_shape() const override { return {3, kView, kView}; }
  int max_steps() const override { return kMaxSteps; }

  std::vector<float> reset(uint64_t seed) override;
  StepResult step(std::span<const int32_t> action) override;
  bool done() const override { return done_; }
  std::vector<int32_t> expert_action() const override;
  std::unique_ptr<Env> clone_fresh() const override;

  // exposed for tests
  bool is_wall(int r, int c) const;
  int agent_row() const { return row_; }
  int agent_col() const { return col_; }
  int orientation() const { return orient_; }
  void teleport(int r, int c, int orient);  // test helper, keeps episode live
  int bfs_distance(int r, int c, int orient) const { return dist_[node_index(r, c, orient)]; }
  std::vector<std::pair<int, int>> free_cells() const;

 private:
  static int node_index(int r, int c, int orient) { return (r * kSize + c) * 4 + orient; }
  std::vector<float> observation() const;
  void build_distances();

  std::string name_ = "rooms";
  bool started_ = false;
  bool done_ = true;
  int row_ = 1, col_ = 1;
  int orient_ = kNorth;
  int step_count_ = 0;
  std::array<int, kSize * kSize * 4> dist_{};
};

}  // namespace msat

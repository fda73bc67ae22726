#include "msat/envs/rooms.hpp"

#include <deque>
#include <limits>

#include "msat/errors.hpp"
#include "msat/rng.hpp"

namespace msat {

namespace {

// Row/col deltas for N, E, S, W.
constexpr int kDr[4] = {-1, 0, 1, 0};
constexpr int kDc[4] = {0, 1, 0, -1};

int apply_turn(int orient, int32_t turn) {
  if (turn == 1) return (orient + 3) % 4;  // left
  if (turn == 2) return (orient + 1) % 4;  // right
  return orient;
}

}  // namespace

bool FourRoomsEnv::is_wall(int r, int c) const {
  if (r < 0 || r >= kSize || c < 0 || c >= kSize) return true;
  if (r == 0 || r == kSize - 1 || c == 0 || c == kSize - 1) return true;
  // Cross walls with four doorways at asymmetric offsets so local views
  // around each door differ from room to room.
  if (r == 6 && !(c == 2 || c == 9)) return true;
  if (c == 6 && !(r == 3 || r == 10)) return true;
  return false;
}

FourRoomsEnv::FourRoomsEnv() { build_distances(); }

void FourRoomsEnv::build_distances() {
  // Single-action edges over (cell, orientation) nodes: turn then move.
  dist_.fill(std::numeric_limits<int>::max());
  std::deque<int> queue;
  for (int o = 0; o < 4; ++o) {
    dist_[node_index(kGoalRow, kGoalCol, o)] = 0;
    queue.push_back(node_index(kGoalRow, kGoalCol, o));
  }
  // Reverse BFS needs predecessor edges; enumerate all transitions once.
  std::vector<std::vector<int>> reverse_adj(dist_.size());
  for (int r = 1; r < kSize - 1; ++r) {
    for (int c = 1; c < kSize - 1; ++c) {
      if (is_wall(r, c)) continue;
      for (int o = 0; o < 4; ++o) {
        const int from = node_index(r, c, o);
        for (int32_t turn = 0; turn < 3; ++turn) {
          for (int32_t move = 0; move < 3; ++move) {
            const int no = apply_turn(o, turn);
            int nr = r, nc = c;
            if (move == 1) {
              nr += kDr[no];
              nc += kDc[no];
            } else if (move == 2) {
              nr -= kDr[no];
              nc -= kDc[no];
            }
            if (is_wall(nr, nc)) {
              nr = r;
              nc = c;
            }
            reverse_adj[static_cast<size_t>(node_index(nr, nc, no))].push_back(from);
          }
        }
      }
    }
  }
  while (!queue.empty()) {
    const int v = queue.front();
    queue.pop_front();
    for (int u : reverse_adj[static_cast<size_t>(v)]) {
      if (dist_[static_cast<size_t>(u)] > dist_[static_cast<size_t>(v)] + 1) {
        dist_[static_cast<size_t>(u)] = dist_[static_cast<size_t>(v)] + 1;
        queue.push_back(u);
      }
    }
  }
}

std::vector<std::pair<int, int>> FourRoomsEnv::free_cells() const {
  std::vector<std::pair<int, int>> cells;
  for (int r = 1; r < kSize - 1; ++r) {
    for (int c = 1; c < kSize - 1; ++c) {
      if (!is_wall(r, c)) cells.emplace_back(r, c);
    }
  }
  return cells;
}

std::vector<float> FourRoomsEnv::reset(uint64_t seed) {
  Rng rng(seed);
  auto cells = free_cells();
  // Never spawn on the goal.
  std::erase(cells, std::make_pair(kGoalRow, kGoalCol));
  const auto& cell = cells[static_cast<size_t>(rng.randint(0, static_cast<int64_t>(cells.size())))];
  row_ = cell.first;
  col_ = cell.second;
  orient_ = static_cast<int>(rng.randint(0, 4));
  step_count_ = 0;
  started_ = true;
  done_ = false;
  return observation();
}

void FourRoomsEnv::teleport(int r, int c, int orient) {
  if (is_wall(r, c)) throw StateError("rooms: teleport into a wall");
  row_ = r;
  col_ = c;
  orient_ = orient;
  started_ = true;
  done_ = false;
  step_count_ = 0;
}

StepResult FourRoomsEnv::step(std::span<const int32_t> action) {
  if (!started_) throw StateError("rooms: step before reset");
  if (done_) throw StateError("rooms: step after episode end");
  action_spec().validate_action(action);

  orient_ = apply_turn(orient_, action[0]);
  int nr = row_, nc = col_;
  if (action[1] == 1) {
    nr += kDr[orient_];
    nc += kDc[orient_];
  } else if (action[1] == 2) {
    nr -= kDr[orient_];
    nc -= kDc[orient_];
  }
  if (!is_wall(nr, nc)) {
    row_ = nr;
    col_ = nc;
  }

  StepResult result;
  result.reward = kStepPenalty;
  ++step_count_;
  if (row_ == kGoalRow && col_ == kGoalCol) {
    result.reward += 1.0f;
    result.done = true;
    result.info["termination"] = "goal";
  } else if (step_count_ >= kMaxSteps) {
    result.done = true;
    result.info["termination"] = "timeout";
  }
  done_ = result.done;
  result.observation = observation();
  return result;
}

std::vector<float> FourRoomsEnv::observation() const {
  // Egocentric window: row 0 is three cells ahead, the agent sits at (3,3).
  std::vector<float> obs(3 * kView * kView, 0.0f);
  const int f_r = kDr[orient_], f_c = kDc[orient_];
  const int right_r = kDr[(orient_ + 1) % 4], right_c = kDc[(orient_ + 1) % 4];
  const int center = kView / 2;
  for (int wr = 0; wr < kView; ++wr) {
    for (int wc = 0; wc < kView; ++wc) {
      const int fwd = center - wr;
      const int side = wc - center;
      const int r = row_ + fwd * f_r + side * right_r;
      const int c = col_ + fwd * f_c + side * right_c;
      const int at = wr * kView + wc;
      if (is_wall(r, c)) obs[at] = 1.0f;
      if (r == kGoalRow && c == kGoalCol) obs[kView * kView + at] = 1.0f;
      obs[2 * kView * kView + at] = 1.0f;
    }
  }
  return obs;
}

std::vector<int32_t> FourRoomsEnv::expert_action() const {
  if (!started_ || done_) throw StateError("rooms: expert queried on finished state");
  // First action of a shortest (turn, move) path; ties resolved
  // lexicographically so the policy is deterministic.
  int best_turn = 0, best_move = 0;
  int best = std::numeric_limits<int>::max();
  for (int32_t turn = 0; turn < 3; ++turn) {
    for (int32_t move = 0; move < 3; ++move) {
      const int no = apply_turn(orient_, turn);
      int nr = row_, nc = col_;
      if (move == 1) {
        nr += kDr[no];
        nc += kDc[no];
      } else if (move == 2) {
        nr -= kDr[no];
        nc -= kDc[no];
      }
      if (is_wall(nr, nc)) {
        nr = row_;
        nc = col_;
      }
      const int d = dist_[static_cast<size_t>(node_index(nr, nc, no))];
      if (d < best) {
        best = d;
        best_turn = turn;
        best_move = move;
      }
    }
  }
  return {best_turn, best_move};
}

std::unique_ptr<Env> FourRoomsEnv::clone_fresh() const {
  return std::make_unique<FourRoomsEnv>();
}

}  // namespace msat

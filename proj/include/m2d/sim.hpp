#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "m2d/common.hpp"

namespace m2d::sim {

inline constexpr double kMaxStep = 0.05;  // workspace units per action unit
// Must cover the half-cell diagonal of the observation grid (0.0884), or a
// policy limited to grid observations cannot grasp reliably.
inline constexpr double kGraspRadius = 0.09;
inline constexpr int kGridSize = 8;           // agentview resolution
inline constexpr int kPatchSize = 5;          // handeye crop
inline constexpr int kDefaultHorizon = 60;
inline constexpr int kLangDim = 16;

inline constexpr int kAgentViewDim = kGridSize * kGridSize;   // 64
inline constexpr int kHandEyeDim = kPatchSize * kPatchSize;   // 25
inline constexpr int kJointDim = 4;
inline constexpr int kObsDim = kAgentViewDim + kHandEyeDim + kLangDim + kJointDim + 1;

enum class SuiteKind { kObject, kGoal, kSpatial };

std::string to_string(SuiteKind kind);
SuiteKind suite_kind_from_string(const std::string& s);

struct Vec2 {
  double x = 0.0, y = 0.0;
};

struct Rect {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  bool contains(Vec2 p) const {
    return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1;
  }
};

struct ObjectSpec {
  double feature = 0.0;  // scalar appearance signature in (0, 1]
  Rect spawn;
};

struct GoalSpec {
  int target_object = 0;
  Vec2 center;
  double radius = 0.1;
};

struct TaskSpec {
  int task_id = 0;
  SuiteKind suite_kind = SuiteKind::kObject;
  std::array<double, kLangDim> lang_vec{};
  std::vector<ObjectSpec> objects;
  Vec2 arm_start;
  GoalSpec goal;
  int horizon = kDefaultHorizon;
};

struct TaskSuite {
  SuiteKind kind = SuiteKind::kObject;
  std::vector<TaskSpec> tasks;
  uint64_t seed = 0;
};

struct SimState {
  std::vector<Vec2> object_pos;
  Vec2 arm_pos;
  Vec2 arm_vel;
  double gripper_open = 1.0;  // fraction in [0, 1]
  int held = -1;              // object id or -1
  int t = 0;
};

struct Action {
  double dx = 0.0, dy = 0.0, grip = 0.0;  // each in [-1, 1]
};

struct MultiModalObs {
  std::array<double, kAgentViewDim> agentview{};
  std::array<double, kHandEyeDim> handeye{};
  std::array<double, kLangDim> lang{};
  std::array<double, kJointDim> joint{};
  std::array<double, 1> gripper{};
};

struct Step {
  MultiModalObs obs;
  Action action;
};

struct Trajectory {
  int task_id = 0;
  std::vector<Step> steps;
  bool success = false;
};

// Suite construction; task layouts depend only on (kind, K, seed).
// Supports up to 10 tasks per suite.
TaskSuite make_suite(SuiteKind kind, int num_tasks, uint64_t seed);

SimState reset(const TaskSpec& task, uint64_t episode_seed);

// Kinematic transition: clamped arm displacement, grasp/release on the grip
// sign, held object tracks the arm. Rejects stepping at t == horizon.
SimState step(const TaskSpec& task, const SimState& state, const Action& action);

bool goal_reached(const TaskSpec& task, const SimState& state);

MultiModalObs observe(const SimState& state, const TaskSpec& task);

// Proportional pick-and-place controller used to collect demonstrations.
Action scripted_expert(const TaskSpec& task, const SimState& state);

using Controller = std::function<Action(const SimState&, const MultiModalObs&)>;

// Runs one episode, terminating on goal or horizon. The recorded trajectory
// holds the (observation, action) pair of every executed step.
Trajectory run_episode(const TaskSpec& task, uint64_t episode_seed,
                       const Controller& controller);

// N expert-successful trajectories; failed episodes are resampled with fresh
// derived seeds. Throws DataError after 10*N consecutive failures.
std::vector<Trajectory> collect_demos(const TaskSpec& task, int n, uint64_t seed);

}  // namespace m2d::sim

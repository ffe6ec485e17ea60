#pragma once

#include <vector>

#include "m2d/policy.hpp"
#include "m2d/sim.hpp"

namespace m2d::eval {

// c[i][j][e]: success rate on task j at checkpoint epoch e of task i's
// training; defined for j <= i only. Task indices are 0-based here.
class SuccessTensor {
 public:
  SuccessTensor() = default;
  SuccessTensor(int num_tasks, std::vector<int> eval_epochs);

  int num_tasks() const { return num_tasks_; }
  const std::vector<int>& eval_epochs() const { return eval_epochs_; }

  void set(int i, int j, int epoch, double rate);
  double at(int i, int j, int epoch) const;
  bool has(int i, int j, int epoch) const;
  bool complete() const;

  bool operator==(const SuccessTensor&) const = default;

 private:
  int index(int i, int j, int epoch_pos) const;
  int epoch_pos(int epoch) const;

  int num_tasks_ = 0;
  std::vector<int> eval_epochs_;
  std::vector<double> values_;
  std::vector<bool> filled_;
};

struct LifelongMetrics {
  double fwt = 0.0;
  double nbt = 0.0;
  double auc = 0.0;
};

// FWT_k = mean_e c[k][k][e]; NBT_k = mean_{tau>k}(max_e c[k][k][e] -
// c[tau][k][e_last]); AUC_k = (FWT_k + sum_{tau>k} c[tau][k][e_last]) /
// (K - k + 1); each reported metric is the mean over k (NBT over k < K).
LifelongMetrics compute_metrics(const SuccessTensor& c);

// M rollouts with the dominant-component-mean action; success = goal
// predicate within the horizon. Per-episode seeds make the parallel path
// identical to the serial one.
double rollout_success(const policy::PolicyParams& params, const sim::TaskSpec& task,
                       int episodes, uint64_t seed, int max_threads = 1);

double rollout_success(const policy::EvalPolicy& policy, const sim::TaskSpec& task,
                       int episodes, uint64_t seed, int max_threads = 1);

struct DriftRecord {
  int step = 0;  // task index k whose training produced the drift
  double agentview = 0.0;
  double handeye = 0.0;
  double lang = 0.0;
  double joint = 0.0;
  double gripper = 0.0;
};

// Mean squared displacement of per-timestep latents between two policies
// over a fixed probe dataset.
DriftRecord latent_drift(const policy::PolicyParams& current,
                         const policy::PolicyParams& previous,
                         const std::vector<sim::Trajectory>& probe);

}  // namespace m2d::eval

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "m2d/losses.hpp"
#include "m2d/metrics.hpp"
#include "m2d/policy.hpp"
#include "m2d/sim.hpp"

namespace m2d::train {

enum class Method { kSequential, kEr, kM2Distill };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

// Capped exemplar store. When a push exceeds capacity, trajectories are
// evicted uniformly at random from whichever task currently holds the most
// until the total fits, which keeps per-task counts level.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity = 1000);

  int capacity() const { return capacity_; }
  int total() const;
  bool empty() const { return total() == 0; }
  int task_count() const { return static_cast<int>(tasks_.size()); }
  std::vector<std::pair<int, int>> counts() const;  // (task_id, stored)

  void push(int task_id, const std::vector<sim::Trajectory>& trajectories, Rng& rng);

  // Uniform over stored tasks, then uniform over that task's trajectories.
  const sim::Trajectory& sample(Rng& rng) const;

 private:
  int capacity_;
  std::vector<std::pair<int, std::vector<sim::Trajectory>>> tasks_;
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 32;
  double learning_rate = 1e-3;
  losses::LossWeights weights;
  int kl_samples = 16;
  std::vector<int> eval_epochs = {10, 20, 30, 40, 50};
  int eval_episodes = 20;
  double replay_mix = 0.5;  // fraction of each batch from the current task
  int replay_capacity = 1000;
  uint64_t seed = 0;
  Method method = Method::kM2Distill;
  double grad_clip = 10.0;
  int eval_threads = 1;

  void validate() const;
  // SEQUENTIAL and ER run with all distillation weights at zero.
  losses::LossWeights effective_weights() const;
};

struct TeacherSnapshot {
  policy::PolicyParams params;  // frozen
  int step_index = 0;           // k-1 (0-based task index)
};

// Deep frozen copy; the live policy keeps training from the same weights.
TeacherSnapshot snapshot_teacher(const policy::PolicyParams& policy, int step_index);

struct Window {
  const sim::Trajectory* traj = nullptr;
  int t = 0;
};

// ceil(mix * batch) windows from the current dataset, remainder drawn from
// the buffer (uniform over tasks); an empty buffer yields an all-current batch.
std::pair<std::vector<Window>, std::vector<Window>> sample_batch(
    const std::vector<sim::Trajectory>& current, const ReplayBuffer& buffer,
    int batch_size, double mix, Rng& rng);

losses::SampleBatch materialize(const std::vector<Window>& windows, int context_len,
                                int action_dim);

struct AdamState {
  std::vector<ad::Tensor> m, v;
  int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
};

// One adaptive-moment update with bias correction. Rejects non-finite
// gradients with a NumericError.
void adam_step(const std::vector<ad::Value>& params, const std::vector<ad::Tensor>& grads,
               AdamState& state, double lr);

// Scales gradients so their global norm is at most max_norm; returns the
// pre-clip norm.
double clip_global_norm(std::vector<ad::Tensor>& grads, double max_norm);

struct EpochLog {
  int task = 0;
  int epoch = 0;
  losses::LossBreakdown loss;
  double wall_seconds = 0.0;
};

// Base seed for the checkpoint evaluation at (task_index, epoch); episode
// seeds derive from it per evaluated task. Shared with offline recomputation.
uint64_t checkpoint_eval_seed(uint64_t run_seed, int task_index, int epoch);

struct RunHooks {
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(int task, int epoch, const policy::PolicyParams&)> on_checkpoint;
};

struct LifelongReport {
  eval::SuccessTensor success;
  std::vector<eval::DriftRecord> drift;
  std::vector<EpochLog> epochs;
};

// Trains on one task: `epochs` passes of minibatch optimization, evaluating
// all tasks seen so far at each eval epoch. `task_index` is 0-based.
void train_task(policy::PolicyParams& student, const TeacherSnapshot* teacher,
                const std::vector<sim::Trajectory>& task_data, const ReplayBuffer& buffer,
                const TrainConfig& config, const sim::TaskSuite& suite, int task_index,
                eval::SuccessTensor& success, Rng& batch_rng, Rng& kl_rng,
                const RunHooks& hooks);

// The full sequential loop over the suite. Demos for task k are pushed into
// the buffer only after task k trains (ER / M2DISTILL); raw datasets of
// earlier tasks are never touched again.
LifelongReport run_lifelong(const sim::TaskSuite& suite,
                            const std::vector<std::vector<sim::Trajectory>>& demos,
                            const policy::PolicyConfig& policy_config,
                            const TrainConfig& config, const RunHooks& hooks = {});

}  // namespace m2d::train

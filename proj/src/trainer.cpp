#include "m2d/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace m2d::train {

std::string to_string(Method m) {
  switch (m) {
    case Method::kSequential: return "sequential";
    case Method::kEr: return "er";
    case Method::kM2Distill: return "m2distill";
  }
  return "m2distill";
}

Method method_from_string(const std::string& s) {
  if (s == "sequential") return Method::kSequential;
  if (s == "er") return Method::kEr;
  if (s == "m2distill") return Method::kM2Distill;
  throw ConfigError("unknown method: " + s +
                    " (expected sequential, er, or m2distill)");
}

ReplayBuffer::ReplayBuffer(int capacity) : capacity_(capacity) {
  check_arg(capacity >= 1, "ReplayBuffer: capacity must be >= 1");
}

int ReplayBuffer::total() const {
  int n = 0;
  for (const auto& [id, trajs] : tasks_) n += static_cast<int>(trajs.size());
  return n;
}

std::vector<std::pair<int, int>> ReplayBuffer::counts() const {
  std::vector<std::pair<int, int>> out;
  out.reserve(tasks_.size());
  for (const auto& [id, trajs] : tasks_)
    out.emplace_back(id, static_cast<int>(trajs.size()));
  return out;
}

void ReplayBuffer::push(int task_id, const std::vector<sim::Trajectory>& trajectories,
                        Rng& rng) {
  for (const auto& [id, trajs] : tasks_)
    check_arg(id != task_id, "ReplayBuffer: task ", task_id, " already pushed");
  tasks_.emplace_back(task_id, trajectories);
  while (total() > capacity_) {
    size_t largest = 0;
    for (size_t i = 1; i < tasks_.size(); ++i)
      if (tasks_[i].second.size() > tasks_[largest].second.size()) largest = i;
    auto& trajs = tasks_[largest].second;
    trajs.erase(trajs.begin() + static_cast<int64_t>(rng.uniform_int(
                    static_cast<int64_t>(trajs.size()))));
  }
}

const sim::Trajectory& ReplayBuffer::sample(Rng& rng) const {
  check_arg(!tasks_.empty(), "ReplayBuffer: sample from empty buffer");
  for (const auto& [id, trajs] : tasks_)
    check_arg(!trajs.empty(), "ReplayBuffer: task ", id, " has no trajectories");
  const auto& task = tasks_[static_cast<size_t>(rng.uniform_int(
      static_cast<int64_t>(tasks_.size())))];
  return task.second[static_cast<size_t>(
      rng.uniform_int(static_cast<int64_t>(task.second.size())))];
}

void TrainConfig::validate() const {
  check_arg(epochs >= 1, "TrainConfig: epochs must be >= 1");
  check_arg(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  check_arg(learning_rate > 0.0, "TrainConfig: learning_rate must be > 0");
  check_arg(kl_samples >= 1, "TrainConfig: kl_samples must be >= 1");
  check_arg(!eval_epochs.empty(), "TrainConfig: eval_epochs must be nonempty");
  check_arg(std::is_sorted(eval_epochs.begin(), eval_epochs.end()),
            "TrainConfig: eval_epochs must be sorted");
  check_arg(eval_epochs.front() >= 1 && eval_epochs.back() <= epochs,
            "TrainConfig: epochs must be >= max(eval_epochs)");
  check_arg(eval_episodes >= 1, "TrainConfig: eval_episodes must be >= 1");
  check_arg(replay_mix >= 0.0 && replay_mix <= 1.0,
            "TrainConfig: replay_mix must be in [0,1]");
  check_arg(replay_capacity >= 1, "TrainConfig: replay_capacity must be >= 1");
  weights.validate();
}

losses::LossWeights TrainConfig::effective_weights() const {
  if (method == Method::kM2Distill) return weights;
  return losses::LossWeights{0.0, 0.0, 0.0, 0.0};
}

TeacherSnapshot snapshot_teacher(const policy::PolicyParams& policy, int step_index) {
  return TeacherSnapshot{policy::clone_constant(policy), step_index};
}

std::pair<std::vector<Window>, std::vector<Window>> sample_batch(
    const std::vector<sim::Trajectory>& current, const ReplayBuffer& buffer,
    int batch_size, double mix, Rng& rng) {
  check_arg(!current.empty(), "sample_batch: current dataset is empty");
  check_arg(batch_size >= 1, "sample_batch: batch_size must be >= 1");
  int n_current = buffer.empty()
                      ? batch_size
                      : static_cast<int>(std::ceil(mix * batch_size));
  n_current = std::min(batch_size, std::max(0, n_current));
  if (buffer.empty()) n_current = batch_size;

  auto draw = [&](const sim::Trajectory& traj) {
    int t = static_cast<int>(rng.uniform_int(static_cast<int64_t>(traj.steps.size())));
    return Window{&traj, t};
  };
  std::vector<Window> cur, ex;
  cur.reserve(static_cast<size_t>(n_current));
  for (int i = 0; i < n_current; ++i) {
    const auto& traj = current[static_cast<size_t>(
        rng.uniform_int(static_cast<int64_t>(current.size())))];
    cur.push_back(draw(traj));
  }
  for (int i = n_current; i < batch_size; ++i) ex.push_back(draw(buffer.sample(rng)));
  return {std::move(cur), std::move(ex)};
}

losses::SampleBatch materialize(const std::vector<Window>& windows, int context_len,
                                int action_dim) {
  losses::SampleBatch batch;
  if (windows.empty()) return batch;
  check_arg(action_dim == 3, "materialize: simulator actions are 3-d");
  std::vector<std::vector<const sim::MultiModalObs*>> obs_windows;
  obs_windows.reserve(windows.size());
  batch.actions = ad::Tensor({static_cast<int>(windows.size()), action_dim});
  for (size_t i = 0; i < windows.size(); ++i) {
    const auto& w = windows[i];
    check_arg(w.traj != nullptr && w.t >= 0 &&
                  w.t < static_cast<int>(w.traj->steps.size()),
              "materialize: window index out of range");
    std::vector<const sim::MultiModalObs*> win;
    int start = std::max(0, w.t - context_len + 1);
    for (int t = start; t <= w.t; ++t)
      win.push_back(&w.traj->steps[static_cast<size_t>(t)].obs);
    obs_windows.push_back(std::move(win));
    const sim::Action& a = w.traj->steps[static_cast<size_t>(w.t)].action;
    double* row = batch.actions.data() + static_cast<int64_t>(i) * action_dim;
    row[0] = a.dx;
    row[1] = a.dy;
    row[2] = a.grip;
  }
  batch.obs = policy::make_obs_batch(obs_windows, context_len);
  return batch;
}

void adam_step(const std::vector<ad::Value>& params, const std::vector<ad::Tensor>& grads,
               AdamState& state, double lr) {
  check_arg(params.size() == grads.size(), "adam_step: params/grads size mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p->val.shape());
      state.v.emplace_back(p->val.shape());
    }
  }
  check_arg(state.m.size() == params.size(), "adam_step: state size mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    check_shape(grads[i].same_shape(params[i]->val), "adam_step: gradient shape mismatch");
    check_numeric(grads[i].all_finite(), "adam_step: non-finite gradient rejected");
  }
  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    ad::Tensor& val = params[i]->val;
    ad::Tensor& m = state.m[i];
    ad::Tensor& v = state.v[i];
    const ad::Tensor& g = grads[i];
    for (int64_t j = 0; j < val.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      val[j] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

double clip_global_norm(std::vector<ad::Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (int64_t i = 0; i < g.size(); ++i) sq += g[i] * g[i];
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double scale = max_norm / norm;
    for (auto& g : grads)
      for (int64_t i = 0; i < g.size(); ++i) g[i] *= scale;
  }
  return norm;
}

namespace {

int64_t window_count(const std::vector<sim::Trajectory>& data) {
  int64_t n = 0;
  for (const auto& traj : data) n += static_cast<int64_t>(traj.steps.size());
  return n;
}

}  // namespace

uint64_t checkpoint_eval_seed(uint64_t run_seed, int task_index, int epoch) {
  return mix64(run_seed ^ mix64(0x6576616cULL +
                                static_cast<uint64_t>(task_index) * 1000 +
                                static_cast<uint64_t>(epoch)));
}

void train_task(policy::PolicyParams& student, const TeacherSnapshot* teacher,
                const std::vector<sim::Trajectory>& task_data, const ReplayBuffer& buffer,
                const TrainConfig& config, const sim::TaskSuite& suite, int task_index,
                eval::SuccessTensor& success, Rng& batch_rng, Rng& kl_rng,
                const RunHooks& hooks) {
  check_arg(!task_data.empty(), "train_task: task data is empty");
  config.validate();
  losses::LossWeights weights = config.effective_weights();
  const policy::PolicyParams* teacher_params =
      (teacher != nullptr && weights.any_active()) ? &teacher->params : nullptr;

  std::vector<ad::Value> params = student.params.values();
  AdamState adam;
  int64_t steps_per_epoch =
      (window_count(task_data) + config.batch_size - 1) / config.batch_size;
  steps_per_epoch = std::max<int64_t>(1, steps_per_epoch);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    losses::LossBreakdown epoch_mean;
    for (int64_t step = 0; step < steps_per_epoch; ++step) {
      auto [cur_w, ex_w] = sample_batch(task_data, buffer, config.batch_size,
                                        config.replay_mix, batch_rng);
      losses::SampleBatch cur =
          materialize(cur_w, student.config.context_len, student.config.action_dim);
      losses::SampleBatch ex =
          materialize(ex_w, student.config.context_len, student.config.action_dim);
      losses::LossGraph loss;
      try {
        loss = losses::total_loss(student, teacher_params, cur, ex, weights,
                                  config.kl_samples, kl_rng);
        check_numeric(std::isfinite(loss.parts.total), "non-finite total loss");
        std::vector<ad::Tensor> grads = ad::backprop(loss.total, params);
        clip_global_norm(grads, config.grad_clip);
        adam_step(params, grads, adam, config.learning_rate);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at task " + std::to_string(task_index) +
                           " epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step) + ": " + e.what());
      }
      epoch_mean.bc_nll += loss.parts.bc_nll;
      epoch_mean.l_agentview += loss.parts.l_agentview;
      epoch_mean.l_handeye += loss.parts.l_handeye;
      epoch_mean.l_text += loss.parts.l_text;
      epoch_mean.l_extra += loss.parts.l_extra;
      epoch_mean.l_policy += loss.parts.l_policy;
      epoch_mean.total += loss.parts.total;
    }
    double inv = 1.0 / static_cast<double>(steps_per_epoch);
    epoch_mean.bc_nll *= inv;
    epoch_mean.l_agentview *= inv;
    epoch_mean.l_handeye *= inv;
    epoch_mean.l_text *= inv;
    epoch_mean.l_extra *= inv;
    epoch_mean.l_policy *= inv;
    epoch_mean.total *= inv;

    bool is_eval_epoch = std::find(config.eval_epochs.begin(), config.eval_epochs.end(),
                                   epoch) != config.eval_epochs.end();
    if (is_eval_epoch) {
      policy::EvalPolicy frozen(student);
      uint64_t eval_seed = checkpoint_eval_seed(config.seed, task_index, epoch);
      for (int j = 0; j <= task_index; ++j) {
        success.set(task_index, j, epoch,
                    eval::rollout_success(frozen, suite.tasks[static_cast<size_t>(j)],
                                          config.eval_episodes, eval_seed,
                                          config.eval_threads));
      }
      if (hooks.on_checkpoint) hooks.on_checkpoint(task_index, epoch, student);
    }
    if (hooks.on_epoch) {
      auto t1 = std::chrono::steady_clock::now();
      EpochLog log;
      log.task = task_index;
      log.epoch = epoch;
      log.loss = epoch_mean;
      log.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
      hooks.on_epoch(log);
    }
  }
}

LifelongReport run_lifelong(const sim::TaskSuite& suite,
                            const std::vector<std::vector<sim::Trajectory>>& demos,
                            const policy::PolicyConfig& policy_config,
                            const TrainConfig& config, const RunHooks& hooks) {
  config.validate();
  check_arg(!suite.tasks.empty(), "run_lifelong: empty suite");
  check_arg(demos.size() == suite.tasks.size(),
            "run_lifelong: need one demo set per task");
  for (const auto& d : demos)
    check_arg(!d.empty(), "run_lifelong: every task needs demonstrations");

  int k_count = static_cast<int>(suite.tasks.size());
  Rng root(config.seed);
  Rng batch_rng = root.split(0x626174);
  Rng kl_rng = root.split(0x6b6c00);
  Rng evict_rng = root.split(0x657669);

  policy::PolicyParams student = policy::init_params(policy_config, mix64(config.seed));
  ReplayBuffer buffer(config.replay_capacity);

  LifelongReport report;
  report.success = eval::SuccessTensor(k_count, config.eval_epochs);
  RunHooks inner = hooks;
  inner.on_epoch = [&](const EpochLog& log) {
    report.epochs.push_back(log);
    if (hooks.on_epoch) hooks.on_epoch(log);
  };

  // Fixed probe for drift: demonstrations of the first task.
  const std::vector<sim::Trajectory>& probe = demos[0];
  std::optional<policy::PolicyParams> previous_final;
  const ReplayBuffer no_replay(config.replay_capacity);

  for (int k = 0; k < k_count; ++k) {
    std::optional<TeacherSnapshot> teacher;
    if (k >= 1 && config.method == Method::kM2Distill)
      teacher = snapshot_teacher(student, k - 1);
    const ReplayBuffer& task_buffer =
        config.method == Method::kSequential ? no_replay : buffer;
    train_task(student, teacher ? &*teacher : nullptr, demos[static_cast<size_t>(k)],
               task_buffer, config, suite, k, report.success, batch_rng, kl_rng, inner);
    if (config.method != Method::kSequential)
      buffer.push(suite.tasks[static_cast<size_t>(k)].task_id,
                  demos[static_cast<size_t>(k)], evict_rng);
    if (k >= 1) {
      eval::DriftRecord drift = eval::latent_drift(student, *previous_final, probe);
      drift.step = k;
      report.drift.push_back(drift);
    }
    previous_final = policy::clone_trainable(student);
  }
  return report;
}

}  // namespace m2d::train

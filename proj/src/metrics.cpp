#include "m2d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace m2d::eval {

SuccessTensor::SuccessTensor(int num_tasks, std::vector<int> eval_epochs)
    : num_tasks_(num_tasks), eval_epochs_(std::move(eval_epochs)) {
  check_arg(num_tasks_ >= 1, "SuccessTensor: need at least one task");
  check_arg(!eval_epochs_.empty(), "SuccessTensor: need at least one eval epoch");
  check_arg(std::is_sorted(eval_epochs_.begin(), eval_epochs_.end()),
            "SuccessTensor: eval epochs must be sorted");
  size_t cells = static_cast<size_t>(num_tasks_) * num_tasks_ * eval_epochs_.size();
  values_.assign(cells, 0.0);
  filled_.assign(cells, false);
}

int SuccessTensor::epoch_pos(int epoch) const {
  for (size_t i = 0; i < eval_epochs_.size(); ++i)
    if (eval_epochs_[i] == epoch) return static_cast<int>(i);
  throw std::invalid_argument("SuccessTensor: epoch " + std::to_string(epoch) +
                              " is not an eval epoch");
}

int SuccessTensor::index(int i, int j, int epoch_pos) const {
  check_arg(i >= 0 && i < num_tasks_ && j >= 0 && j <= i,
            "SuccessTensor: invalid cell (", i, ",", j, "); need j <= i");
  return (i * num_tasks_ + j) * static_cast<int>(eval_epochs_.size()) + epoch_pos;
}

void SuccessTensor::set(int i, int j, int epoch, double rate) {
  check_arg(rate >= 0.0 && rate <= 1.0, "SuccessTensor: rate out of [0,1]");
  int idx = index(i, j, epoch_pos(epoch));
  values_[static_cast<size_t>(idx)] = rate;
  filled_[static_cast<size_t>(idx)] = true;
}

double SuccessTensor::at(int i, int j, int epoch) const {
  int idx = index(i, j, epoch_pos(epoch));
  check_arg(filled_[static_cast<size_t>(idx)], "SuccessTensor: cell (", i, ",", j,
            ",", epoch, ") not filled");
  return values_[static_cast<size_t>(idx)];
}

bool SuccessTensor::has(int i, int j, int epoch) const {
  if (i < 0 || i >= num_tasks_ || j < 0 || j > i) return false;
  return filled_[static_cast<size_t>(index(i, j, epoch_pos(epoch)))];
}

bool SuccessTensor::complete() const {
  for (int i = 0; i < num_tasks_; ++i)
    for (int j = 0; j <= i; ++j)
      for (size_t e = 0; e < eval_epochs_.size(); ++e)
        if (!filled_[static_cast<size_t>((i * num_tasks_ + j) *
                                             static_cast<int>(eval_epochs_.size()) +
                                         static_cast<int>(e))])
          return false;
  return true;
}

LifelongMetrics compute_metrics(const SuccessTensor& c) {
  check_arg(c.complete(), "compute_metrics: incomplete success tensor");
  int k_count = c.num_tasks();
  const auto& epochs = c.eval_epochs();
  int e_last = epochs.back();

  double fwt_sum = 0.0, nbt_sum = 0.0, auc_sum = 0.0;
  for (int k = 0; k < k_count; ++k) {
    double fwt_k = 0.0, best_k = 0.0;
    for (int e : epochs) {
      double v = c.at(k, k, e);
      fwt_k += v;
      best_k = std::max(best_k, v);
    }
    fwt_k /= static_cast<double>(epochs.size());
    fwt_sum += fwt_k;

    double later_sum = 0.0, drop_sum = 0.0;
    for (int tau = k + 1; tau < k_count; ++tau) {
      double v = c.at(tau, k, e_last);
      later_sum += v;
      drop_sum += best_k - v;
    }
    if (k < k_count - 1) nbt_sum += drop_sum / static_cast<double>(k_count - 1 - k);
    auc_sum += (fwt_k + later_sum) / static_cast<double>(k_count - k);
  }
  LifelongMetrics m;
  m.fwt = fwt_sum / k_count;
  m.nbt = k_count > 1 ? nbt_sum / (k_count - 1) : 0.0;
  m.auc = auc_sum / k_count;
  return m;
}

double rollout_success(const policy::EvalPolicy& policy, const sim::TaskSpec& task,
                       int episodes, uint64_t seed, int max_threads) {
  check_arg(episodes >= 1, "rollout_success: episodes must be >= 1");
  const int len = policy.config().context_len;
  std::vector<char> success(static_cast<size_t>(episodes), 0);
  auto run_one = [&](int64_t ep) {
    std::deque<std::vector<double>> cache;
    sim::Trajectory traj = sim::run_episode(
        task, episode_seed(seed, static_cast<uint64_t>(task.task_id), static_cast<uint64_t>(ep)),
        [&](const sim::SimState&, const sim::MultiModalObs& obs) {
          cache.push_back(policy.encode_obs(obs));
          while (static_cast<int>(cache.size()) > len) cache.pop_front();
          std::vector<const std::vector<double>*> window;
          window.reserve(static_cast<size_t>(len));
          // Left-pad with the episode's first observation tokens.
          for (int i = static_cast<int>(cache.size()); i < len; ++i)
            window.push_back(&cache.front());
          for (const auto& block : cache) window.push_back(&block);
          return policy.act(policy.forward_tokens(window));
        });
    success[static_cast<size_t>(ep)] = traj.success ? 1 : 0;
  };
  parallel_for(episodes, run_one, max_threads);
  int hits = 0;
  for (char s : success) hits += s;
  return static_cast<double>(hits) / episodes;
}

double rollout_success(const policy::PolicyParams& params, const sim::TaskSpec& task,
                       int episodes, uint64_t seed, int max_threads) {
  policy::EvalPolicy frozen(params);
  return rollout_success(frozen, task, episodes, seed, max_threads);
}

namespace {
double mean_sq_dist(const ad::Value& a, const ad::Value& b) {
  // Both [N x 1 x D]; mean over N of squared distance.
  int n = a->shape()[0], d = a->shape()[2];
  const double* pa = a->val.data();
  const double* pb = b->val.data();
  double acc = 0.0;
  for (int64_t i = 0; i < static_cast<int64_t>(n) * d; ++i) {
    double diff = pa[i] - pb[i];
    acc += diff * diff;
  }
  return acc / n;
}
}  // namespace

DriftRecord latent_drift(const policy::PolicyParams& current,
                         const policy::PolicyParams& previous,
                         const std::vector<sim::Trajectory>& probe) {
  check_arg(current.config == previous.config,
            "latent_drift: policies must share a config");
  check_arg(!probe.empty(), "latent_drift: empty probe dataset");
  std::vector<const sim::MultiModalObs*> all;
  for (const auto& traj : probe)
    for (const auto& step : traj.steps) all.push_back(&step.obs);
  check_arg(!all.empty(), "latent_drift: probe has no steps");

  // Encoders act per timestep, so latents are computed with L = 1 windows.
  std::vector<std::vector<const sim::MultiModalObs*>> windows;
  windows.reserve(all.size());
  for (const auto* obs : all) windows.push_back({obs});
  policy::ObsBatch batch = policy::make_obs_batch(windows, 1);

  policy::PolicyParams cur = policy::clone_constant(current);
  policy::PolicyParams prev = policy::clone_constant(previous);
  policy::LatentSet lc = policy::encode(cur, batch);
  policy::LatentSet lp = policy::encode(prev, batch);

  DriftRecord r;
  r.agentview = mean_sq_dist(lc.agentview, lp.agentview);
  r.handeye = mean_sq_dist(lc.handeye, lp.handeye);
  r.lang = mean_sq_dist(lc.lang, lp.lang);
  r.joint = mean_sq_dist(lc.joint, lp.joint);
  r.gripper = mean_sq_dist(lc.gripper, lp.gripper);
  return r;
}

}  // namespace m2d::eval

#include <doctest.h>

#include <cmath>

#include "m2d/metrics.hpp"
#include "m2d/trainer.hpp"

using namespace m2d;
using namespace m2d::eval;

TEST_CASE("compute_metrics: hand-derived K=2 example") {
  SuccessTensor c(2, {50});
  c.set(0, 0, 50, 1.0);
  c.set(1, 0, 50, 0.5);
  c.set(1, 1, 50, 1.0);
  LifelongMetrics m = compute_metrics(c);
  CHECK(m.fwt == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.nbt == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.auc == doctest::Approx(0.875).epsilon(1e-12));
}

TEST_CASE("compute_metrics: perfect retention has zero NBT") {
  SuccessTensor c(3, {10, 20});
  double diag[3] = {0.8, 0.6, 0.9};
  for (int i = 0; i < 3; ++i) {
    c.set(i, i, 10, diag[i] - 0.1);
    c.set(i, i, 20, diag[i]);
    for (int j = 0; j < i; ++j) {
      c.set(i, j, 10, diag[j]);
      c.set(i, j, 20, diag[j]);  // later steps hold the best diagonal value
    }
  }
  LifelongMetrics m = compute_metrics(c);
  CHECK(m.nbt == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("compute_metrics: all-zero tensor gives zero metrics") {
  SuccessTensor c(3, {10, 20});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j <= i; ++j)
      for (int e : {10, 20}) c.set(i, j, e, 0.0);
  LifelongMetrics m = compute_metrics(c);
  CHECK(m.fwt == 0.0);
  CHECK(m.nbt == 0.0);
  CHECK(m.auc == 0.0);
}

TEST_CASE("compute_metrics rejects incomplete tensors and bad cells") {
  SuccessTensor c(2, {10});
  c.set(0, 0, 10, 0.5);
  CHECK_THROWS_AS(compute_metrics(c), std::invalid_argument);
  CHECK_THROWS_AS(c.set(0, 1, 10, 0.5), std::invalid_argument);  // j > i
  CHECK_THROWS_AS(c.set(0, 0, 11, 0.5), std::invalid_argument);  // not an epoch
  CHECK_THROWS_AS(c.set(0, 0, 10, 1.5), std::invalid_argument);  // out of range
}

TEST_CASE("metrics stay in their documented ranges on random tensors") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    SuccessTensor c(4, {10, 20, 30});
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j <= i; ++j)
        for (int e : {10, 20, 30}) c.set(i, j, e, rng.uniform());
    LifelongMetrics m = compute_metrics(c);
    CHECK(m.fwt >= 0.0);
    CHECK(m.fwt <= 1.0);
    CHECK(m.auc >= 0.0);
    CHECK(m.auc <= 1.0);
    CHECK(m.nbt >= -1.0);
    CHECK(m.nbt <= 1.0);
  }
}

TEST_CASE("rollout_success: expert-equivalent policy bounds and determinism") {
  sim::TaskSuite suite = sim::make_suite(sim::SuiteKind::kObject, 3, 3);
  const sim::TaskSpec& task = suite.tasks[0];

  // A random-init policy should be near zero success on a nontrivial task.
  policy::PolicyConfig c;
  c.latent_dim = 16;
  c.enc_hidden = 8;
  c.context_len = 2;
  c.components = 2;
  policy::PolicyParams random_policy = policy::init_params(c, 123);
  double random_rate = rollout_success(random_policy, task, 20, 7);
  CHECK(random_rate <= 0.2);

  double again = rollout_success(random_policy, task, 20, 7);
  CHECK(random_rate == again);

  // Parallel evaluation returns exactly the serial rate.
  double serial = rollout_success(random_policy, task, 16, 11, 1);
  double parallel = rollout_success(random_policy, task, 16, 11, 4);
  CHECK(serial == parallel);
}

TEST_CASE("latent_drift: zero at identity, constant for the lang modality") {
  sim::TaskSuite suite = sim::make_suite(sim::SuiteKind::kObject, 2, 5);
  auto probe = sim::collect_demos(suite.tasks[0], 3, 55);

  policy::PolicyConfig c;
  c.latent_dim = 16;
  c.enc_hidden = 8;
  c.context_len = 2;
  c.components = 2;
  policy::PolicyParams a = policy::init_params(c, 1);
  policy::PolicyParams b = policy::init_params(c, 2);

  DriftRecord same = latent_drift(a, a, probe);
  CHECK(same.agentview == 0.0);
  CHECK(same.handeye == 0.0);
  CHECK(same.lang == 0.0);
  CHECK(same.joint == 0.0);
  CHECK(same.gripper == 0.0);

  DriftRecord diff = latent_drift(a, b, probe);
  CHECK(diff.agentview > 0.0);

  // The lang input is constant per task, so per-timestep lang displacement is
  // a single value; any probe subset of the same task yields the same drift.
  std::vector<sim::Trajectory> subset{probe[0]};
  std::vector<sim::Trajectory> subset2{probe[1], probe[2]};
  DriftRecord d1 = latent_drift(a, b, subset);
  DriftRecord d2 = latent_drift(a, b, subset2);
  CHECK(d1.lang == doctest::Approx(d2.lang).epsilon(1e-12));

  // recomputation oracle: drift matches a direct evaluation from dumped latents
  {
    std::vector<const sim::MultiModalObs*> all;
    for (const auto& traj : probe)
      for (const auto& s : traj.steps) all.push_back(&s.obs);
    double acc = 0.0;
    policy::EvalPolicy ea(a), eb(b);
    for (const auto* obs : all) {
      std::vector<double> ta = ea.encode_obs(*obs);
      std::vector<double> tb = eb.encode_obs(*obs);
      // agentview tokens occupy block 1 in token order
      for (int i = 0; i < c.latent_dim; ++i) {
        double d = ta[static_cast<size_t>(c.latent_dim + i)] -
                   tb[static_cast<size_t>(c.latent_dim + i)];
        acc += d * d;
      }
    }
    acc /= static_cast<double>(all.size());
    CHECK(diff.agentview == doctest::Approx(acc).epsilon(1e-10));
  }

  policy::PolicyConfig other = c;
  other.latent_dim = 32;
  policy::PolicyParams mismatched = policy::init_params(other, 3);
  CHECK_THROWS_AS(latent_drift(a, mismatched, probe), std::invalid_argument);
}

TEST_CASE("rollout_success: scripted-expert-level policy succeeds") {
  // Wrap the scripted expert as an oracle through the simulator directly to
  // validate the success-rate accounting (the policy path is exercised by the
  // trainer tests).
  sim::TaskSuite suite = sim::make_suite(sim::SuiteKind::kGoal, 2, 9);
  const sim::TaskSpec& task = suite.tasks[1];
  int ok = 0;
  const int episodes = 40;
  for (int ep = 0; ep < episodes; ++ep) {
    auto traj = sim::run_episode(
        task, episode_seed(3, static_cast<uint64_t>(task.task_id), static_cast<uint64_t>(ep)),
        [&](const sim::SimState& s, const sim::MultiModalObs&) {
          return sim::scripted_expert(task, s);
        });
    ok += traj.success;
  }
  CHECK(static_cast<double>(ok) / episodes >= 0.95);
}

#include <doctest.h>

#include <cmath>

#include "m2d/losses.hpp"
#include "oracles.hpp"

using namespace m2d;
using namespace m2d::losses;

namespace {

policy::PolicyConfig tiny_config() {
  policy::PolicyConfig c;
  c.latent_dim = 16;
  c.context_len = 2;
  c.components = 2;
  c.action_dim = 3;
  c.enc_hidden = 8;
  return c;
}

sim::MultiModalObs random_obs(Rng& rng) {
  sim::MultiModalObs o;
  for (double& v : o.agentview) v = rng.uniform(-1.0, 1.0);
  for (double& v : o.handeye) v = rng.uniform(-1.0, 1.0);
  for (double& v : o.lang) v = rng.uniform(-1.0, 1.0);
  for (double& v : o.joint) v = rng.uniform(-1.0, 1.0);
  o.gripper[0] = rng.uniform(0.0, 1.0);
  return o;
}

SampleBatch random_batch(int b, const policy::PolicyConfig& c, Rng& rng,
                         std::vector<std::vector<sim::MultiModalObs>>& store) {
  store.assign(static_cast<size_t>(b), {});
  std::vector<std::vector<const sim::MultiModalObs*>> windows(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    for (int t = 0; t < c.context_len; ++t)
      store[static_cast<size_t>(i)].push_back(random_obs(rng));
    for (const auto& o : store[static_cast<size_t>(i)])
      windows[static_cast<size_t>(i)].push_back(&o);
  }
  SampleBatch batch;
  batch.obs = policy::make_obs_batch(windows, c.context_len);
  batch.actions = ad::Tensor({b, c.action_dim});
  for (int64_t i = 0; i < batch.actions.size(); ++i)
    batch.actions[i] = rng.uniform(-1.0, 1.0);
  return batch;
}

gmm::GmmValue constant_head(const gmm::GmmParams& p) { return gmm::to_value(p); }

}  // namespace

TEST_CASE("bc_nll: unit Gaussian at its mean gives 0.5 ln 2pi") {
  gmm::GmmParams p;
  p.components = 1;
  p.action_dim = 1;
  p.logits = {0.0};
  p.means = {0.3};
  p.log_scales = {0.0};
  ad::Tensor action({1, 1}, {0.3});
  double nll = bc_nll(constant_head(p), action)->val.item();
  CHECK(nll == doctest::Approx(0.5 * std::log(2.0 * 3.141592653589793)).epsilon(1e-12));

  // NLL grows monotonically as the mean moves away from the action
  double prev = nll;
  for (double off : {0.2, 0.5, 0.9, 1.5}) {
    gmm::GmmParams q = p;
    q.means = {0.3 + off};
    double v = bc_nll(constant_head(q), action)->val.item();
    CHECK(v > prev);
    prev = v;
  }

  CHECK_THROWS(bc_nll(constant_head(p), ad::Tensor({0, 1})));
}

TEST_CASE("bc_nll: batch mean equals the mean of per-sample NLLs") {
  Rng rng(3);
  gmm::GmmParams p = oracles::random_gmm(3, 2, rng);
  ad::Tensor actions({4, 2});
  for (int64_t i = 0; i < actions.size(); ++i) actions[i] = rng.uniform(-1.0, 1.0);
  // batched head: same mixture replicated
  ad::Tensor logits({4, 3}), means({4, 3, 2}), scales({4, 3, 2});
  for (int b = 0; b < 4; ++b) {
    std::copy(p.logits.begin(), p.logits.end(), logits.data() + b * 3);
    std::copy(p.means.begin(), p.means.end(), means.data() + b * 6);
    std::copy(p.log_scales.begin(), p.log_scales.end(), scales.data() + b * 6);
  }
  gmm::GmmValue head{ad::constant(logits), ad::constant(means), ad::constant(scales)};
  double batched = bc_nll(head, actions)->val.item();
  double acc = 0.0;
  for (int b = 0; b < 4; ++b)
    acc -= gmm::log_pdf(p, {actions[b * 2], actions[b * 2 + 1]});
  CHECK(batched == doctest::Approx(acc / 4.0).epsilon(1e-12));
}

TEST_CASE("modality_l2: zero, direct sum, quadratic scaling") {
  ad::Value a = ad::constant(ad::Tensor({1, 1, 64}));
  CHECK(modality_l2(a, a)->val.item() == 0.0);

  ad::Tensor ones({1, 1, 64});
  for (int64_t i = 0; i < 64; ++i) ones[i] = 1.0;
  ad::Value b = ad::constant(ones);
  CHECK(modality_l2(b, a)->val.item() == doctest::Approx(64.0));

  ad::Tensor twos({1, 1, 64});
  for (int64_t i = 0; i < 64; ++i) twos[i] = 2.0;
  CHECK(modality_l2(ad::constant(twos), a)->val.item() == doctest::Approx(256.0));

  CHECK_THROWS_AS(modality_l2(a, ad::constant(ad::Tensor({1, 2, 64}))), ShapeError);

  // averaged over N and L
  Rng rng(5);
  ad::Tensor x({3, 4, 8}), y({3, 4, 8});
  for (int64_t i = 0; i < x.size(); ++i) {
    x[i] = rng.uniform(-1.0, 1.0);
    y[i] = rng.uniform(-1.0, 1.0);
  }
  double manual = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) manual += (x[i] - y[i]) * (x[i] - y[i]);
  manual /= 12.0;
  CHECK(modality_l2(ad::constant(x), ad::constant(y))->val.item() ==
        doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("distill_features: zero at identical params, teacher gets no gradient") {
  policy::PolicyConfig c = tiny_config();
  policy::PolicyParams student = policy::init_params(c, 7);
  policy::PolicyParams teacher = policy::clone_constant(student);
  Rng rng(8);
  std::vector<std::vector<sim::MultiModalObs>> store;
  SampleBatch batch = random_batch(3, c, rng, store);

  policy::LatentSet sl = policy::encode(student, batch.obs);
  policy::LatentSet tl = policy::encode(teacher, batch.obs);
  FeatureLosses f = distill_features(sl, tl);
  CHECK(f.agentview->val.item() == 0.0);
  CHECK(f.handeye->val.item() == 0.0);
  CHECK(f.text->val.item() == 0.0);
  CHECK(f.joint->val.item() == 0.0);
  CHECK(f.gripper->val.item() == 0.0);

  // teacher subgraph is constant: latents require no gradient
  CHECK_FALSE(tl.agentview->requires_grad);
  CHECK(sl.agentview->requires_grad);
}

TEST_CASE("distill_features gradient matches finite differences") {
  policy::PolicyConfig c = tiny_config();
  policy::PolicyParams student = policy::init_params(c, 9);
  policy::PolicyParams teacher = policy::clone_constant(policy::init_params(c, 10));
  Rng rng(11);
  std::vector<std::vector<sim::MultiModalObs>> store;
  SampleBatch batch = random_batch(2, c, rng, store);

  auto f = [&]() {
    policy::LatentSet sl = policy::encode(student, batch.obs);
    policy::LatentSet tl = policy::encode(teacher, batch.obs);
    FeatureLosses fl = distill_features(sl, tl);
    return ad::add(ad::add(ad::add(fl.agentview, fl.handeye),
                           ad::add(fl.text, fl.joint)),
                   fl.gripper);
  };
  CHECK(ad::finite_diff_check(f, student.params.values(), 1e-5) <= 1e-5);
}

TEST_CASE("l_policy: zero at identity, closed form for single components") {
  Rng rng(12);
  // student == teacher -> exactly 0
  gmm::GmmParams p = oracles::random_gmm(3, 2, rng);
  Rng noise(1);
  CHECK(l_policy(constant_head(p), constant_head(p), 32, noise)->val.item() == 0.0);

  // single-component heads approach the closed-form Gaussian KL
  gmm::GmmParams a, b;
  a.components = b.components = 1;
  a.action_dim = b.action_dim = 2;
  a.logits = b.logits = {0.0};
  a.means = {0.3, -0.2};
  b.means = {0.0, 0.1};
  a.log_scales = {std::log(0.8), std::log(0.6)};
  b.log_scales = {std::log(0.7), std::log(0.9)};
  double closed = gmm::gaussian_kl_closed_form({{0.3, -0.2}, {0.8, 0.6}},
                                               {{0.0, 0.1}, {0.7, 0.9}});
  Rng noise2(2);
  double est = l_policy(constant_head(a), constant_head(b), 200000, noise2)->val.item();
  CHECK(std::fabs(est - closed) <= 0.01);
}

TEST_CASE("l_policy gradient with frozen noise matches finite differences") {
  Rng rng(13);
  gmm::GmmParams sp = oracles::random_gmm(2, 2, rng, 0.4, 1.0);
  gmm::GmmParams tp = oracles::random_gmm(2, 2, rng, 0.4, 1.0);
  ad::Value logits = ad::leaf(ad::Tensor({1, 2}, sp.logits));
  ad::Value means = ad::leaf(ad::Tensor({1, 2, 2}, sp.means));
  ad::Value scales = ad::leaf(ad::Tensor({1, 2, 2}, sp.log_scales));
  auto f = [&]() {
    gmm::GmmValue student{logits, means, scales};
    Rng noise(99);  // frozen across evaluations
    return l_policy(student, constant_head(tp), 16, noise);
  };
  CHECK(ad::finite_diff_check(f, {logits, means, scales}, 1e-6) <= 1e-4);
}

TEST_CASE("l_distill: zero weights, identity, recomposition") {
  policy::PolicyConfig c = tiny_config();
  policy::PolicyParams student = policy::init_params(c, 14);
  policy::PolicyParams teacher = policy::clone_constant(policy::init_params(c, 15));
  Rng rng(16);
  std::vector<std::vector<sim::MultiModalObs>> store;
  SampleBatch ex = random_batch(2, c, rng, store);

  // all lambdas zero -> 0
  Rng noise0(1);
  LossGraph zero = l_distill(student, teacher, ex, LossWeights{0, 0, 0, 0}, 8, noise0);
  CHECK(zero.total->val.item() == 0.0);

  // student == teacher -> 0 exactly
  policy::PolicyParams twin = policy::clone_constant(student);
  Rng noise1(2);
  LossGraph ident = l_distill(student, twin, ex, LossWeights{0.1, 0.2, 0.3, 0.4}, 8, noise1);
  CHECK(ident.total->val.item() == 0.0);

  // weighted recomposition within 1e-12
  LossWeights w{0.07, 0.21, 0.13, 0.29};
  Rng noise2(3);
  LossGraph g = l_distill(student, teacher, ex, w, 8, noise2);
  double recomposed = w.lambda_i * (g.parts.l_agentview + g.parts.l_handeye) +
                      w.lambda_t * g.parts.l_text + w.lambda_e * g.parts.l_extra +
                      w.lambda_p * g.parts.l_policy;
  CHECK(std::fabs(recomposed - g.total->val.item()) <= 1e-12);
}

TEST_CASE("total_loss: first-task case reduces to bc_nll on the current batch") {
  policy::PolicyConfig c = tiny_config();
  policy::PolicyParams student = policy::init_params(c, 17);
  Rng rng(18);
  std::vector<std::vector<sim::MultiModalObs>> store;
  SampleBatch cur = random_batch(3, c, rng, store);
  SampleBatch empty;

  Rng noise(4);
  LossGraph g = total_loss(student, nullptr, cur, empty, LossWeights{}, 8, noise);
  double direct = bc_nll(policy::policy_forward(student, cur.obs), cur.actions)
                      ->val.item();
  CHECK(g.total->val.item() == direct);
  CHECK(g.parts.bc_nll == direct);
  CHECK(g.parts.l_policy == 0.0);

  CHECK_THROWS(total_loss(student, nullptr, empty, empty, LossWeights{}, 8, noise));
}

TEST_CASE("total_loss: zero weights give the union bc_nll; union is sample-weighted") {
  policy::PolicyConfig c = tiny_config();
  policy::PolicyParams student = policy::init_params(c, 19);
  policy::PolicyParams teacher = policy::clone_constant(policy::init_params(c, 20));
  Rng rng(21);
  std::vector<std::vector<sim::MultiModalObs>> s1, s2;
  SampleBatch cur = random_batch(3, c, rng, s1);
  SampleBatch ex = random_batch(2, c, rng, s2);

  Rng noise(5);
  LossGraph g = total_loss(student, &teacher, cur, ex, LossWeights{0, 0, 0, 0}, 8, noise);
  double bc_c = bc_nll(policy::policy_forward(student, cur.obs), cur.actions)->val.item();
  double bc_e = bc_nll(policy::policy_forward(student, ex.obs), ex.actions)->val.item();
  CHECK(g.total->val.item() == doctest::Approx((3 * bc_c + 2 * bc_e) / 5.0).epsilon(1e-14));
}

TEST_CASE("total_loss: student == teacher collapses to bc_nll exactly") {
  policy::PolicyConfig c = tiny_config();
  policy::PolicyParams student = policy::init_params(c, 22);
  policy::PolicyParams teacher = policy::clone_constant(student);
  Rng rng(23);
  std::vector<std::vector<sim::MultiModalObs>> s1, s2;
  SampleBatch cur = random_batch(2, c, rng, s1);
  SampleBatch ex = random_batch(2, c, rng, s2);

  Rng noise(6);
  LossGraph g = total_loss(student, &teacher, cur, ex, LossWeights{}, 8, noise);
  CHECK(g.parts.l_agentview == 0.0);
  CHECK(g.parts.l_handeye == 0.0);
  CHECK(g.parts.l_text == 0.0);
  CHECK(g.parts.l_extra == 0.0);
  CHECK(g.parts.l_policy == 0.0);
  CHECK(g.total->val.item() == g.parts.bc_nll);
}

TEST_CASE("total_loss: removing one lambda changes total by that component") {
  policy::PolicyConfig c = tiny_config();
  policy::PolicyParams student = policy::init_params(c, 24);
  policy::PolicyParams teacher = policy::clone_constant(policy::init_params(c, 25));
  Rng rng(26);
  std::vector<std::vector<sim::MultiModalObs>> s1, s2;
  SampleBatch cur = random_batch(2, c, rng, s1);
  SampleBatch ex = random_batch(2, c, rng, s2);

  LossWeights full{0.11, 0.23, 0.31, 0.41};
  Rng noise_a(7);
  LossGraph g_full = total_loss(student, &teacher, cur, ex, full, 8, noise_a);

  struct Case {
    LossWeights w;
    double delta;
  };
  double l_image = g_full.parts.l_agentview + g_full.parts.l_handeye;
  const Case cases[] = {
      {{0.0, full.lambda_t, full.lambda_e, full.lambda_p}, full.lambda_i * l_image},
      {{full.lambda_i, 0.0, full.lambda_e, full.lambda_p},
       full.lambda_t * g_full.parts.l_text},
      {{full.lambda_i, full.lambda_t, 0.0, full.lambda_p},
       full.lambda_e * g_full.parts.l_extra},
      {{full.lambda_i, full.lambda_t, full.lambda_e, 0.0},
       full.lambda_p * g_full.parts.l_policy},
  };
  for (const auto& tc : cases) {
    Rng noise_b(7);  // same frozen KL noise stream
    LossGraph g = total_loss(student, &teacher, cur, ex, tc.w, 8, noise_b);
    CHECK(std::fabs((g_full.total->val.item() - g.total->val.item()) - tc.delta) <=
          1e-10);
  }
}

TEST_CASE("total_loss gradient (frozen KL noise) matches finite differences") {
  policy::PolicyConfig c = tiny_config();
  policy::PolicyParams student = policy::init_params(c, 27);
  policy::PolicyParams teacher = policy::clone_constant(policy::init_params(c, 28));
  Rng rng(29);
  std::vector<std::vector<sim::MultiModalObs>> s1, s2;
  SampleBatch cur = random_batch(2, c, rng, s1);
  SampleBatch ex = random_batch(2, c, rng, s2);

  LossWeights w{0.05, 0.05, 0.05, 0.05};
  auto f = [&]() {
    Rng noise(314);  // frozen
    return total_loss(student, &teacher, cur, ex, w, 4, noise).total;
  };
  CHECK(ad::finite_diff_check(f, student.params.values(), 1e-4) <= 1e-4);

  // teacher parameters receive zero gradient
  ad::Value loss = f();
  auto teacher_grads = ad::backprop(loss, teacher.params.values());
  for (const auto& g : teacher_grads)
    for (int64_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
}

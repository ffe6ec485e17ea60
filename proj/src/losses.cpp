#include "m2d/losses.hpp"

namespace m2d::losses {

using ad::Value;
using ad::shape_str;

void LossWeights::validate() const {
  check_arg(lambda_i >= 0.0 && lambda_t >= 0.0 && lambda_e >= 0.0 && lambda_p >= 0.0,
            "LossWeights: weights must be nonnegative");
}

Value bc_nll(const gmm::GmmValue& head, const ad::Tensor& actions) {
  check_arg(actions.rank() == 2 && actions.dim(0) >= 1, "bc_nll: empty batch");
  int b = actions.dim(0), a = actions.dim(1);
  check_shape(b == head.batch() && a == head.action_dim(),
              "bc_nll: action batch ", shape_str(actions.shape()),
              " does not match head");
  Value act = ad::reshape(ad::constant(actions), {b, 1, a});
  return ad::mul_scalar(ad::mean_all(gmm::log_pdf(head, act)), -1.0);
}

Value modality_l2(const Value& current, const Value& previous) {
  check_shape(current->shape() == previous->shape(),
              "modality_l2: latent shapes differ: ", shape_str(current->shape()),
              " vs ", shape_str(previous->shape()));
  check_shape(current->val.rank() == 3, "modality_l2: expected [N x L x D]");
  int n = current->shape()[0], l = current->shape()[1];
  Value sq = ad::sum_all(ad::square(ad::sub(current, previous)));
  return ad::mul_scalar(sq, 1.0 / (static_cast<double>(n) * l));
}

FeatureLosses distill_features(const policy::LatentSet& student,
                               const policy::LatentSet& teacher) {
  return FeatureLosses{modality_l2(student.agentview, teacher.agentview),
                       modality_l2(student.handeye, teacher.handeye),
                       modality_l2(student.lang, teacher.lang),
                       modality_l2(student.joint, teacher.joint),
                       modality_l2(student.gripper, teacher.gripper)};
}

Value l_policy(const gmm::GmmValue& student, const gmm::GmmValue& teacher,
               int n_samples, Rng& rng) {
  return gmm::mc_kl(student, teacher, n_samples, rng).loss;
}

namespace {

struct StudentForward {
  policy::LatentSet latents;
  gmm::GmmValue head;
};

StudentForward forward(const policy::PolicyParams& p, const policy::ObsBatch& obs) {
  StudentForward f;
  f.latents = policy::encode(p, obs);
  f.head = policy::gmm_head(p, policy::temporal_aggregate(p, f.latents));
  return f;
}

LossGraph distill_terms(const StudentForward& student_fwd,
                        const policy::PolicyParams& teacher,
                        const SampleBatch& exemplar, const LossWeights& weights,
                        int n_samples, Rng& rng) {
  check_arg(!teacher.params.items.empty() &&
                !teacher.params.items.front().second->requires_grad,
            "distillation teacher must be a frozen parameter set");
  LossGraph g;
  bool need_features =
      weights.lambda_i > 0.0 || weights.lambda_t > 0.0 || weights.lambda_e > 0.0;
  bool need_kl = weights.lambda_p > 0.0;
  if (!need_features && !need_kl) {
    g.total = ad::constant(ad::Tensor::scalar(0.0));
    return g;
  }
  policy::LatentSet teacher_latents = policy::encode(teacher, exemplar.obs);
  std::vector<Value> terms;
  if (need_features) {
    FeatureLosses f = distill_features(student_fwd.latents, teacher_latents);
    g.parts.l_agentview = f.agentview->val.item();
    g.parts.l_handeye = f.handeye->val.item();
    g.parts.l_text = f.text->val.item();
    Value extra = ad::add(f.joint, f.gripper);
    g.parts.l_extra = extra->val.item();
    if (weights.lambda_i > 0.0)
      terms.push_back(ad::mul_scalar(ad::add(f.agentview, f.handeye), weights.lambda_i));
    if (weights.lambda_t > 0.0) terms.push_back(ad::mul_scalar(f.text, weights.lambda_t));
    if (weights.lambda_e > 0.0) terms.push_back(ad::mul_scalar(extra, weights.lambda_e));
  }
  if (need_kl) {
    gmm::GmmValue teacher_head =
        policy::gmm_head(teacher, policy::temporal_aggregate(teacher, teacher_latents));
    Value kl = l_policy(student_fwd.head, teacher_head, n_samples, rng);
    g.parts.l_policy = kl->val.item();
    terms.push_back(ad::mul_scalar(kl, weights.lambda_p));
  }
  Value total = terms.front();
  for (size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  g.total = total;
  return g;
}

}  // namespace

LossGraph l_distill(const policy::PolicyParams& student,
                    const policy::PolicyParams& teacher,
                    const SampleBatch& exemplar, const LossWeights& weights,
                    int n_samples, Rng& rng) {
  weights.validate();
  check_arg(!exemplar.empty(), "l_distill: empty exemplar batch");
  StudentForward f = forward(student, exemplar.obs);
  return distill_terms(f, teacher, exemplar, weights, n_samples, rng);
}

LossGraph total_loss(const policy::PolicyParams& student,
                     const policy::PolicyParams* teacher,
                     const SampleBatch& current, const SampleBatch& exemplar,
                     const LossWeights& weights, int n_samples, Rng& rng) {
  weights.validate();
  check_arg(!current.empty(), "total_loss: current batch must be nonempty");

  StudentForward cur = forward(student, current.obs);
  Value bc_cur = bc_nll(cur.head, current.actions);
  LossGraph out;
  if (exemplar.empty()) {
    out.total = bc_cur;
    out.parts.bc_nll = bc_cur->val.item();
    out.parts.total = out.total->val.item();
    return out;
  }

  StudentForward ex = forward(student, exemplar.obs);
  Value bc_ex = bc_nll(ex.head, exemplar.actions);
  double nc = current.size(), ne = exemplar.size();
  // Equal weight per sample across the union batch.
  Value bc_union = ad::mul_scalar(
      ad::add(ad::mul_scalar(bc_cur, nc), ad::mul_scalar(bc_ex, ne)), 1.0 / (nc + ne));
  out.parts.bc_nll = bc_union->val.item();

  Value total = bc_union;
  if (teacher != nullptr && weights.any_active()) {
    check_arg(teacher->config == student.config,
              "total_loss: teacher/student config mismatch");
    LossGraph d = distill_terms(ex, *teacher, exemplar, weights, n_samples, rng);
    out.parts.l_agentview = d.parts.l_agentview;
    out.parts.l_handeye = d.parts.l_handeye;
    out.parts.l_text = d.parts.l_text;
    out.parts.l_extra = d.parts.l_extra;
    out.parts.l_policy = d.parts.l_policy;
    total = ad::add(total, d.total);
  }
  out.total = total;
  out.parts.total = total->val.item();
  return out;
}

}  // namespace m2d::losses

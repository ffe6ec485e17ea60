#pragma once

#include "m2d/gmm.hpp"
#include "m2d/policy.hpp"

namespace m2d::losses {

struct LossWeights {
  double lambda_i = 0.05;  // image (agentview + handeye)
  double lambda_t = 0.05;  // text
  double lambda_e = 0.05;  // extra (joint + gripper)
  double lambda_p = 0.05;  // policy KL

  void validate() const;
  bool any_active() const {
    return lambda_i > 0.0 || lambda_t > 0.0 || lambda_e > 0.0 || lambda_p > 0.0;
  }
};

struct LossBreakdown {
  double bc_nll = 0.0;
  double l_agentview = 0.0;
  double l_handeye = 0.0;
  double l_text = 0.0;
  double l_extra = 0.0;
  double l_policy = 0.0;
  double total = 0.0;
};

// A batch of training windows: observations plus the aligned target action
// of each window's final timestep.
struct SampleBatch {
  policy::ObsBatch obs;
  ad::Tensor actions;  // [B x action_dim]

  int size() const { return obs.batch; }
  bool empty() const { return obs.batch == 0; }
};

// Mean negative mixture log-likelihood of the target actions.
ad::Value bc_nll(const gmm::GmmValue& head, const ad::Tensor& actions);

// (1/(N*L)) sum of squared L2 distances between per-timestep latents.
ad::Value modality_l2(const ad::Value& current, const ad::Value& previous);

struct FeatureLosses {
  ad::Value agentview, handeye, text, joint, gripper;
};

// Per-modality feature distillation between student and teacher latents.
// Teacher latents must come from a frozen (constant) parameter set.
FeatureLosses distill_features(const policy::LatentSet& student,
                               const policy::LatentSet& teacher);

// Mean Monte-Carlo KL from student to teacher heads over the batch.
ad::Value l_policy(const gmm::GmmValue& student, const gmm::GmmValue& teacher,
                   int n_samples, Rng& rng);

struct LossGraph {
  ad::Value total;
  LossBreakdown parts;
};

// Weighted distillation loss on exemplar windows only.
LossGraph l_distill(const policy::PolicyParams& student,
                    const policy::PolicyParams& teacher,
                    const SampleBatch& exemplar, const LossWeights& weights,
                    int n_samples, Rng& rng);

// Full objective: behavioral cloning over current-plus-exemplar samples with
// equal per-sample weight, plus the weighted distillation terms on the
// exemplar sub-batch. Teacher may be null (first task) and the exemplar batch
// may be empty; either drops the distillation terms entirely.
LossGraph total_loss(const policy::PolicyParams& student,
                     const policy::PolicyParams* teacher,
                     const SampleBatch& current, const SampleBatch& exemplar,
                     const LossWeights& weights, int n_samples, Rng& rng);

}  // namespace m2d::losses

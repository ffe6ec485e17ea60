#pragma once

#include <vector>

#include "m2d/autodiff.hpp"
#include "m2d/common.hpp"

namespace m2d::gmm {

// Scale clamp bounds shared with the policy head.
inline constexpr double kScaleFloor = 1e-4;
inline constexpr double kScaleCeil = 10.0;

// Plain mixture parameters, used by rollouts and validation oracles.
struct GmmParams {
  int components = 0;
  int action_dim = 0;
  std::vector<double> logits;      // C
  std::vector<double> means;       // C x A row-major
  std::vector<double> log_scales;  // C x A

  std::vector<double> weights() const;  // softmax(logits)
};

struct GaussianDiag {
  std::vector<double> mean;
  std::vector<double> scale;  // >= kScaleFloor
};

struct KlEstimate {
  double value = 0.0;
  int n_samples = 0;
  std::vector<double> per_sample;
};

// Graph-side head output; logits [B x C], means/log_scales [B x C x A].
struct GmmValue {
  ad::Value logits;
  ad::Value means;
  ad::Value log_scales;

  int batch() const { return logits->shape()[0]; }
  int components() const { return logits->shape()[1]; }
  int action_dim() const { return means->shape()[2]; }
};

GmmValue to_value(const GmmParams& p);           // constant, B = 1
GmmParams extract(const GmmValue& v, int b = 0); // read row b

double log_pdf(const GmmParams& p, const std::vector<double>& action);

// Mixture log-density of a batch of actions [B x S x A] under head `p`,
// computed via log-sum-exp over per-component Gaussian log-densities.
// Returns [B x S]; differentiable in both the head and the actions.
ad::Value log_pdf(const GmmValue& p, const ad::Value& actions);

// Draw n actions (flat n x A). Component via categorical over weights, then
// mean + scale * standard normal.
std::vector<double> sample(const GmmParams& p, int n, Rng& rng);

// Graph sampling: [B x n x A]. With pathwise=true the result carries
// gradients through the selected component's mean and scale (component
// choice and the normal noise stay constant); otherwise it is a constant.
ad::Value sample_actions(const GmmValue& p, int n, Rng& rng, bool pathwise);

double gaussian_kl_closed_form(const GaussianDiag& p, const GaussianDiag& q);

struct McKl {
  ad::Value loss;        // scalar, mean over batch and samples
  ad::Value per_sample;  // [B x N]
};

// Monte-Carlo KL(current || previous) with samples drawn pathwise from
// `current`. Identical heads give exactly zero (terms cancel bitwise).
McKl mc_kl(const GmmValue& current, const GmmValue& previous, int n, Rng& rng);
KlEstimate mc_kl(const GmmParams& current, const GmmParams& previous, int n,
                 Rng& rng);

}  // namespace m2d::gmm

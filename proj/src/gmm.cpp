#include "m2d/gmm.hpp"

#include <cmath>

namespace m2d::gmm {

namespace {
constexpr double kLog2Pi = 1.8378770664093453;

void check_params(const GmmParams& p) {
  check_arg(p.components >= 1 && p.action_dim >= 1, "GmmParams: empty mixture");
  check_shape(static_cast<int>(p.logits.size()) == p.components &&
                  static_cast<int>(p.means.size()) == p.components * p.action_dim &&
                  static_cast<int>(p.log_scales.size()) == p.components * p.action_dim,
              "GmmParams: inconsistent field sizes");
}
}  // namespace

std::vector<double> GmmParams::weights() const {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  std::vector<double> w(logits.size());
  double acc = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp(logits[i] - m);
    acc += w[i];
  }
  for (double& v : w) v /= acc;
  return w;
}

GmmValue to_value(const GmmParams& p) {
  check_params(p);
  return GmmValue{
      ad::constant(ad::Tensor({1, p.components}, p.logits)),
      ad::constant(ad::Tensor({1, p.components, p.action_dim}, p.means)),
      ad::constant(ad::Tensor({1, p.components, p.action_dim}, p.log_scales))};
}

GmmParams extract(const GmmValue& v, int b) {
  int c = v.components(), a = v.action_dim();
  check_arg(b >= 0 && b < v.batch(), "extract: batch index out of range");
  GmmParams p;
  p.components = c;
  p.action_dim = a;
  p.logits.assign(v.logits->val.data() + static_cast<int64_t>(b) * c,
                  v.logits->val.data() + static_cast<int64_t>(b + 1) * c);
  const double* m = v.means->val.data() + static_cast<int64_t>(b) * c * a;
  const double* s = v.log_scales->val.data() + static_cast<int64_t>(b) * c * a;
  p.means.assign(m, m + c * a);
  p.log_scales.assign(s, s + c * a);
  return p;
}

double log_pdf(const GmmParams& p, const std::vector<double>& action) {
  check_params(p);
  check_shape(static_cast<int>(action.size()) == p.action_dim,
              "log_pdf: action dim mismatch");
  GmmValue v = to_value(p);
  ad::Value a = ad::constant(ad::Tensor({1, 1, p.action_dim}, action));
  return log_pdf(v, a)->val.item();
}

ad::Value log_pdf(const GmmValue& p, const ad::Value& actions) {
  check_shape(actions->val.rank() == 3, "log_pdf: actions must be [B x S x A]");
  int bsz = actions->shape()[0], s = actions->shape()[1], a = actions->shape()[2];
  check_shape(bsz == p.batch() && a == p.action_dim(),
              "log_pdf: head/action shape mismatch");
  int c = p.components();
  using namespace ad;
  // [B x S x 1 x A] vs [B x 1 x C x A]
  Value act = reshape(actions, {bsz, s, 1, a});
  Value mu = reshape(p.means, {bsz, 1, c, a});
  Value log_sigma = reshape(p.log_scales, {bsz, 1, c, a});
  Value sigma = exp(log_sigma);
  Value z = divide(sub(act, mu), sigma);
  // component log-density: -1/2 sum z^2 - sum log sigma - A/2 log 2pi
  Value comp = sub(mul_scalar(sum_last(square(z)), -0.5), sum_last(log_sigma));
  comp = add_scalar(comp, -0.5 * a * kLog2Pi);  // [B x S x C]
  Value log_w = sub(p.logits, reshape(log_sum_exp(p.logits), {bsz, 1}));  // [B x C]
  comp = add(comp, reshape(log_w, {bsz, 1, c}));
  return log_sum_exp(comp);  // [B x S]
}

std::vector<double> sample(const GmmParams& p, int n, Rng& rng) {
  check_params(p);
  check_arg(n >= 1, "sample: n must be >= 1");
  std::vector<double> w = p.weights();
  std::vector<double> out(static_cast<size_t>(n) * p.action_dim);
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    int c = p.components - 1;
    double acc = 0.0;
    for (int j = 0; j < p.components; ++j) {
      acc += w[static_cast<size_t>(j)];
      if (u < acc) {
        c = j;
        break;
      }
    }
    for (int d = 0; d < p.action_dim; ++d) {
      double sigma = std::exp(p.log_scales[static_cast<size_t>(c) * p.action_dim + d]);
      out[static_cast<size_t>(i) * p.action_dim + d] =
          p.means[static_cast<size_t>(c) * p.action_dim + d] + sigma * rng.normal();
    }
  }
  return out;
}

ad::Value sample_actions(const GmmValue& p, int n, Rng& rng, bool pathwise) {
  check_arg(n >= 1, "sample_actions: n must be >= 1");
  int bsz = p.batch(), c = p.components(), a = p.action_dim();
  using namespace ad;
  // Component selection from the current mixture weights; no gradient flows
  // through the choice.
  std::vector<int> idx(static_cast<size_t>(bsz) * n);
  const double* logits = p.logits->val.data();
  for (int b = 0; b < bsz; ++b) {
    double m = logits[static_cast<int64_t>(b) * c];
    for (int j = 1; j < c; ++j) m = std::max(m, logits[static_cast<int64_t>(b) * c + j]);
    double norm = 0.0;
    std::vector<double> w(static_cast<size_t>(c));
    for (int j = 0; j < c; ++j) {
      w[static_cast<size_t>(j)] = std::exp(logits[static_cast<int64_t>(b) * c + j] - m);
      norm += w[static_cast<size_t>(j)];
    }
    for (int s = 0; s < n; ++s) {
      double u = rng.uniform() * norm;
      int pick = c - 1;
      double acc = 0.0;
      for (int j = 0; j < c; ++j) {
        acc += w[static_cast<size_t>(j)];
        if (u < acc) {
          pick = j;
          break;
        }
      }
      idx[static_cast<size_t>(b) * n + s] = pick;
    }
  }
  Tensor eps({bsz, n, a});
  for (int64_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();

  Value mu_sel = gather_axis1(p.means, idx, n);
  Value sigma_sel = exp(gather_axis1(p.log_scales, idx, n));
  Value actions = add(mu_sel, mul(sigma_sel, constant(std::move(eps))));
  // Non-pathwise sampling returns the same values detached from the graph.
  return pathwise ? actions : constant(actions->val);
}

double gaussian_kl_closed_form(const GaussianDiag& p, const GaussianDiag& q) {
  check_shape(p.mean.size() == q.mean.size() && p.scale.size() == p.mean.size() &&
                  q.scale.size() == q.mean.size(),
              "gaussian_kl_closed_form: dimension mismatch");
  double kl = 0.0;
  for (size_t d = 0; d < p.mean.size(); ++d) {
    double sp = p.scale[d], sq = q.scale[d];
    double dm = p.mean[d] - q.mean[d];
    kl += std::log(sq / sp) + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5;
  }
  return kl;
}

McKl mc_kl(const GmmValue& current, const GmmValue& previous, int n, Rng& rng) {
  check_arg(n >= 1, "mc_kl: n must be >= 1");
  check_shape(current.action_dim() == previous.action_dim() &&
                  current.batch() == previous.batch(),
              "mc_kl: head shape mismatch");
  using namespace ad;
  Value actions = sample_actions(current, n, rng, /*pathwise=*/true);
  Value diff = sub(log_pdf(current, actions), log_pdf(previous, actions));
  return McKl{mean_all(diff), diff};
}

KlEstimate mc_kl(const GmmParams& current, const GmmParams& previous, int n,
                 Rng& rng) {
  McKl r = mc_kl(to_value(current), to_value(previous), n, rng);
  KlEstimate est;
  est.value = r.loss->val.item();
  est.n_samples = n;
  est.per_sample.assign(r.per_sample->val.data(),
                        r.per_sample->val.data() + r.per_sample->val.size());
  return est;
}

}  // namespace m2d::gmm

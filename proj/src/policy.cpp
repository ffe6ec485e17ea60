#include "m2d/policy.hpp"

#include <cmath>

namespace m2d::policy {

using ad::Activation;
using ad::Tensor;
using ad::Value;

void PolicyConfig::validate() const {
  check_arg(latent_dim >= 1, "PolicyConfig: latent_dim must be >= 1");
  check_arg(context_len >= 1, "PolicyConfig: context_len must be >= 1");
  check_arg(components >= 1, "PolicyConfig: components must be >= 1");
  check_arg(action_dim >= 1, "PolicyConfig: action_dim must be >= 1");
  check_arg(enc_hidden >= 1, "PolicyConfig: enc_hidden must be >= 1");
}

Value ParamSet::add(const std::string& name, Tensor init, bool trainable) {
  for (const auto& [n, v] : items)
    check_arg(n != name, "ParamSet: duplicate parameter ", name);
  Value v = trainable ? ad::leaf(std::move(init)) : ad::constant(std::move(init));
  items.emplace_back(name, v);
  return v;
}

const Value& ParamSet::at(const std::string& name) const {
  for (const auto& [n, v] : items)
    if (n == name) return v;
  throw std::invalid_argument("ParamSet: unknown parameter " + name);
}

std::vector<Value> ParamSet::values() const {
  std::vector<Value> out;
  out.reserve(items.size());
  for (const auto& [n, v] : items) out.push_back(v);
  return out;
}

int64_t ParamSet::scalar_count() const {
  int64_t n = 0;
  for (const auto& [name, v] : items) n += v->val.size();
  return n;
}

bool ParamSet::all_finite() const {
  for (const auto& [name, v] : items)
    if (!v->val.all_finite()) return false;
  return true;
}

namespace {

const char* const kModalityNames[kNumModalities] = {"lang", "agentview",
                                                    "handeye", "joint", "gripper"};
const int kModalityDims[kNumModalities] = {sim::kLangDim, sim::kAgentViewDim,
                                           sim::kHandEyeDim, sim::kJointDim, 1};

Tensor uniform_init(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

void build_params(PolicyParams& p, uint64_t seed, bool trainable) {
  const PolicyConfig& c = p.config;
  Rng rng(mix64(seed ^ 0x706f6c69637931ULL));
  int h = c.enc_hidden, d = c.latent_dim;
  for (int m = 0; m < kNumModalities; ++m) {
    std::string base = std::string("enc_") + kModalityNames[m] + ".";
    int in = kModalityDims[m];
    p.params.add(base + "w1", uniform_init({in, h}, in, rng), trainable);
    p.params.add(base + "b1", Tensor({h}), trainable);
    p.params.add(base + "w2", uniform_init({h, h}, h, rng), trainable);
    p.params.add(base + "b2", Tensor({h}), trainable);
    p.params.add(base + "w3", uniform_init({h, d}, h, rng), trainable);
    p.params.add(base + "b3", Tensor({d}), trainable);
  }
  p.params.add("pos_embed", uniform_init({c.max_tokens(), d}, d, rng), trainable);
  for (const char* n : {"wq", "wk", "wv", "wo"})
    p.params.add(std::string("attn.") + n, uniform_init({d, d}, d, rng), trainable);
  for (const char* n : {"bq", "bk", "bv", "bo"})
    p.params.add(std::string("attn.") + n, Tensor({d}), trainable);
  p.params.add("head.w", uniform_init({d, c.head_dim()}, d, rng), trainable);
  p.params.add("head.b", Tensor({c.head_dim()}), trainable);
}

PolicyParams clone(const PolicyParams& src, bool trainable) {
  PolicyParams out;
  out.config = src.config;
  for (const auto& [name, v] : src.params.items)
    out.params.add(name, v->val, trainable);
  return out;
}

Value encode_modality(const PolicyParams& p, const std::string& base,
                      const Tensor& input, int batch, int len) {
  const auto& ps = p.params;
  Value x = ad::constant(input);
  x = ad::dense(x, ps.at(base + "w1"), ps.at(base + "b1"), Activation::kTanh);
  x = ad::dense(x, ps.at(base + "w2"), ps.at(base + "b2"), Activation::kTanh);
  x = ad::dense(x, ps.at(base + "w3"), ps.at(base + "b3"), Activation::kIdentity);
  return ad::reshape(x, {batch, len, p.config.latent_dim});
}

}  // namespace

PolicyParams init_params(const PolicyConfig& config, uint64_t seed) {
  config.validate();
  PolicyParams p;
  p.config = config;
  build_params(p, seed, /*trainable=*/true);
  return p;
}

PolicyParams clone_trainable(const PolicyParams& p) { return clone(p, true); }
PolicyParams clone_constant(const PolicyParams& p) { return clone(p, false); }

ObsBatch make_obs_batch(
    const std::vector<std::vector<const sim::MultiModalObs*>>& windows,
    int context_len) {
  check_arg(!windows.empty(), "make_obs_batch: empty batch");
  int b = static_cast<int>(windows.size());
  int l = context_len;
  ObsBatch out;
  out.batch = b;
  out.len = l;
  out.agentview = Tensor({b * l, sim::kAgentViewDim});
  out.handeye = Tensor({b * l, sim::kHandEyeDim});
  out.lang = Tensor({b * l, sim::kLangDim});
  out.joint = Tensor({b * l, sim::kJointDim});
  out.gripper = Tensor({b * l, 1});
  for (int i = 0; i < b; ++i) {
    const auto& win = windows[static_cast<size_t>(i)];
    check_arg(!win.empty() && static_cast<int>(win.size()) <= l,
              "make_obs_batch: window length must be in [1, L]");
    int pad = l - static_cast<int>(win.size());
    for (int t = 0; t < l; ++t) {
      const sim::MultiModalObs& obs = t < pad ? *win[0] : *win[static_cast<size_t>(t - pad)];
      int64_t row = static_cast<int64_t>(i) * l + t;
      std::copy(obs.agentview.begin(), obs.agentview.end(),
                out.agentview.data() + row * sim::kAgentViewDim);
      std::copy(obs.handeye.begin(), obs.handeye.end(),
                out.handeye.data() + row * sim::kHandEyeDim);
      std::copy(obs.lang.begin(), obs.lang.end(), out.lang.data() + row * sim::kLangDim);
      std::copy(obs.joint.begin(), obs.joint.end(), out.joint.data() + row * sim::kJointDim);
      out.gripper.data()[row] = obs.gripper[0];
    }
  }
  return out;
}

LatentSet encode(const PolicyParams& p, const ObsBatch& obs) {
  check_arg(obs.batch >= 1 && obs.len >= 1, "encode: empty observation batch");
  int b = obs.batch, l = obs.len;
  check_shape(obs.agentview.shape() == std::vector<int>({b * l, sim::kAgentViewDim}),
              "encode: agentview shape mismatch");
  LatentSet ls;
  ls.lang = encode_modality(p, "enc_lang.", obs.lang, b, l);
  ls.agentview = encode_modality(p, "enc_agentview.", obs.agentview, b, l);
  ls.handeye = encode_modality(p, "enc_handeye.", obs.handeye, b, l);
  ls.joint = encode_modality(p, "enc_joint.", obs.joint, b, l);
  ls.gripper = encode_modality(p, "enc_gripper.", obs.gripper, b, l);
  return ls;
}

ad::Value temporal_aggregate(const PolicyParams& p, const LatentSet& latents) {
  const auto& s = latents.lang->shape();
  int b = s[0], l = s[1], d = s[2];
  using namespace ad;
  auto expand = [&](const Value& v) { return reshape(v, {b, l, 1, d}); };
  Value tokens = concat({expand(latents.lang), expand(latents.agentview),
                         expand(latents.handeye), expand(latents.joint),
                         expand(latents.gripper)},
                        2);
  int t = kNumModalities * l;
  check_arg(t <= p.config.max_tokens(), "temporal_aggregate: ", t,
            " tokens exceed max context ", p.config.max_tokens());
  tokens = reshape(tokens, {b, t, d});
  Value pos = slice(p.params.at("pos_embed"), 0, 0, t);
  tokens = add(tokens, pos);
  AttentionParams ap{p.params.at("attn.wq"), p.params.at("attn.bq"),
                     p.params.at("attn.wk"), p.params.at("attn.bk"),
                     p.params.at("attn.wv"), p.params.at("attn.bv"),
                     p.params.at("attn.wo"), p.params.at("attn.bo")};
  Value out = causal_self_attention(tokens, ap, p.config.max_tokens());
  return reshape(slice(out, 1, t - 1, 1), {b, d});
}

gmm::GmmValue gmm_head(const PolicyParams& p, const ad::Value& context) {
  const PolicyConfig& c = p.config;
  int b = context->shape()[0];
  using namespace ad;
  Value raw = add(matmul(context, p.params.at("head.w")), p.params.at("head.b"));
  int ca = c.components * c.action_dim;
  gmm::GmmValue head;
  head.logits = slice(raw, 1, 0, c.components);
  head.means = reshape(slice(raw, 1, c.components, ca), {b, c.components, c.action_dim});
  head.log_scales =
      clamp(reshape(slice(raw, 1, c.components + ca, ca), {b, c.components, c.action_dim}),
            std::log(gmm::kScaleFloor), std::log(gmm::kScaleCeil));
  return head;
}

gmm::GmmValue policy_forward(const PolicyParams& p, const ObsBatch& obs) {
  gmm::GmmValue head = gmm_head(p, temporal_aggregate(p, encode(p, obs)));
  check_numeric(head.logits->val.all_finite() && head.means->val.all_finite() &&
                    head.log_scales->val.all_finite(),
                "policy_forward: non-finite head output (batch=", obs.batch,
                ", len=", obs.len, ")");
  return head;
}

gmm::GmmParams forward_window(const PolicyParams& p,
                              const std::vector<sim::MultiModalObs>& window) {
  check_arg(!window.empty(), "forward_window: empty window");
  std::vector<const sim::MultiModalObs*> ptrs;
  ptrs.reserve(window.size());
  size_t start = window.size() > static_cast<size_t>(p.config.context_len)
                     ? window.size() - static_cast<size_t>(p.config.context_len)
                     : 0;
  for (size_t i = start; i < window.size(); ++i) ptrs.push_back(&window[i]);
  ObsBatch batch = make_obs_batch({ptrs}, p.config.context_len);
  return gmm::extract(policy_forward(p, batch), 0);
}

EvalPolicy::EvalPolicy(const PolicyParams& p) : frozen_(clone_constant(p)) {}

std::vector<double> EvalPolicy::encode_obs(const sim::MultiModalObs& obs) const {
  std::vector<const sim::MultiModalObs*> one{&obs};
  ObsBatch batch = make_obs_batch({one}, 1);
  LatentSet ls = encode(frozen_, batch);
  int d = frozen_.config.latent_dim;
  std::vector<double> tokens(static_cast<size_t>(kNumModalities) * d);
  const ad::Value* order[kNumModalities] = {&ls.lang, &ls.agentview, &ls.handeye,
                                            &ls.joint, &ls.gripper};
  for (int m = 0; m < kNumModalities; ++m)
    std::copy((*order[m])->val.data(), (*order[m])->val.data() + d,
              tokens.begin() + static_cast<int64_t>(m) * d);
  return tokens;
}

gmm::GmmParams EvalPolicy::forward_tokens(
    const std::vector<const std::vector<double>*>& window) const {
  const PolicyConfig& c = frozen_.config;
  check_arg(static_cast<int>(window.size()) == c.context_len,
            "forward_tokens: expected ", c.context_len, " token blocks");
  int d = c.latent_dim;
  int t = c.max_tokens();
  Tensor tokens({1, t, d});
  for (int i = 0; i < c.context_len; ++i) {
    const std::vector<double>& block = *window[static_cast<size_t>(i)];
    check_arg(static_cast<int>(block.size()) == kNumModalities * d,
              "forward_tokens: bad token block size");
    std::copy(block.begin(), block.end(),
              tokens.data() + static_cast<int64_t>(i) * kNumModalities * d);
  }
  using namespace ad;
  Value tok = add(constant(std::move(tokens)), slice(frozen_.params.at("pos_embed"), 0, 0, t));
  AttentionParams ap{frozen_.params.at("attn.wq"), frozen_.params.at("attn.bq"),
                     frozen_.params.at("attn.wk"), frozen_.params.at("attn.bk"),
                     frozen_.params.at("attn.wv"), frozen_.params.at("attn.bv"),
                     frozen_.params.at("attn.wo"), frozen_.params.at("attn.bo")};
  Value out = causal_self_attention(tok, ap, c.max_tokens());
  Value ctx = reshape(slice(out, 1, t - 1, 1), {1, d});
  return gmm::extract(gmm_head(frozen_, ctx), 0);
}

sim::Action EvalPolicy::act(const gmm::GmmParams& head) const {
  std::vector<double> w = head.weights();
  int best = 0;
  for (int c = 1; c < head.components; ++c)
    if (w[static_cast<size_t>(c)] > w[static_cast<size_t>(best)]) best = c;
  const double* mu = head.means.data() + static_cast<int64_t>(best) * head.action_dim;
  sim::Action a;
  a.dx = mu[0];
  a.dy = head.action_dim > 1 ? mu[1] : 0.0;
  a.grip = head.action_dim > 2 ? mu[2] : 0.0;
  return a;
}

}  // namespace m2d::policy

#pragma once

#include <string>
#include <vector>

#include "m2d/autodiff.hpp"
#include "m2d/gmm.hpp"
#include "m2d/sim.hpp"

namespace m2d::policy {

inline constexpr int kNumModalities = 5;

struct PolicyConfig {
  int latent_dim = 64;
  int context_len = 8;  // observation window L
  int components = 5;   // GMM head size
  int action_dim = 3;
  int enc_hidden = 64;

  int max_tokens() const { return kNumModalities * context_len; }
  int head_dim() const { return components * (1 + 2 * action_dim); }
  void validate() const;
  bool operator==(const PolicyConfig&) const = default;
};

// Named parameter tensors in a fixed (insertion) order; the order defines
// serialization layout and optimizer state alignment.
struct ParamSet {
  std::vector<std::pair<std::string, ad::Value>> items;

  ad::Value add(const std::string& name, ad::Tensor init, bool trainable);
  const ad::Value& at(const std::string& name) const;
  std::vector<ad::Value> values() const;
  int64_t scalar_count() const;
  bool all_finite() const;
};

struct PolicyParams {
  PolicyConfig config;
  ParamSet params;
};

// Fan-in scaled uniform weights, zero biases; deterministic per seed.
PolicyParams init_params(const PolicyConfig& config, uint64_t seed);

PolicyParams clone_trainable(const PolicyParams& p);
// Frozen deep copy: leaves carry no gradient, so any forward pass through
// them builds a constant (teacher) subgraph.
PolicyParams clone_constant(const PolicyParams& p);

// B windows of L timesteps, flattened to [B*L x dim] per modality.
struct ObsBatch {
  int batch = 0;
  int len = 0;
  ad::Tensor agentview, handeye, lang, joint, gripper;
};

// Histories shorter than L are left-padded by repeating the first entry.
ObsBatch make_obs_batch(const std::vector<std::vector<const sim::MultiModalObs*>>& windows,
                        int context_len);

// Per-modality 64-d tokens, each [B x L x latent].
struct LatentSet {
  ad::Value agentview, handeye, lang, joint, gripper;
};

LatentSet encode(const PolicyParams& p, const ObsBatch& obs);

// Interleaves tokens as (lang, agentview, handeye, joint, gripper) per
// timestep, adds learned positions, applies causal attention, and returns
// the transformer output at the final position: [B x latent].
ad::Value temporal_aggregate(const PolicyParams& p, const LatentSet& latents);

gmm::GmmValue gmm_head(const PolicyParams& p, const ad::Value& context);

gmm::GmmValue policy_forward(const PolicyParams& p, const ObsBatch& obs);

// Single-window convenience used by tests and non-cached evaluation.
gmm::GmmParams forward_window(const PolicyParams& p,
                              const std::vector<sim::MultiModalObs>& window);

// Frozen policy for rollouts. Encoder tokens are cached per observation so a
// sliding evaluation window re-encodes nothing; results are bit-identical to
// forward_window on the same history.
class EvalPolicy {
 public:
  explicit EvalPolicy(const PolicyParams& p);

  const PolicyConfig& config() const { return frozen_.config; }
  const PolicyParams& params() const { return frozen_; }

  // One observation -> kNumModalities * latent doubles in token order.
  std::vector<double> encode_obs(const sim::MultiModalObs& obs) const;

  // window: L pointers to cached token blocks, oldest first.
  gmm::GmmParams forward_tokens(const std::vector<const std::vector<double>*>& window) const;

  // Deterministic evaluation action: mean of the dominant mixture component.
  sim::Action act(const gmm::GmmParams& head) const;

 private:
  PolicyParams frozen_;
};

}  // namespace m2d::policy

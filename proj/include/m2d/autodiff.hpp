#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "m2d/tensor.hpp"

namespace m2d::ad {

struct Node;
using Value = std::shared_ptr<Node>;

// One vertex of the (acyclic, dynamically built) computation graph.
// Nodes that do not require gradient drop their parent edges, so
// constant subgraphs (e.g. a frozen teacher network) are forward-only.
struct Node {
  Tensor val;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Value> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  const std::vector<int>& shape() const { return val.shape(); }
};

Value leaf(Tensor v);      // trainable parameter (requires_grad = true)
Value constant(Tensor v);  // data / frozen weights

// Elementwise with numpy-style broadcasting.
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value divide(const Value& a, const Value& b);

Value add_scalar(const Value& a, double s);
Value mul_scalar(const Value& a, double s);

Value tanh(const Value& a);
Value relu(const Value& a);
Value exp(const Value& a);
Value log(const Value& a);
Value square(const Value& a);
Value clamp(const Value& a, double lo, double hi);

// 2-D x 2-D, batched 3-D x 3-D, or 3-D x 2-D (right operand shared).
Value matmul(const Value& a, const Value& b);
Value transpose_last(const Value& a);
Value reshape(const Value& a, std::vector<int> shape);

Value sum_last(const Value& a);
Value sum_all(const Value& a);
Value mean_all(const Value& a);
// Shift-invariant reductions over the last axis.
Value log_sum_exp(const Value& a);
Value softmax(const Value& a);

Value concat(const std::vector<Value>& parts, int axis);
Value slice(const Value& a, int axis, int start, int len);
// a: [B x C x A], idx: B*S row indices into axis 1 -> [B x S x A].
Value gather_axis1(const Value& a, const std::vector<int>& idx, int s);

enum class Activation { kIdentity, kTanh, kRelu };

// act(x W + b); x: [... x Din], w: [Din x Dout], b: [Dout].
Value dense(const Value& x, const Value& w, const Value& b, Activation act);

struct AttentionParams {
  Value wq, bq, wk, bk, wv, bv, wo, bo;
};

// Single-head masked self-attention with a residual connection.
// tokens: [B x T x D]; output at position t depends on positions <= t only.
Value causal_self_attention(const Value& tokens, const AttentionParams& p,
                            int max_context);

// Reverse-mode sweep from a scalar loss. Returns one gradient per entry of
// `params`, in order; parameters unreachable from the loss get zeros.
std::vector<Tensor> backprop(const Value& loss, const std::vector<Value>& params);

// Central-difference verification of backprop. `f` must rebuild the loss
// graph from the current parameter values and be deterministic (freeze any
// sampling noise before calling). Returns the max relative error, where
// rel = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<Value()>& f,
                         const std::vector<Value>& params, double eps);

}  // namespace m2d::ad
